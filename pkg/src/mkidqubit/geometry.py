"""Three-layer chip stack and straight-line muon trajectories through it.

Coordinates are millimetres with ``z`` pointing up; the qubit chip is
centred on the origin. Trajectories travel downward from a horizontal
generating plane placed at the top face of the top detector chip.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from .errors import ConfigError

ROLES = ("top", "qubit", "bottom")
DETECTOR_ROLES = ("top", "bottom")

DEFAULT_LATERAL_MM = 20.0
DEFAULT_THICKNESS_MM = 0.65
DEFAULT_OPENING_ANGLE_DEG = 113.9


@dataclass(frozen=True)
class ChipGeometry:
    center: tuple = (0.0, 0.0, 0.0)
    lateral_size: tuple = (DEFAULT_LATERAL_MM, DEFAULT_LATERAL_MM)
    thickness: float = DEFAULT_THICKNESS_MM
    pixel_grid: tuple = (3, 3)
    role: str = "qubit"

    def __post_init__(self):
        if len(self.center) != 3:
            raise ConfigError("chip center must be a 3-vector")
        if min(self.lateral_size) <= 0 or self.thickness <= 0:
            raise ConfigError(f"{self.role} chip dimensions must be positive")
        if min(self.pixel_grid) < 1:
            raise ConfigError(f"{self.role} pixel grid must be at least 1x1")
        if self.role not in ROLES:
            raise ConfigError(f"unknown chip role {self.role!r}")

    @property
    def bounds(self):
        c = np.asarray(self.center, dtype=float)
        half = np.array([self.lateral_size[0] / 2, self.lateral_size[1] / 2, self.thickness / 2])
        return c - half, c + half

    @property
    def area_cm2(self):
        return self.lateral_size[0] * self.lateral_size[1] / 100.0

    @property
    def n_pixels(self):
        return self.pixel_grid[0] * self.pixel_grid[1]

    def pixel_centers(self):
        """(rows*cols, 2) lateral pixel centres, row-major from the -x/-y corner."""
        rows, cols = self.pixel_grid
        lx, ly = self.lateral_size
        xs = self.center[0] - lx / 2 + (np.arange(cols) + 0.5) * lx / cols
        ys = self.center[1] - ly / 2 + (np.arange(rows) + 0.5) * ly / rows
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass(frozen=True)
class StackGeometry:
    """Top detector, qubit chip and bottom detector sharing one vertical axis."""

    chips: tuple
    vertical_gaps: tuple

    def __post_init__(self):
        if len(self.chips) != 3:
            raise ConfigError("a stack has exactly 3 chips")
        if tuple(c.role for c in self.chips) != ROLES:
            raise ConfigError("chips must be ordered top, qubit, bottom")
        if len(self.vertical_gaps) != 2 or min(self.vertical_gaps) < 0:
            raise ConfigError("two non-negative vertical gaps are required")
        axis = {(c.center[0], c.center[1]) for c in self.chips}
        if len(axis) != 1:
            raise ConfigError("chips must share a vertical axis")

    @classmethod
    def build(cls, lateral_mm=DEFAULT_LATERAL_MM, thickness_mm=DEFAULT_THICKNESS_MM,
              gaps_mm=None, pixel_grid=(3, 3)):
        """Stack with equal chips; ``gaps_mm=None`` picks the gap giving the 113.9 degree opening."""
        if gaps_mm is None:
            g = gap_for_opening_angle(DEFAULT_OPENING_ANGLE_DEG, lateral_mm, thickness_mm)
            gaps_mm = (g, g)
        elif np.isscalar(gaps_mm):
            gaps_mm = (float(gaps_mm), float(gaps_mm))
        g_top, g_bot = gaps_mm
        t = thickness_mm
        lat = (lateral_mm, lateral_mm)
        top = ChipGeometry((0.0, 0.0, t + g_top), lat, t, tuple(pixel_grid), "top")
        qub = ChipGeometry((0.0, 0.0, 0.0), lat, t, (1, 1), "qubit")
        bot = ChipGeometry((0.0, 0.0, -(t + g_bot)), lat, t, tuple(pixel_grid), "bottom")
        return cls((top, qub, bot), (float(g_top), float(g_bot)))

    @property
    def top(self):
        return self.chips[0]

    @property
    def qubit(self):
        return self.chips[1]

    @property
    def bottom(self):
        return self.chips[2]

    @property
    def detectors(self):
        return (self.chips[0], self.chips[2])

    def chip(self, role):
        return self.chips[ROLES.index(role)]

    @property
    def z_top(self):
        return self.top.bounds[1][2]

    @property
    def height(self):
        return self.top.bounds[1][2] - self.bottom.bounds[0][2]

    @property
    def half_angle(self):
        return derive_half_angle(self)


def gap_for_opening_angle(opening_deg, lateral_mm=DEFAULT_LATERAL_MM, thickness_mm=DEFAULT_THICKNESS_MM):
    """Chip-to-chip gap that makes the full stack subtend ``opening_deg``."""
    half = math.radians(opening_deg / 2)
    total = lateral_mm / math.tan(half)
    gap = (total - 3 * thickness_mm) / 2
    if gap < 0:
        raise ConfigError(f"opening angle {opening_deg} deg not reachable with {thickness_mm} mm chips")
    return gap


def derive_half_angle(stack):
    """Largest zenith angle (degrees) at which every line through the qubit-chip
    centre fully traverses both outer chips, for any azimuth."""
    apex = np.asarray(stack.qubit.center, dtype=float)
    angles = []
    for chip in stack.detectors:
        lo, hi = chip.bounds
        # distance from the apex to the far (outer) face of the chip
        h = max(abs(hi[2] - apex[2]), abs(lo[2] - apex[2]))
        if chip.center[2] == apex[2] or not math.isfinite(h):
            raise ConfigError("degenerate stack: zero height between qubit and detector")
        w = min(chip.lateral_size) / 2
        angles.append(math.atan2(w, h))
    return math.degrees(min(angles))


@dataclass(frozen=True)
class Trajectory:
    entry_point: tuple
    zenith: float
    azimuth: float
    weight: float = 1.0  # generating-plane area in cm^2 represented by one sample

    def __post_init__(self):
        if not (0.0 <= self.zenith < math.pi / 2):
            raise ValueError(f"zenith {self.zenith} outside [0, pi/2)")
        if not (0.0 <= self.azimuth < 2 * math.pi):
            raise ValueError(f"azimuth {self.azimuth} outside [0, 2pi)")

    @property
    def direction(self):
        return direction_vectors(np.array([self.zenith]), np.array([self.azimuth]))[0]


def direction_vectors(zenith, azimuth):
    """Unit vectors of downward-going tracks, shape (n, 3)."""
    st = np.sin(zenith)
    return np.column_stack([st * np.cos(azimuth), st * np.sin(azimuth), -np.cos(zenith)])


def generating_plane(stack, margin_factor=2.0):
    """``(z, half_x, half_y, area_cm2)`` of the muon generating plane."""
    lx, ly = stack.top.lateral_size
    hx = lx / 2 + margin_factor * lx
    hy = ly / 2 + margin_factor * ly
    return stack.z_top, hx, hy, 4 * hx * hy / 100.0


def sample_zenith(rng, n):
    """Zenith angles with density proportional to cos^2 * sin on [0, pi/2)."""
    u = rng.random(n)
    # inverse of F(theta) = 1 - cos^3(theta)
    return np.arccos(np.cbrt(1.0 - u))


def sample_muon_trajectories(stack, rng, n, margin_factor=2.0):
    """Vectorised draw of ``n`` tracks: ``(entry_points (n,3), zenith, azimuth, weight)``."""
    z, hx, hy, area = generating_plane(stack, margin_factor)
    zen = sample_zenith(rng, n)
    azi = rng.random(n) * 2 * math.pi
    x = (rng.random(n) * 2 - 1) * hx + stack.top.center[0]
    y = (rng.random(n) * 2 - 1) * hy + stack.top.center[1]
    pts = np.column_stack([x, y, np.full(n, z)])
    return pts, zen, azi, area


def sample_muon_trajectory(stack, rng, margin_factor=2.0):
    pts, zen, azi, area = sample_muon_trajectories(stack, rng, 1, margin_factor)
    return Trajectory(tuple(pts[0]), float(zen[0]), float(azi[0]), area)


@dataclass(frozen=True)
class ChipHit:
    role: str
    hit: bool
    entry: tuple = None
    exit: tuple = None
    path_length: float = 0.0

    @property
    def midpoint(self):
        if not self.hit:
            return None
        return tuple((np.asarray(self.entry) + np.asarray(self.exit)) / 2)


@dataclass(frozen=True)
class ChipHits:
    hits: tuple = field(default_factory=tuple)  # one ChipHit per role, top -> bottom

    def __getitem__(self, role):
        return self.hits[ROLES.index(role)]

    def pierced(self):
        return [h for h in self.hits if h.hit]

    @property
    def any(self):
        return any(h.hit for h in self.hits)


def ray_box(points, dirs, lo, hi):
    """Slab intersection of rays ``p + s d`` (s >= 0) with one axis-aligned box.

    Returns ``(s_in, s_out, hit)`` arrays; chord length is ``s_out - s_in`` for unit ``d``.
    """
    points = np.atleast_2d(points)
    dirs = np.atleast_2d(dirs)
    n = len(points)
    s_in = np.zeros(n)
    s_out = np.full(n, np.inf)
    ok = np.ones(n, dtype=bool)
    for k in range(3):
        d = dirs[:, k]
        p = points[:, k]
        par = d == 0.0
        ok &= ~(par & ((p < lo[k]) | (p > hi[k])))
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            t1 = (lo[k] - p) / d
            t2 = (hi[k] - p) / d
        near = np.where(par, -np.inf, np.minimum(t1, t2))
        far = np.where(par, np.inf, np.maximum(t1, t2))
        s_in = np.maximum(s_in, near)
        s_out = np.minimum(s_out, far)
    hit = ok & (s_out > s_in)
    return s_in, s_out, hit


def chord_lengths(points, dirs, stack):
    """Per-chip chord lengths (n, 3) and chord midpoints (n, 3, 3), top -> bottom."""
    points = np.atleast_2d(points)
    dirs = np.atleast_2d(dirs)
    n = len(points)
    lengths = np.zeros((n, 3))
    mids = np.full((n, 3, 3), np.nan)
    for j, chip in enumerate(stack.chips):
        lo, hi = chip.bounds
        s_in, s_out, hit = ray_box(points, dirs, lo, hi)
        lengths[hit, j] = s_out[hit] - s_in[hit]
        sm = 0.5 * (s_in[hit] + s_out[hit])
        mids[hit, j] = points[hit] + sm[:, None] * dirs[hit]
    return lengths, mids


def chip_hits_batch(points, dirs, stack):
    """:class:`ChipHits` for many rays at once."""
    points = np.atleast_2d(points)
    dirs = np.atleast_2d(dirs)
    per_chip = []
    for chip in stack.chips:
        lo, hi = chip.bounds
        per_chip.append(ray_box(points, dirs, lo, hi))
    out = []
    for k in range(len(points)):
        hits = []
        for chip, (s_in, s_out, hit) in zip(stack.chips, per_chip):
            if hit[k]:
                a, b = float(s_in[k]), float(s_out[k])
                hits.append(ChipHit(chip.role, True, tuple(points[k] + a * dirs[k]),
                                    tuple(points[k] + b * dirs[k]), b - a))
            else:
                hits.append(ChipHit(chip.role, False))
        out.append(ChipHits(tuple(hits)))
    return out


def intersect(traj, stack):
    """Exact ray / box intersection of one trajectory with each chip."""
    p = np.asarray(traj.entry_point, dtype=float)[None, :]
    d = traj.direction[None, :]
    out = []
    for chip in stack.chips:
        lo, hi = chip.bounds
        s_in, s_out, hit = ray_box(p, d, lo, hi)
        if hit[0]:
            a, b = float(s_in[0]), float(s_out[0])
            out.append(ChipHit(chip.role, True, tuple(p[0] + a * d[0]), tuple(p[0] + b * d[0]), b - a))
        else:
            out.append(ChipHit(chip.role, False))
    return ChipHits(tuple(out))
