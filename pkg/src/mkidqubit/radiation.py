"""Poisson-timed radiation events, energy deposition and phonon spreading."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import (
    DETECTOR_ROLES,
    ROLES,
    Trajectory,
    chord_lengths,
    direction_vectors,
    generating_plane,
    sample_muon_trajectories,
)

MUON = "muon"
GAMMA = "gamma"


@dataclass(frozen=True)
class SourceConfig:
    muon_flux: float = 0.017  # events / s / cm^2 through the generating plane
    gamma_rate_per_chip: float = 0.0082  # events / s on each detector chip
    muon_dedx_kev_per_mm: float = 800.0
    muon_sigma_log: float = 0.3
    gamma_median_kev: float = 3000.0
    gamma_sigma_log: float = 0.8
    collection_efficiency: float = 0.6
    phonon_d0_mm: float = 5.0
    min_muon_deposit_kev: float = 0.0
    margin_factor: float = 2.0

    def __post_init__(self):
        if self.muon_flux < 0 or self.gamma_rate_per_chip < 0:
            raise ConfigError("source rates must be non-negative")
        if not 0.0 < self.collection_efficiency <= 1.0:
            raise ConfigError("collection_efficiency must be in (0, 1]")
        if self.muon_sigma_log < 0 or self.gamma_sigma_log < 0:
            raise ConfigError("log-normal widths must be non-negative")
        if self.phonon_d0_mm <= 0:
            raise ConfigError("phonon_d0_mm must be positive")


@dataclass(frozen=True)
class RadiationEvent:
    event_id: int
    kind: str
    arrival_time_ns: int
    energy_deposit_scale: float  # keV/mm for muons, keV for gammas
    trajectory: Trajectory = None
    chip: str = None  # gamma target
    impact_xy: tuple = None  # gamma impact point

    def __post_init__(self):
        if self.energy_deposit_scale <= 0:
            raise ValueError("energy_deposit_scale must be positive")


@dataclass
class DepositRecord:
    event_id: int
    chip_energy: dict  # role -> deposited keV
    pixel_energy: dict = field(default_factory=dict)  # detector role -> (rows*cols,) keV
    impact_xy: dict = field(default_factory=dict)

    @property
    def qubit_deposit(self):
        return self.chip_energy.get("qubit", 0.0)

    @property
    def qubit_hit(self):
        return self.qubit_deposit > 0

    def detector_roles_hit(self):
        return [r for r in DETECTOR_ROLES if self.chip_energy.get(r, 0.0) > 0]


def generate_timeline(source, duration_s, stack, rng):
    """Merged, strictly time-ordered muon and gamma events for a run of ``duration_s``."""
    if duration_s < 0:
        raise ConfigError("duration must be non-negative")
    dur_ns = int(round(duration_s * 1e9))
    _, _, _, area = generating_plane(stack, source.margin_factor)

    n_mu = rng.poisson(source.muon_flux * area * duration_s) if duration_s > 0 else 0
    t_mu = rng.integers(0, max(dur_ns, 1), n_mu)
    pts, zen, azi, weight = sample_muon_trajectories(stack, rng, n_mu, source.margin_factor)
    dedx = np.full(n_mu, source.muon_dedx_kev_per_mm)

    gammas = []
    for role in DETECTOR_ROLES:
        chip = stack.chip(role)
        n = rng.poisson(source.gamma_rate_per_chip * duration_s) if duration_s > 0 else 0
        t = rng.integers(0, max(dur_ns, 1), n)
        e = source.gamma_median_kev * np.exp(source.gamma_sigma_log * rng.standard_normal(n))
        lx, ly = chip.lateral_size
        xy = np.column_stack([
            chip.center[0] + (rng.random(n) - 0.5) * lx,
            chip.center[1] + (rng.random(n) - 0.5) * ly,
        ])
        gammas.append((role, t, e, xy))

    items = [(int(t_mu[i]), 0, i) for i in range(n_mu)]
    for k, (_, t, _, _) in enumerate(gammas):
        items += [(int(t[i]), k + 1, i) for i in range(len(t))]
    items.sort()

    events = []
    last = -1
    for eid, (t, src, i) in enumerate(items):
        t = max(t, last + 1)  # keep arrival times strictly increasing
        last = t
        if src == 0:
            traj = Trajectory(tuple(pts[i]), float(zen[i]), float(azi[i]), weight)
            events.append(RadiationEvent(eid, MUON, t, float(dedx[i]), trajectory=traj))
        else:
            role, _, e, xy = gammas[src - 1]
            events.append(RadiationEvent(eid, GAMMA, t, float(e[i]), chip=role, impact_xy=tuple(xy[i])))
    return events


def spread_phonons(deposit_kev, impact_xy, chip, source):
    """Share ``deposit_kev`` over the chip's pixels with a 1/(d^2 + d0^2) kernel."""
    centers = chip.pixel_centers()
    if deposit_kev <= 0:
        return np.zeros(len(centers))
    d2 = np.sum((centers - np.asarray(impact_xy)[None, :2]) ** 2, axis=1)
    w = 1.0 / (d2 + source.phonon_d0_mm ** 2)
    return deposit_kev * source.collection_efficiency * w / w.sum()


def deposit_energy(event, hits, rng, source, stack):
    """Per-chip deposits and per-pixel phonon energies for one event.

    ``hits`` is the :class:`~mkidqubit.geometry.ChipHits` of a muon (ignored for gammas).
    """
    chip_energy = {r: 0.0 for r in ROLES}
    impact = {}
    if event.kind == GAMMA:
        chip_energy[event.chip] = event.energy_deposit_scale
        impact[event.chip] = event.impact_xy
    else:
        spread = np.exp(source.muon_sigma_log * rng.standard_normal(3))
        for j, role in enumerate(ROLES):
            h = hits[role]
            if not h.hit:
                continue
            e = h.path_length * event.energy_deposit_scale * spread[j]
            if role != "qubit":
                e = max(e, source.min_muon_deposit_kev)
            chip_energy[role] = e
            impact[role] = h.midpoint[:2]
    rec = DepositRecord(event.event_id, chip_energy, impact_xy=impact)
    for role in DETECTOR_ROLES:
        chip = stack.chip(role)
        if chip_energy[role] > 0:
            rec.pixel_energy[role] = spread_phonons(chip_energy[role], impact[role], chip, source)
        else:
            rec.pixel_energy[role] = np.zeros(chip.n_pixels)
    return rec


def muon_chords(events, stack):
    """Chord lengths (n, 3) and midpoints for the muons in ``events`` (vectorised intersect)."""
    mu = [e for e in events if e.kind == MUON]
    if not mu:
        return mu, np.zeros((0, 3)), np.zeros((0, 3, 3))
    pts = np.array([e.trajectory.entry_point for e in mu])
    dirs = direction_vectors(np.array([e.trajectory.zenith for e in mu]),
                             np.array([e.trajectory.azimuth for e in mu]))
    lengths, mids = chord_lengths(pts, dirs, stack)
    return mu, lengths, mids


def expected_rate(source, stack, kind):
    """Expected arrival rate (1/s) of ``kind`` for the whole run."""
    if kind == MUON:
        return source.muon_flux * generating_plane(stack, source.margin_factor)[3]
    return 2 * source.gamma_rate_per_chip


def timeline_to_rows(events):
    """Line-record form of a timeline (kind, time_ns, zenith, azimuth, energy scale)."""
    rows = []
    for e in events:
        row = {"event_id": e.event_id, "kind": e.kind, "time_ns": e.arrival_time_ns,
               "energy": e.energy_deposit_scale}
        if e.kind == MUON:
            t = e.trajectory
            row.update(zenith=t.zenith, azimuth=t.azimuth, entry=list(t.entry_point))
        else:
            row.update(chip=e.chip, impact=list(e.impact_xy))
        rows.append(row)
    return rows

