"""Temperature calibration of MKID IQ responses.

A warm-up sweep gives averaged IQ points at set temperatures; a natural cubic
spline through them (I and Q against temperature) is the calibration curve.
Event data are assigned the temperature of the nearest curve point. Slow
phase drift is removed by one global rotation about the IQ origin.
"""
from dataclasses import dataclass, field
import math

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .errors import CalibrationError, DataError, EstimationError
from .mkid import IQPoint, arc_points

BAND_LOW_MK = 100.0
BAND_HIGH_MK = 300.0
_GOLDEN = (math.sqrt(5) - 1) / 2


@dataclass
class CalibrationCurve:
    channel: int
    temperatures: np.ndarray  # knots, strictly increasing (mK)
    iq: np.ndarray  # (n, 2)
    median: np.ndarray  # (2,) reference IQ under standard operating conditions
    n_dense: int = 4096
    tol_mk: float = 0.1
    _spline: CubicSpline = field(init=False, repr=False)

    def __post_init__(self):
        self.temperatures = np.asarray(self.temperatures, dtype=float)
        self.iq = np.asarray(self.iq, dtype=float)
        self.median = np.asarray(self.median, dtype=float)
        self._spline = CubicSpline(self.temperatures, self.iq, axis=0, bc_type="natural")
        self._dense_t = np.linspace(self.temperatures[0], self.temperatures[-1], self.n_dense)
        self._dense = self._spline(self._dense_t)
        self._tree = cKDTree(self._dense)

    @property
    def t_min(self):
        return float(self.temperatures[0])

    @property
    def t_max(self):
        return float(self.temperatures[-1])

    def __call__(self, temps):
        return self._spline(temps)

    def point(self, temp):
        i, q = self._spline(temp)
        return IQPoint(float(i), float(q))


def build_calibration(channel, temperatures, iq, median=None, n_dense=4096):
    """Spline calibration from sweep points ``(T, averaged IQ)``."""
    t = np.asarray(temperatures, dtype=float)
    iq = np.asarray(iq, dtype=float)
    if t.ndim != 1 or iq.shape != (len(t), 2):
        raise CalibrationError("sweep must be n temperatures with n (I, Q) points")
    if len(t) < 4:
        raise CalibrationError(f"channel {channel}: need at least 4 sweep points, got {len(t)}")
    dt = np.diff(t)
    if np.any(dt == 0):
        raise CalibrationError(f"channel {channel}: duplicate sweep temperatures")
    if np.any(dt < 0):
        raise CalibrationError(f"channel {channel}: sweep temperatures must be increasing")
    if t[0] > BAND_LOW_MK or t[-1] < BAND_HIGH_MK:
        raise CalibrationError(f"channel {channel}: sweep must span [{BAND_LOW_MK}, {BAND_HIGH_MK}] mK")
    if median is None:
        median = iq[0]
    return CalibrationCurve(channel, t, iq, np.asarray(median, dtype=float), n_dense=n_dense)


def calibration_sweep(mkid, temperatures, rng, n_average=1000):
    """Simulated fridge warm-up: mean of ``n_average`` noisy readouts per set temperature."""
    temps = np.asarray(temperatures, dtype=float)
    clean = arc_points(mkid, temps)
    noise = rng.standard_normal(clean.shape) * mkid.noise_sigma / math.sqrt(n_average)
    base = arc_points(mkid, mkid.base_temperature)
    standby = base + mkid.noise_sigma * rng.standard_normal((n_average, 2))
    return temps, clean + noise, np.median(standby, axis=0)


def default_sweep_temperatures(base=10.0, top=300.0, step=10.0):
    return np.arange(base, top + step / 2, step)


@dataclass(frozen=True)
class Assignment:
    temperature: float
    distance: float
    low_confidence: bool
    saturated: bool


def assign_temperatures(curve, points):
    """Vectorised nearest-point temperature assignment.

    Dense sampling of the spline picks the nearest sample, then golden-section
    search on the two neighbouring intervals refines the temperature.
    Returns ``(temperatures, distances)``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if len(pts) == 0:
        return np.empty(0), np.empty(0)
    _, idx = curve._tree.query(pts)
    tg = curve._dense_t
    lo = tg[np.maximum(idx - 1, 0)]
    hi = tg[np.minimum(idx + 1, len(tg) - 1)]

    def dist2(t):
        d = curve._spline(t) - pts
        return np.einsum("ij,ij->i", d, d)

    a, b = lo.copy(), hi.copy()
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = dist2(c), dist2(d)
    width = float(np.max(b - a))
    n_iter = max(1, math.ceil(math.log(curve.tol_mk / 20 / width) / math.log(_GOLDEN))) if width > 0 else 0
    for _ in range(n_iter):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        d_new = np.where(left, c, a + _GOLDEN * (b - a))
        c_new = np.where(left, b - _GOLDEN * (b - a), d)
        fd = np.where(left, fc, np.nan)
        fc = np.where(left, np.nan, fd)
        c, d = c_new, d_new
        # re-evaluate only the fresh probe point of each bracket
        need_c = np.isnan(fc)
        need_d = np.isnan(fd)
        if need_c.any():
            fc[need_c] = dist2(c)[need_c]
        if need_d.any():
            fd[need_d] = dist2(d)[need_d]
    t = 0.5 * (a + b)
    # the bracket edges are dense samples; keep whichever candidate is closest
    cand = np.stack([t, lo, hi, tg[idx]])
    dd = np.stack([dist2(x) for x in cand])
    best = np.argmin(dd, axis=0)
    cols = np.arange(len(pts))
    return cand[best, cols], np.sqrt(dd[best, cols])


def assign_temperature(curve, point):
    """Temperature of the calibration-curve point nearest to ``point``."""
    t, d = assign_temperatures(curve, np.asarray(point, dtype=float)[None, :])
    t, d = float(t[0]), float(d[0])
    return Assignment(t, d, t < BAND_LOW_MK, t >= curve.t_max - curve.tol_mk)


@dataclass(frozen=True)
class RotationCorrection:
    theta: float

    @property
    def matrix(self):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def inverse(self):
        return RotationCorrection(-self.theta)


def apply_rotation(correction, point):
    """``C' = R C`` for an :class:`IQPoint` or an array of (..., 2) points."""
    r = correction.matrix
    if isinstance(point, IQPoint):
        i, q = r @ np.array([point.i, point.q])
        return IQPoint(float(i), float(q))
    p = np.asarray(point, dtype=float)
    return p @ r.T


def estimate_rotation(data_medians, calibration_medians):
    """Global angle taking drifted medians onto the calibration medians.

    ``theta`` is the circular mean over channels of
    ``angle(calibration) - angle(data)``.
    """
    dm = np.atleast_2d(np.asarray(data_medians, dtype=float))
    cm = np.atleast_2d(np.asarray(calibration_medians, dtype=float))
    ok = (np.hypot(*dm.T) > 0) & (np.hypot(*cm.T) > 0)
    if not ok.any():
        raise EstimationError("every median sits at the IQ origin; rotation is undefined")
    diff = np.arctan2(cm[ok, 1], cm[ok, 0]) - np.arctan2(dm[ok, 1], dm[ok, 0])
    theta = math.atan2(np.sin(diff).sum(), np.cos(diff).sum())
    return RotationCorrection(theta)


@dataclass
class NormalizedEnergy:
    substrate: dict  # array -> value in [0, 1]
    per_channel: dict  # channel -> normalised peak temperature
    peak_temperature: dict  # channel -> mK


def normalized_from_peaks(peak_t, band=(BAND_LOW_MK, BAND_HIGH_MK)):
    lo, hi = band
    return np.clip((np.asarray(peak_t, dtype=float) - lo) / (hi - lo), 0.0, 1.0)


def require_curves(curves, channels):
    missing = sorted(set(channels) - set(curves))
    if missing:
        raise CalibrationError(f"missing calibration for channels {missing}")


def peak_temperatures(traces, curves, rotation=None, k=3):
    """Peak assigned temperature per capture and channel.

    ``traces`` has shape (n_captures, n_channels, n_samples, 2). Because the
    arc radius falls monotonically with temperature, only the ``k`` samples of
    smallest magnitude are assigned and the largest of their temperatures kept.
    """
    tr = np.asarray(traces, dtype=float)
    if tr.ndim == 3:
        tr = tr[None]
    n, c, s, _ = tr.shape
    require_curves(curves, range(c))
    if rotation is not None:
        tr = apply_rotation(rotation, tr)
    k = min(k, s)
    mag = np.hypot(tr[..., 0], tr[..., 1])
    pick = np.argpartition(mag, k - 1, axis=2)[:, :, :k]
    sel = np.take_along_axis(tr, pick[..., None], axis=2)  # (n, c, k, 2)
    out = np.empty((n, c))
    for ch in range(c):
        t, _ = assign_temperatures(curves[ch], sel[:, ch].reshape(-1, 2))
        out[:, ch] = t.reshape(n, k).max(axis=1)
    return out


def normalize_energy(capture, curves, layout, rotation=None, band=(BAND_LOW_MK, BAND_HIGH_MK)):
    """Per-substrate normalised energy: mean over the substrate's MKIDs of the
    peak temperature mapped onto [0, 1] across the calibrated band."""
    traces = capture.traces if hasattr(capture, "traces") else capture
    peaks = peak_temperatures(traces, curves, rotation)[0]
    norm = normalized_from_peaks(peaks, band)
    sub = {a: float(np.mean(norm[layout.channels(a)])) for a in ("top", "bottom")}
    return NormalizedEnergy(sub, {c: float(v) for c, v in enumerate(norm)},
                            {c: float(v) for c, v in enumerate(peaks)})


def medians_from_captures(captures, prebuffer_cycles):
    """Per-channel median IQ over the pre-trigger samples of every capture."""
    if not captures:
        raise DataError("no captures to take medians from")
    pre = np.concatenate([c.traces[:, :prebuffer_cycles] for c in captures], axis=1)
    return np.median(pre, axis=1)
