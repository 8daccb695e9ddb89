"""Phenomenological MKID response: pixel energy -> effective temperature -> IQ arc.

The arc is a spiral whose radius shrinks and whose phase advances as the
normalised response ``s`` goes from 0 (base temperature) to 1 (300 mK).
``s`` grows as ``((T - base) / (T_max - base)) ** response_exponent`` so the
response is weak below ~100 mK.
"""
from dataclasses import dataclass, replace
import math

import numpy as np
from scipy.integrate import quad

from .errors import ConfigError, DomainError
from .rng import keyed_rng


@dataclass(frozen=True)
class IQPoint:
    i: float
    q: float

    def __array__(self, dtype=None, copy=None):
        return np.array([self.i, self.q], dtype=dtype)

    def __post_init__(self):
        if not (math.isfinite(self.i) and math.isfinite(self.q)):
            raise ValueError("IQ values must be finite")


@dataclass
class IQTrace:
    channel: int
    period_ns: int
    start_ns: int
    samples: np.ndarray  # (n, 2) columns I, Q

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[1] != 2 or len(self.samples) == 0:
            raise ValueError("trace samples must be a non-empty (n, 2) array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("trace contains non-finite samples")

    @property
    def times_ns(self):
        return self.start_ns + self.period_ns * np.arange(len(self.samples))


@dataclass(frozen=True)
class MKIDConfig:
    channel: int = 0
    magnitude: float = 1.0
    phase0: float = 0.0
    sweep_phase: float = math.pi
    endpoint_fraction: float = 0.03
    kink_amplitude: float = 0.0
    kink_cycles: float = 3.0
    noise_sigma: float = 0.005
    base_temperature: float = 10.0  # mK
    max_temperature: float = 300.0  # mK
    response_exponent: float = 2.0
    e_max_kev: float = 250.0
    energy_exponent: float = 0.5
    tau_us: float = 50.0

    def __post_init__(self):
        if self.noise_sigma <= 0:
            raise ConfigError("noise_sigma must be positive")
        if not 0 <= self.endpoint_fraction < 0.05:
            raise ConfigError("arc endpoint must sit within 5% of the nominal magnitude")
        if self.max_temperature <= self.base_temperature:
            raise ConfigError("max_temperature must exceed base_temperature")
        if self.magnitude <= 0 or self.e_max_kev <= 0 or self.tau_us <= 0:
            raise ConfigError("magnitude, e_max_kev and tau_us must be positive")
        if abs(self.kink_amplitude) >= 1:
            raise ConfigError("|kink_amplitude| must be < 1 to keep the arc phase monotone")

    @property
    def nominal(self):
        return IQPoint(self.magnitude * math.cos(self.phase0), self.magnitude * math.sin(self.phase0))


def make_channels(n_channels, seed, template=None):
    """Per-channel configs with seeded shape variation around ``template``."""
    template = template or MKIDConfig()
    out = []
    for ch in range(n_channels):
        r = keyed_rng(seed, "mkid-shape", ch)
        out.append(replace(
            template,
            channel=ch,
            magnitude=template.magnitude * r.uniform(0.9, 1.1),
            phase0=r.uniform(0, 2 * math.pi),
            sweep_phase=template.sweep_phase * r.uniform(0.85, 1.15),
        ))
    return out


def energy_to_temperature(pixel_energy, mkid):
    """Monotone map from pixel energy (keV) to peak effective temperature (mK), saturating at T_max."""
    e = np.asarray(pixel_energy, dtype=float)
    if np.any(e < 0):
        raise DomainError("pixel energy must be non-negative")
    frac = np.minimum(e / mkid.e_max_kev, 1.0) ** mkid.energy_exponent
    t = mkid.base_temperature + (mkid.max_temperature - mkid.base_temperature) * frac
    return float(t) if t.ndim == 0 else t


def response_fraction(temps, mkid):
    u = (np.asarray(temps, dtype=float) - mkid.base_temperature) / (mkid.max_temperature - mkid.base_temperature)
    return np.clip(u, 0.0, 1.0) ** mkid.response_exponent


def arc_points(mkid, temps):
    """Vectorised arc: (..., 2) IQ for temperatures at or above base."""
    temps = np.asarray(temps, dtype=float)
    if np.any(temps < mkid.base_temperature - 1e-9):
        raise DomainError(f"temperature below base {mkid.base_temperature} mK")
    s = response_fraction(temps, mkid)
    r = mkid.magnitude * (1.0 - (1.0 - mkid.endpoint_fraction) * s)
    k = mkid.kink_cycles
    warp = s + mkid.kink_amplitude * np.sin(2 * math.pi * k * s) / (2 * math.pi * k)
    phi = mkid.phase0 - mkid.sweep_phase * warp
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)


def arc_length(mkid, t_lo=None, t_hi=None):
    """Length of the IQ arc between two temperatures, integrated in the response fraction."""
    t_lo = mkid.base_temperature if t_lo is None else t_lo
    t_hi = mkid.max_temperature if t_hi is None else t_hi
    s0, s1 = response_fraction([t_lo, t_hi], mkid)
    m, eps, k = mkid.magnitude, mkid.endpoint_fraction, mkid.kink_cycles

    def speed(s):
        r = m * (1.0 - (1.0 - eps) * s)
        dphi = mkid.sweep_phase * (1.0 + mkid.kink_amplitude * math.cos(2 * math.pi * k * s))
        return math.hypot(m * (1.0 - eps), r * dphi)

    return quad(speed, s0, s1, limit=200)[0]


def temperature_to_iq(mkid, temperature):
    i, q = arc_points(mkid, temperature)
    return IQPoint(float(i), float(q))


@dataclass(frozen=True)
class EffectiveTemperatureTrajectory:
    start_ns: int
    t0_mk: float
    tau_us: float
    base_mk: float = 10.0

    def __post_init__(self):
        if self.t0_mk < self.base_mk:
            raise DomainError("initial temperature below base")
        if self.tau_us <= 0:
            raise DomainError("decay constant must be positive")


def relax(teff, t_ns):
    """Temperature at ``t_ns`` after an impact: exponential return to base."""
    t = np.asarray(t_ns, dtype=float)
    if np.any(t < teff.start_ns):
        raise DomainError("time precedes the trajectory start")
    out = teff.base_mk + (teff.t0_mk - teff.base_mk) * np.exp(-(t - teff.start_ns) / (teff.tau_us * 1e3))
    return float(out) if out.ndim == 0 else out


def excess_temperature(teff, t_ns):
    """``T(t) - base``, zero before the impact. Vectorised helper for synthesis."""
    t = np.asarray(t_ns, dtype=float)
    dt = t - teff.start_ns
    return np.where(dt >= 0, (teff.t0_mk - teff.base_mk) * np.exp(-np.maximum(dt, 0) / (teff.tau_us * 1e3)), 0.0)


@dataclass(frozen=True)
class ReadoutSchedule:
    start_ns: int
    n_cycles: int
    period_ns: int = 8000
    pulse_ns: int = 5000

    def __post_init__(self):
        if self.period_ns < self.pulse_ns:
            raise ConfigError("readout period shorter than the pulse")
        if self.n_cycles < 1:
            raise ConfigError("schedule needs at least one cycle")

    @property
    def times_ns(self):
        return self.start_ns + self.period_ns * np.arange(self.n_cycles, dtype=np.int64)


def ringdown_trace(mkid, teff, schedule, rng, noise=True):
    """One averaged IQ point per readout cycle along ``teff`` plus Gaussian noise."""
    t = schedule.times_ns
    temps = mkid.base_temperature if teff is None else mkid.base_temperature + excess_temperature(teff, t)
    iq = arc_points(mkid, np.broadcast_to(temps, t.shape))
    if noise:
        iq = iq + mkid.noise_sigma * rng.standard_normal(iq.shape)
    return IQTrace(mkid.channel, schedule.period_ns, schedule.start_ns, iq)
