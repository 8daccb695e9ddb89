"""Single-shot T1 / Ramsey / ground-state model with quasiparticle-burst degradation.

A burst of quasiparticle density ``n(t) = n0 exp(-(t - t0) / tau)`` adds
``coupling * n`` to the relaxation rate (and to the dephasing rate for the
Ramsey shot) and shifts the qubit frequency by ``qp_detuning_mhz * n``.
"""
from dataclasses import dataclass, replace
import math

import numpy as np

from .errors import ConfigError

T1 = "t1"
T2 = "t2"
GROUND = "ground"
KINDS = (T1, T2, GROUND)


@dataclass(frozen=True)
class QubitModel:
    t1_base_us: float = 25.0
    t2_base_us: float = 10.0
    ej_over_ec: float = 36.0
    t1_wait_fraction: float = 0.33
    ramsey_wait_us: float = 2.0
    ramsey_detuning_mhz: float = 0.125  # quarter period over the 2 us wait
    ramsey_phase: float = 0.0
    readout_error: float = 0.0
    ground_state_error: float = 0.005
    qp_coupling: float = 1.0e-3  # 1/us per unit density, relaxation
    t2_qp_coupling: float = 1.0e-3  # 1/us per unit density, dephasing
    qp_detuning_mhz: float = -1.4e-3  # MHz per unit density
    n_per_kev: float = 0.1
    tau_qp_t1_us: float = 34.6
    tau_qp_t2_us: float = 22.8
    # slow drift (off by default)
    t2_drift_sigma_mhz: float = 0.0
    t2_drift_tau_s: float = 3600.0
    t1_drift_sigma: float = 0.0
    t1_drift_tau_s: float = 7200.0

    def __post_init__(self):
        if self.t1_base_us <= 0 or self.t2_base_us <= 0:
            raise ConfigError("coherence times must be positive")
        if self.t2_base_us > 2 * self.t1_base_us:
            raise ConfigError("T2 cannot exceed 2 T1")
        if not 0.0 <= self.ground_state_error <= 1.0:
            raise ConfigError("ground_state_error must be in [0, 1]")
        if not 0.0 <= self.readout_error <= 0.5:
            raise ConfigError("readout_error must be in [0, 0.5]")
        if self.qp_coupling < 0 or self.t2_qp_coupling < 0 or self.n_per_kev < 0:
            raise ConfigError("couplings must be non-negative")

    @property
    def t1_wait_us(self):
        return self.t1_wait_fraction * self.t1_base_us

    def tau_qp_us(self, kind):
        return self.tau_qp_t2_us if kind == T2 else self.tau_qp_t1_us


@dataclass(frozen=True)
class QuasiparticleBurst:
    start_ns: int
    n0: float
    tau_us: float

    def __post_init__(self):
        if self.n0 < 0 or self.tau_us <= 0:
            raise ValueError("burst needs n0 >= 0 and tau > 0")

    def density(self, t_ns):
        dt = np.asarray(t_ns, dtype=float) - self.start_ns
        return np.where(dt >= 0, self.n0 * np.exp(-np.maximum(dt, 0) / (self.tau_us * 1e3)), 0.0)


@dataclass(frozen=True)
class ShotRecord:
    kind: str
    time_us: float  # relative to the trigger
    outcome: int
    event_id: int = None

    def __post_init__(self):
        if self.outcome not in (0, 1):
            raise ValueError("outcome must be 0 or 1")


def _readout(model, p):
    e = model.readout_error
    return e + (1.0 - 2.0 * e) * p


def p1_t1(model, n_qp, rate_scale=1.0):
    """Excited population after the T1 wait."""
    n = np.asarray(n_qp, dtype=float)
    rate = rate_scale / model.t1_base_us + model.qp_coupling * n
    p = _readout(model, np.exp(-model.t1_wait_us * rate))
    return float(p) if p.ndim == 0 else p


def p1_t2(model, n_qp, extra_detuning=0.0):
    """Excited population of the detuned Ramsey shot."""
    n = np.asarray(n_qp, dtype=float)
    tr = model.ramsey_wait_us
    rate = 1.0 / model.t2_base_us + model.t2_qp_coupling * n
    det = model.ramsey_detuning_mhz + model.qp_detuning_mhz * n + extra_detuning
    p = 0.5 * (1.0 + np.exp(-tr * rate) * np.cos(2 * math.pi * det * tr + model.ramsey_phase))
    p = _readout(model, p)
    return float(p) if p.ndim == 0 else p


def p1_ground(model, n_qp):
    n = np.asarray(n_qp, dtype=float)
    p = np.full(n.shape, model.ground_state_error)
    return float(p) if p.ndim == 0 else p


def p1(model, kind, n_qp, rate_scale=1.0, extra_detuning=0.0):
    if kind == T1:
        return p1_t1(model, n_qp, rate_scale)
    if kind == T2:
        return p1_t2(model, n_qp, extra_detuning)
    if kind == GROUND:
        return p1_ground(model, n_qp)
    raise ConfigError(f"unknown measurement kind {kind!r}")


def ground_shot(model, n_qp, rng):
    return int(rng.random() < model.ground_state_error)


def burst_from_deposit(deposit_kev, model, kind=T1, start_ns=0):
    if deposit_kev < 0:
        raise ValueError("deposit must be non-negative")
    return QuasiparticleBurst(int(start_ns), model.n_per_kev * deposit_kev, model.tau_qp_us(kind))


@dataclass(frozen=True)
class ShotSchedule:
    kind: str
    n_cycles: int = 50
    period_us: float = 16.0
    latency_us: tuple = (10.0, 15.0)

    def __post_init__(self):
        lo, hi = self.latency_us
        if not 0 <= lo <= hi:
            raise ConfigError("latency range must be ordered and non-negative")
        if self.n_cycles < 1 or self.period_us <= 0:
            raise ConfigError("shot schedule needs cycles and a positive period")

    @property
    def duration_us(self):
        return self.n_cycles * self.period_us


DEFAULT_PERIOD_US = {T1: 16.0, T2: 11.2, GROUND: 10.0}


# OU amplitudes giving roughly 35% (Ramsey) and 10% (T1) peak-to-peak swings of
# 18-minute bin means over a day-long acquisition.
LONG_ACQUISITION_DRIFT = {"t2_drift_sigma_mhz": 0.0085, "t1_drift_sigma": 0.1}


def with_drift(model, profile=None):
    """Copy of ``model`` with the slow drift processes switched on."""
    return replace(model, **(LONG_ACQUISITION_DRIFT if profile is None else profile))


def default_schedule(kind):
    return ShotSchedule(kind, 50, DEFAULT_PERIOD_US[kind])


def shot_times_us(schedule, rng, n_sequences=None):
    """Trigger-relative readout times: cycle start plus a per-cycle latency draw."""
    lo, hi = schedule.latency_us
    shape = (schedule.n_cycles,) if n_sequences is None else (n_sequences, schedule.n_cycles)
    lat = lo + (hi - lo) * rng.random(shape)
    return schedule.period_us * np.arange(schedule.n_cycles) + lat


class DriftProcess:
    """Ornstein-Uhlenbeck detuning (Ramsey) and relaxation-rate modulation (T1) versus run time."""

    def __init__(self, model, duration_s, rng, step_s=10.0):
        n = int(math.ceil(max(duration_s, step_s) / step_s)) + 2
        self.grid_s = step_s * np.arange(n)
        self.detuning = _ou_path(rng, n, step_s, model.t2_drift_tau_s, model.t2_drift_sigma_mhz)
        self.t1_mod = _ou_path(rng, n, step_s, model.t1_drift_tau_s, model.t1_drift_sigma)

    def detuning_mhz(self, t_s):
        return np.interp(t_s, self.grid_s, self.detuning)

    def t1_rate_scale(self, t_s):
        return 1.0 + np.interp(t_s, self.grid_s, self.t1_mod)


def _ou_path(rng, n, dt, tau, sigma):
    z = rng.standard_normal(n)
    if sigma == 0:
        return np.zeros(n)
    a = math.exp(-dt / tau)
    b = sigma * math.sqrt(1 - a * a)
    x = np.empty(n)
    x[0] = sigma * z[0]
    for k in range(1, n):
        x[k] = a * x[k - 1] + b * z[k]
    return x


def sequence_probabilities(model, kind, bursts, times_ns, drift=None):
    """P(1) at absolute readout times ``times_ns`` given a list of bursts."""
    times_ns = np.asarray(times_ns, dtype=float)
    n = np.zeros(times_ns.shape)
    for b in bursts or ():
        n = n + b.density(times_ns)
    scale, extra = 1.0, 0.0
    if drift is not None:
        ts = times_ns * 1e-9
        scale = drift.t1_rate_scale(ts)
        extra = drift.detuning_mhz(ts)
    return p1(model, kind, n, rate_scale=scale, extra_detuning=extra)


def run_shot_sequence(model, kind, bursts, schedule, rng, trigger_ns=0, event_id=None, drift=None):
    """One Bernoulli shot per cycle; conditional reset between cycles is ideal."""
    t_rel = shot_times_us(schedule, rng)
    u = rng.random(schedule.n_cycles)
    p = sequence_probabilities(model, kind, bursts, trigger_ns + t_rel * 1e3, drift)
    bits = (u < p).astype(int)
    return [ShotRecord(kind, float(t), int(b), event_id) for t, b in zip(t_rel, bits)]


def simulate_sequences(model, kind, n0, delay_us, schedule, rng):
    """Vectorised shot outcomes for many triggered sequences.

    ``n0`` is the burst density per sequence (0 for none) and ``delay_us`` the
    time from the burst to the trigger. Returns ``(times_us, outcomes)`` of
    shape (m, n_cycles).
    """
    n0 = np.asarray(n0, dtype=float)
    delay_us = np.broadcast_to(np.asarray(delay_us, dtype=float), n0.shape)
    t = shot_times_us(schedule, rng, len(n0))
    tau = model.tau_qp_us(kind)
    n = n0[:, None] * np.exp(-(t + delay_us[:, None]) / tau)
    p = p1(model, kind, n)
    bits = (rng.random(t.shape) < p).astype(np.int8)
    return t, bits


def mean_population_curve(model, kind, n0, cycle_us=8.0, n_latency=21, n_delay=17):
    """Noise-free mean P(1) per readout cycle of triggered sequences.

    Averages over the burst densities ``n0``, a uniform per-cycle latency and
    a uniform burst-to-trigger delay within one readout cycle. Returns
    ``(t_us, p)``, the mean shot time and mean population of each cycle.
    """
    sched = default_schedule(kind)
    lo, hi = sched.latency_us
    lat = np.linspace(lo, hi, n_latency)
    delay = np.linspace(0.0, cycle_us, n_delay)
    n0 = np.asarray(n0, dtype=float)
    tau = model.tau_qp_us(kind)
    t = sched.period_us * np.arange(sched.n_cycles)[:, None] + lat[None, :]
    p = np.empty(sched.n_cycles)
    for i in range(sched.n_cycles):
        tt = t[i][:, None] + delay[None, :]
        p[i] = np.mean(p1(model, kind, n0[:, None, None] * np.exp(-tt[None] / tau)))
    return t.mean(axis=1), p
