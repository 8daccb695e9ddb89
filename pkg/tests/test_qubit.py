import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from mkidqubit.analysis import PopulationCurve, fit_recovery
from mkidqubit.errors import ConfigError
from mkidqubit.qubit import (
    GROUND,
    T1,
    T2,
    DriftProcess,
    QuasiparticleBurst,
    QubitModel,
    ShotRecord,
    ShotSchedule,
    burst_from_deposit,
    default_schedule,
    ground_shot,
    mean_population_curve,
    p1,
    p1_ground,
    p1_t1,
    p1_t2,
    run_shot_sequence,
    simulate_sequences,
    with_drift,
)
from mkidqubit.simulate import dual_qubit_deposits

M = QubitModel()


def test_t1_population_at_rest():
    assert p1_t1(M, 0.0) == pytest.approx(math.exp(-0.33), abs=1e-12)
    assert p1_t1(M, 0.0) == pytest.approx(0.7189, abs=1e-4)


def test_t1_population_with_halved_coherence():
    n = (1 / M.t1_base_us) / M.qp_coupling
    assert p1_t1(M, n) == pytest.approx(math.exp(-0.66), abs=1e-12)
    assert p1_t1(M, n) == pytest.approx(0.5169, abs=1e-4)


def test_t1_population_limit_is_readout_floor():
    assert p1_t1(M, 1e12) == pytest.approx(0.0, abs=1e-12)
    m = replace(M, readout_error=0.02)
    assert p1_t1(m, 1e12) == pytest.approx(0.02, abs=1e-12)


def test_t2_operating_point_is_equator():
    for t2 in (2.0, 10.0, 19.0):
        m = replace(M, t2_base_us=t2, qp_detuning_mhz=0.0)
        assert p1_t2(m, 0.0) == pytest.approx(0.5, abs=1e-12)
        assert p1_t2(m, 50.0) == pytest.approx(0.5, abs=1e-12)


def test_t2_zero_phase():
    m = replace(M, ramsey_detuning_mhz=0.0, ramsey_phase=0.0)
    assert p1_t2(m, 0.0) == pytest.approx(0.5 * (1 + math.exp(-0.2)), abs=1e-12)
    assert p1_t2(m, 0.0) == pytest.approx(0.9094, abs=1e-4)


def test_t2_detuning_moves_population_monotonically():
    m = replace(M, t2_qp_coupling=0.0)
    p = p1_t2(m, np.linspace(0, 40, 200))
    assert p[0] == pytest.approx(0.5)
    assert np.all(np.diff(p) < 0) or np.all(np.diff(p) > 0)


def test_ground_population():
    rng = np.random.default_rng(0)
    shots = np.array([ground_shot(M, 0.0, rng) for _ in range(100_000)])
    e = M.ground_state_error
    assert abs(shots.mean() - e) < 3 * math.sqrt(e * (1 - e) / 1e5)
    zero = replace(M, ground_state_error=0.0)
    assert not any(ground_shot(zero, 0.0, rng) for _ in range(10_000))


def test_ground_independent_of_burst():
    rng = np.random.default_rng(1)
    sched = default_schedule(GROUND)
    n = 200
    _, quiet = simulate_sequences(M, GROUND, np.zeros(n), np.zeros(n), sched, rng)
    _, hit = simulate_sequences(M, GROUND, np.full(n, 80.0), np.zeros(n), sched, rng)
    a, b = quiet.mean(), hit.mean()
    s = math.sqrt(2 * a * (1 - a) / quiet.size + 1e-12)
    assert abs(a - b) < 3 * s
    assert np.all(p1_ground(M, np.linspace(0, 1e4, 50)) == M.ground_state_error)


def test_zero_deposit_gives_empty_burst():
    b = burst_from_deposit(0.0, M)
    assert b.n0 == 0.0
    assert np.all(b.density(np.arange(0, 10**6, 1000)) == 0)
    assert burst_from_deposit(100.0, M, T2).tau_us == M.tau_qp_t2_us
    with pytest.raises(ValueError):
        burst_from_deposit(-1.0, M)


def test_burst_density_decays():
    b = QuasiparticleBurst(1000, 5.0, 40.0)
    assert b.density(999) == 0.0
    assert b.density(1000) == 5.0
    assert b.density(41_000) == pytest.approx(5.0 / math.e)


def test_schedule_durations():
    assert default_schedule(T1).duration_us == pytest.approx(800.0)
    assert default_schedule(T2).duration_us == pytest.approx(560.0)
    assert default_schedule(T1).n_cycles == 50


def test_shot_latency_within_window():
    rng = np.random.default_rng(2)
    sched = default_schedule(T1)
    shots = run_shot_sequence(M, T1, [], sched, rng)
    t = np.array([s.time_us for s in shots])
    lat = t - sched.period_us * np.arange(50)
    assert len(shots) == 50
    assert np.all((lat >= 10) & (lat <= 15))
    assert all(s.outcome in (0, 1) for s in shots)


def test_no_burst_curve_is_flat():
    rng = np.random.default_rng(3)
    sched = default_schedule(T1)
    bits = np.array([[s.outcome for s in run_shot_sequence(M, T1, [], sched, rng)] for _ in range(1000)])
    p = math.exp(-0.33)
    z = (bits.mean(axis=0) - p) / math.sqrt(p * (1 - p) / 1000)
    assert np.all(np.abs(z) < 3.5)
    assert abs(bits.mean() - p) < 3 * math.sqrt(p * (1 - p) / bits.size)


def test_burst_lowers_first_cycle(stack, source):
    rng = np.random.default_rng(4)
    n0 = M.n_per_kev * dual_qubit_deposits(stack, source, rng, 1000)
    sched = default_schedule(T1)
    _, hit = simulate_sequences(M, T1, n0, rng.uniform(0, 8, 1000), sched, rng)
    _, quiet = simulate_sequences(M, T1, np.zeros(1000), np.zeros(1000), sched, rng)
    a, b = hit[:, 0].mean(), quiet[:, 0].mean()
    s = math.sqrt(a * (1 - a) / 1000 + b * (1 - b) / 1000)
    assert (b - a) / s > 5


@settings(max_examples=300, deadline=None)
@given(t1=st.floats(1, 200), frac=st.floats(0.01, 0.5), wait=st.floats(0, 3), n=st.floats(0, 1e4),
       gamma=st.floats(0, 0.1), det=st.floats(-2, 2), ro=st.floats(0, 0.5), ge=st.floats(0, 1),
       phase=st.floats(-7, 7))
def test_populations_are_probabilities(t1, frac, wait, n, gamma, det, ro, ge, phase):
    m = QubitModel(t1_base_us=t1, t2_base_us=frac * t1, t1_wait_fraction=wait, qp_coupling=gamma,
                   t2_qp_coupling=gamma, ramsey_detuning_mhz=det, readout_error=ro, ground_state_error=ge,
                   ramsey_phase=phase)
    for kind in (T1, T2, GROUND):
        p = p1(m, kind, n)
        assert 0.0 <= p <= 1.0


def test_populations_fuzz_vectorised():
    rng = np.random.default_rng(5)
    n = rng.exponential(100, 100_000)
    for kind in (T1, T2, GROUND):
        p = p1(M, kind, n, rate_scale=rng.uniform(0.5, 2, n.size), extra_detuning=rng.normal(0, 0.05, n.size))
        assert np.all((p >= 0) & (p <= 1))


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0, 1e4), b=st.floats(0, 1e4))
def test_t1_monotone_ground_constant(a, b):
    lo, hi = sorted((a, b))
    assert p1_t1(M, hi) <= p1_t1(M, lo)
    assert p1_ground(M, lo) == p1_ground(M, hi)


def test_zero_burst_matches_untriggered():
    sched = default_schedule(T1)
    a = [s.outcome for _ in range(400) for s in run_shot_sequence(M, T1, [QuasiparticleBurst(0, 0.0, 30.0)],
                                                                 sched, np.random.default_rng(6 + _))]
    b = [s.outcome for _ in range(400) for s in run_shot_sequence(M, T1, [], sched, np.random.default_rng(10_000 + _))]
    assert stats.ks_2samp(a, b).pvalue > 0.001


@pytest.mark.parametrize("kind,target", [(T1, 38.0), (T2, 25.0)])
def test_noiseless_mean_curve_recovers_tau(kind, target, stack, source):
    n0 = M.n_per_kev * dual_qubit_deposits(stack, source, np.random.default_rng(7), 100_000)
    t, p = mean_population_curve(M, kind, n0)
    curve = PopulationCurve(kind, "dual", t, p, np.zeros_like(p), np.full(p.shape, 10**6))
    fit = fit_recovery(curve, n_boot=0)
    assert fit.tau_us == pytest.approx(target, rel=0.01)


def test_model_validation():
    with pytest.raises(ConfigError):
        QubitModel(t2_base_us=60.0)
    with pytest.raises(ConfigError):
        QubitModel(ground_state_error=1.5)
    with pytest.raises(ConfigError):
        ShotSchedule(T1, latency_us=(15.0, 10.0))
    with pytest.raises(ValueError):
        ShotRecord(T1, 0.0, 2)
    with pytest.raises(ConfigError):
        p1(M, "rabi", 0.0)


def test_drift_off_by_default():
    d = DriftProcess(M, 3600.0, np.random.default_rng(8))
    assert np.all(d.detuning == 0) and np.all(d.t1_mod == 0)


def test_drift_profile_amplitudes():
    m = with_drift(M)
    d = DriftProcess(m, 400 * 3600.0, np.random.default_rng(9))
    assert d.detuning.std() == pytest.approx(m.t2_drift_sigma_mhz, rel=0.2)
    assert d.t1_mod.std() == pytest.approx(m.t1_drift_sigma, rel=0.25)
    assert d.t1_rate_scale(0.0) == pytest.approx(1 + d.t1_mod[0])
