"""End-to-end simulation of triggered MKID / qubit datasets.

Only the parts of the readout stream around radiation events are
synthesised. Each segment starts ``baseline_cycles`` before its first event
and those cycles prime the trigger baseline, so a segment replays exactly
what a continuously running engine would see. Readout noise for cycle ``c``
is a pure function of ``(seed, dataset, c)`` through a counter-based
generator; every other draw is keyed by the run seed, dataset and a label.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import math

import numpy as np

from .calib import build_calibration, calibration_sweep, default_sweep_temperatures
from .daq import TriggerEngine, apply_detection_efficiency, estimate_sigma
from .analysis import live_time
from .geometry import chip_hits_batch, direction_vectors, sample_muon_trajectories, chord_lengths
from .mkid import arc_points, energy_to_temperature, make_channels
from .qubit import (GROUND, DriftProcess, QuasiparticleBurst, default_schedule, run_shot_sequence,
                    simulate_sequences)
from .radiation import MUON, deposit_energy, generate_timeline
from .rng import counter_normals, keyed_rng, philox_key


@dataclass
class DatasetResult:
    name: str
    kind: str
    duration_s: float
    live_time_s: float
    captures: list
    truth: list  # event-file rows of every event that deposited energy
    n_generated: int
    sigma: np.ndarray
    rotation_rad: float
    rejected: list = field(default_factory=list)

    def header(self):
        return {"name": self.name, "kind": self.kind, "duration_s": self.duration_s,
                "live_time_s": self.live_time_s, "n_captures": len(self.captures),
                "n_generated": self.n_generated, "n_rejected": len(self.rejected),
                "rotation_rad": self.rotation_rad, "sigma": self.sigma.round(12).tolist()}


@dataclass
class _Context:
    """Everything a worker needs to synthesise and trigger a segment."""

    seed: int
    dataset: str
    kind: str
    mkids: list
    layout: object
    trigger: object
    qubit: object
    drift: object
    rotation: np.ndarray
    noise_key: np.ndarray
    n_cycles: int
    burst_t: np.ndarray
    burst_n0: np.ndarray
    theta: float = 0.0


def channel_mkids(cfg):
    return make_channels(cfg.geometry.layout().n_channels, cfg.seed, cfg.mkid)


def _rotation_matrix(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def synthesize(ctx, c0, c1, ev_t, ev_peak):
    """IQ samples (n, C, 2) for cycles ``c0 .. c1-1``.

    ``ev_t`` are event times (ns) and ``ev_peak`` the (k, C) peak effective
    temperatures they cause on each channel.
    """
    n = c1 - c0
    cyc = ctx.trigger.cycle_ns
    t = (c0 + np.arange(n, dtype=np.int64)) * cyc
    n_ch = len(ctx.mkids)
    base = np.array([m.base_temperature for m in ctx.mkids])
    top = np.array([m.max_temperature for m in ctx.mkids])
    excess = np.zeros((n, n_ch))
    for te, peak in zip(ev_t, ev_peak):
        dt = (t - te).astype(float)
        on = dt >= 0
        if on.any():
            tau = np.array([m.tau_us for m in ctx.mkids]) * 1e3
            excess[on] += (peak - base)[None, :] * np.exp(-dt[on, None] / tau[None, :])
    temps = base + np.minimum(excess, top - base)
    iq = np.empty((n, n_ch, 2))
    for ch, m in enumerate(ctx.mkids):
        iq[:, ch] = arc_points(m, temps[:, ch])
    iq = iq @ ctx.rotation.T
    bpc = math.ceil(2 * n_ch / 4)
    z = counter_normals(ctx.noise_key, c0 * bpc, n * bpc).reshape(n, 4 * bpc)[:, :2 * n_ch]
    sig = np.array([m.noise_sigma for m in ctx.mkids])
    return iq + z.reshape(n, n_ch, 2) * sig[None, :, None]


def _bursts_near(ctx, t_lo, t_hi):
    i0, i1 = np.searchsorted(ctx.burst_t, [t_lo, t_hi])
    tau = ctx.qubit.tau_qp_us(ctx.kind)
    return [QuasiparticleBurst(int(ctx.burst_t[i]), float(ctx.burst_n0[i]), tau) for i in range(i0, i1)]


def _shots_for(ctx, seg, trig):
    """Qubit shot sequence launched by ``trig``; the latest event before it is the cause."""
    _, _, ev_ids, ev_t, _ = seg
    schedule = default_schedule(ctx.kind)
    before = np.flatnonzero(ev_t <= trig.time_ns)
    cause = int(ev_ids[before[-1]]) if len(before) else None
    lookback = int(20 * ctx.qubit.tau_qp_us(ctx.kind) * 1e3)
    bursts = _bursts_near(ctx, trig.time_ns - lookback, trig.time_ns + int(schedule.duration_us * 1e3) + 1)
    rng = keyed_rng(ctx.seed, ctx.dataset, "shots", trig.cycle)
    return run_shot_sequence(ctx.qubit, ctx.kind, bursts, schedule, rng, trig.time_ns, cause, ctx.drift)


def run_segment(ctx, seg):
    """Trigger engine over one segment; returns its captures and rejections."""
    c0, c1, ev_ids, ev_t, ev_peak = seg
    cfg = ctx.trigger
    b = cfg.baseline_cycles

    def qubit_runner(trig):
        return _shots_for(ctx, seg, trig)

    if c0 >= 0:
        engine = TriggerEngine(cfg, ctx.layout, c0 + b, qubit_runner)
        engine.prime(synthesize(ctx, c0, c0 + b, ev_t, ev_peak))
        start = c0 + b
    else:
        engine = TriggerEngine(cfg, ctx.layout, 0, qubit_runner)
        start = 0
    if c1 > start:
        engine.feed(synthesize(ctx, start, c1, ev_t, ev_peak))
    for cap in engine.captures:
        lo = cap.trace_start_ns - cfg.cycle_ns
        sel = np.flatnonzero((ev_t > lo) & (ev_t <= cap.trace_end_ns))
        cap.truth_event_ids = tuple(int(ev_ids[i]) for i in sel)
        before = np.flatnonzero(ev_t <= cap.trigger_time_ns)
        cap.truth_event_id = int(ev_ids[before[-1]]) if len(before) else None
        cap.dataset = ctx.dataset
    return engine.captures, engine.rejected


_WORKER_CTX = None


def _init_worker(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _run_chunk(segs):
    return [run_segment(_WORKER_CTX, s) for s in segs]


def plan_segments(ev_cycles, trigger, n_cycles):
    """Group event cycles into ``[start, end)`` cycle segments (indices into the event list)."""
    b = trigger.baseline_cycles
    tail = 2 * trigger.dead_cycles + 1
    segs = []
    for k, c in enumerate(ev_cycles):
        s, e = c - b - 1, min(c + tail, n_cycles)
        if segs and s <= segs[-1][1]:
            segs[-1][1] = max(segs[-1][1], e)
            segs[-1][2].append(k)
        else:
            segs.append([s, e, [k]])
    out = []
    for s, e, idx in segs:
        # too close to the run start for a full baseline: replay from cycle 0 with warm-up
        out.append((s if s >= 0 else -1, e, idx))
    return out


def background_sigma(cfg, mkids, dataset, rotation):
    """Per-channel noise floor from ``background_count`` standby cycles."""
    n = cfg.trigger.background_count
    base = np.stack([arc_points(m, m.base_temperature) for m in mkids]) @ rotation.T
    bpc = math.ceil(2 * len(mkids) / 4)
    key = philox_key(cfg.seed, dataset, "background")
    z = counter_normals(key, 0, n * bpc).reshape(n, 4 * bpc)[:, :2 * len(mkids)].reshape(n, len(mkids), 2)
    sig = np.array([m.noise_sigma for m in mkids])
    return estimate_sigma(base[None] + z * sig[None, :, None], n)


def _event_truth_row(ev, rec, lost):
    row = {"event_id": ev.event_id, "kind": ev.kind, "time_ns": ev.arrival_time_ns,
           "chip_energy_kev": {k: round(float(v), 9) for k, v in rec.chip_energy.items()},
           "suppressed_arrays": sorted(lost)}
    if ev.kind == MUON:
        row.update(zenith=round(ev.trajectory.zenith, 12), azimuth=round(ev.trajectory.azimuth, 12))
    else:
        row.update(chip=ev.chip)
    return row


@dataclass
class PreparedDataset:
    ctx: _Context
    vis_ids: np.ndarray  # events that reach at least one MKID
    vis_t: np.ndarray
    vis_peak: np.ndarray  # (k, C) peak effective temperature per channel
    truth: list
    n_generated: int


def prepare_dataset(cfg, dataset):
    """Timeline, deposits, efficiency mask and per-channel peak temperatures of a dataset."""
    stack = cfg.geometry.stack()
    layout = cfg.geometry.layout()
    mkids = channel_mkids(cfg)
    name, kind, duration = dataset.name, dataset.kind, dataset.duration_s

    r = keyed_rng(cfg.seed, name, "rotation")
    theta = math.radians(cfg.rotation_drift_deg) * (2 * r.random() - 1)
    rotation = _rotation_matrix(theta)
    trigger = cfg.trigger.trigger_config(background_sigma(cfg, mkids, name, rotation))
    n_cycles = math.ceil(duration * 1e9 / trigger.cycle_ns)

    events = generate_timeline(cfg.source, duration, stack, keyed_rng(cfg.seed, name, "timeline"))
    muons = [e for e in events if e.kind == MUON]
    hits_by_id = {}
    if muons:
        pts = np.array([e.trajectory.entry_point for e in muons])
        dirs = direction_vectors(np.array([e.trajectory.zenith for e in muons]),
                                 np.array([e.trajectory.azimuth for e in muons]))
        lengths, _ = chord_lengths(pts, dirs, stack)
        keep = np.flatnonzero(lengths.max(axis=1) > 0)
        for e, h in zip([muons[i] for i in keep], chip_hits_batch(pts[keep], dirs[keep], stack)):
            hits_by_id[e.event_id] = h

    truth, vis_ids, vis_t, vis_peak, burst_t, burst_n0 = [], [], [], [], [], []
    for ev in events:
        if ev.kind == MUON and ev.event_id not in hits_by_id:
            continue
        rng = keyed_rng(cfg.seed, name, "deposit", ev.event_id)
        rec = deposit_energy(ev, hits_by_id.get(ev.event_id), rng, cfg.source, stack)
        pix, lost = apply_detection_efficiency(rec.pixel_energy, cfg.trigger.detection_efficiency, rng)
        truth.append(_event_truth_row(ev, rec, lost))
        if rec.qubit_deposit > 0:
            burst_t.append(ev.arrival_time_ns)
            burst_n0.append(cfg.qubit.n_per_kev * rec.qubit_deposit)
        energies = np.concatenate([pix["top"], pix["bottom"]])
        if np.any(energies > 0):
            vis_ids.append(ev.event_id)
            vis_t.append(ev.arrival_time_ns)
            vis_peak.append([energy_to_temperature(e, m) for e, m in zip(energies, mkids)])

    drift = DriftProcess(cfg.qubit, duration, keyed_rng(cfg.seed, name, "drift"))
    ctx = _Context(cfg.seed, name, kind, mkids, layout, trigger, cfg.qubit, drift, rotation,
                   philox_key(cfg.seed, name, "noise"), n_cycles,
                   np.array(burst_t, dtype=np.int64), np.array(burst_n0, dtype=float), theta)
    return PreparedDataset(ctx, np.array(vis_ids, dtype=np.int64), np.array(vis_t, dtype=np.int64),
                           np.array(vis_peak, dtype=float).reshape(-1, len(mkids)), truth, len(events))


def simulate_dataset(cfg, dataset, jobs=1):
    prep = prepare_dataset(cfg, dataset)
    ctx = prep.ctx
    ev_cycles = -(-prep.vis_t // ctx.trigger.cycle_ns)
    segs = []
    for s, e, idx in plan_segments(ev_cycles, ctx.trigger, ctx.n_cycles):
        if e <= max(s, 0):
            continue
        idx = np.array(idx)
        segs.append((s, e, prep.vis_ids[idx], prep.vis_t[idx], prep.vis_peak[idx]))

    if jobs > 1 and len(segs) > 1:
        size = max(1, len(segs) // (4 * jobs))
        chunks = [segs[i:i + size] for i in range(0, len(segs), size)]
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(ctx,)) as pool:
            results = [r for chunk in pool.map(_run_chunk, chunks) for r in chunk]
    else:
        results = [run_segment(ctx, s) for s in segs]

    captures, rejected = [], []
    for caps, rej in results:
        captures.extend(caps)
        rejected.extend(rej)
    return DatasetResult(dataset.name, dataset.kind, float(dataset.duration_s),
                         live_time(dataset.duration_s, captures), captures, prep.truth,
                         prep.n_generated, ctx.trigger.sigma, ctx.theta, rejected)


def simulate_run(cfg, jobs=None):
    """All datasets of a run; capture ids are assigned in dataset then time order."""
    jobs = cfg.jobs if jobs is None else jobs
    out = [simulate_dataset(cfg, d, jobs) for d in cfg.datasets]
    k = 0
    for res in out:
        for cap in res.captures:
            cap.capture_id = k
            k += 1
    return out


def calibrate_channels(cfg, temperatures=None, n_average=1000):
    """Spline calibration for every channel from a simulated fridge sweep."""
    temps = default_sweep_temperatures() if temperatures is None else temperatures
    curves = {}
    for m in channel_mkids(cfg):
        t, iq, med = calibration_sweep(m, temps, keyed_rng(cfg.seed, "calibration", m.channel), n_average)
        curves[m.channel] = build_calibration(m.channel, t, iq, med)
    return curves


def full_stream_replay(cfg, dataset, n_cycles=None, chunk=65536, with_qubit=False):
    """Synthesise every cycle of a dataset and feed it block by block to one engine.

    Slow compared with the segment replay; used to check it on short runs.
    """
    prep = prepare_dataset(cfg, dataset)
    ctx = prep.ctx
    total = ctx.n_cycles if n_cycles is None else min(n_cycles, ctx.n_cycles)
    seg = (0, 0, prep.vis_ids, prep.vis_t, prep.vis_peak)
    runner = (lambda trig: _shots_for(ctx, seg, trig)) if with_qubit else None
    engine = TriggerEngine(ctx.trigger, ctx.layout, 0, runner)
    span = int(20 * max(m.tau_us for m in ctx.mkids) * 1e3)
    cyc = ctx.trigger.cycle_ns
    for c0 in range(0, total, chunk):
        c1 = min(total, c0 + chunk)
        sel = (prep.vis_t >= c0 * cyc - span) & (prep.vis_t < c1 * cyc)
        engine.feed(synthesize(ctx, c0, c1, prep.vis_t[sel], prep.vis_peak[sel]))
    return engine


# -- qubit-level mixture campaign ---------------------------------------------
def dual_qubit_deposits(stack, source, rng, n):
    """Qubit-chip deposits (keV) of muons that cross both detector chips."""
    out = []
    while sum(len(x) for x in out) < n:
        pts, zen, azi, _ = sample_muon_trajectories(stack, rng, 4 * n + 1000, source.margin_factor)
        lengths, _ = chord_lengths(pts, direction_vectors(zen, azi), stack)
        both = (lengths[:, 0] > 0) & (lengths[:, 2] > 0) & (lengths[:, 1] > 0)
        path = lengths[both, 1]
        out.append(path * source.muon_dedx_kev_per_mm * np.exp(source.muon_sigma_log * rng.standard_normal(len(path))))
    return np.concatenate(out)[:n]


@dataclass(frozen=True)
class MixtureCampaign:
    """First-bin and late populations for a single/dual mixture with known f."""

    f_true: float
    p_single: float
    p_dual: float
    p_base: float
    errors: tuple


def mixture_campaign(model, kind, f, n_single, n_dual, rng, stack, source, cycle_ns=8000,
                     first_bin_us=20.0, late_us=400.0):
    """Triggered sequences where a fraction ``f`` of singles carry dual-like bursts.

    Every sequence starts a uniform ``[0, cycle)`` after its burst, as a
    trigger on the next readout cycle would.
    """
    if kind == GROUND:
        raise ValueError("ground-state shots carry no burst signature")
    sched = default_schedule(kind)
    n_mis = int(round(f * n_single))
    dep = dual_qubit_deposits(stack, source, rng, n_dual + n_mis)
    n0 = np.concatenate([model.n_per_kev * dep, np.zeros(n_single - n_mis)])
    delay = rng.uniform(0, cycle_ns * 1e-3, len(n0))
    t, bits = simulate_sequences(model, kind, n0, delay, sched, rng)
    dual = slice(0, n_dual)
    single = slice(n_dual, None)

    def pop(sl, mask_fn):
        m = mask_fn(t[sl])
        v = bits[sl][m]
        p = float(v.mean())
        return p, math.sqrt(max(p * (1 - p), 0.25 / len(v)) / len(v))

    ps, es = pop(single, lambda x: x < first_bin_us)
    pd, ed = pop(dual, lambda x: x < first_bin_us)
    pb, eb = pop(slice(None), lambda x: x >= late_us)
    return MixtureCampaign(n_mis / n_single if n_single else 0.0, ps, pd, pb, (es, ed, eb))
