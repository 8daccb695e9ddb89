"""Triggered acquisition: noise-floor estimation, threshold trigger, pre-buffered captures, classification.

Samples arrive as blocks of shape ``(n_cycles, n_channels, 2)`` (one averaged
I/Q point per channel and readout cycle). In standby the engine compares each
cycle against the rolling median of the previous ``baseline_cycles`` standby
cycles; a shift beyond ``threshold * sigma`` on any channel and quadrature
triggers a capture. The engine then records the pre-buffer and the detection
window, stays dead until the dead time elapses and re-arms.
"""
from collections import deque
from dataclasses import dataclass, field
import enum
import math
import queue
import threading

import numpy as np

from .errors import CalibrationError, CaptureOverflowError, ConfigError


class EventClass(str, enum.Enum):
    DUAL = "dual"
    TOP_ONLY = "top"
    BOTTOM_ONLY = "bottom"

    @property
    def is_single(self):
        return self is not EventClass.DUAL


@dataclass(frozen=True)
class ChannelLayout:
    """Channels ``0 .. n_top-1`` belong to the top array, the rest to the bottom array."""

    n_top: int = 9
    n_bottom: int = 9

    @property
    def n_channels(self):
        return self.n_top + self.n_bottom

    def array_of(self, ch):
        return "top" if ch < self.n_top else "bottom"

    def channels(self, array):
        if array == "top":
            return list(range(self.n_top))
        return list(range(self.n_top, self.n_channels))

    def swapped(self, ch):
        """Channel index after exchanging the two arrays (requires equal sizes)."""
        return ch + self.n_top if ch < self.n_top else ch - self.n_top


@dataclass
class TriggerConfig:
    sigma: np.ndarray = None  # (n_channels, 2)
    threshold: float = 8.0
    background_count: int = 10000
    prebuffer_us: float = 15.0
    window_us: float = 700.0
    baseline_cycles: int = 64
    cycle_ns: int = 8000
    dead_time_us: float = None
    detection_efficiency: float = 1.0

    def __post_init__(self):
        if self.threshold <= 0:
            raise ConfigError("threshold multiplier must be positive")
        if self.prebuffer_us >= self.window_us:
            raise ConfigError("pre-buffer must be shorter than the window")
        if self.baseline_cycles < 1:
            raise ConfigError("baseline needs at least one cycle")
        if not 0.0 <= self.detection_efficiency <= 1.0:
            raise ConfigError("detection_efficiency must be in [0, 1]")
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=float)

    @property
    def prebuffer_cycles(self):
        return math.ceil(self.prebuffer_us * 1e3 / self.cycle_ns)

    @property
    def window_cycles(self):
        """Cycles recorded from the trigger cycle on (inclusive) so the trace reaches ``window_us``."""
        return math.ceil(self.window_us * 1e3 / self.cycle_ns) + 1

    @property
    def dead_cycles(self):
        dead = self.window_us if self.dead_time_us is None else max(self.dead_time_us, self.window_us)
        return max(self.window_cycles, math.ceil(dead * 1e3 / self.cycle_ns) + 1)

    @property
    def trace_cycles(self):
        return self.prebuffer_cycles + self.window_cycles


def estimate_sigma(background, count=10000):
    """Per-channel, per-quadrature sample standard deviation from ``count`` background cycles."""
    bg = np.asarray(background, dtype=float)
    if bg.ndim != 3 or bg.shape[-1] != 2:
        raise CalibrationError("background must have shape (n_cycles, n_channels, 2)")
    if len(bg) < count:
        raise CalibrationError(f"need {count} background samples per channel, got {len(bg)}")
    return bg[:count].std(axis=0, ddof=1)


@dataclass
class Trigger:
    cycle: int
    time_ns: int
    channels: tuple
    reference: np.ndarray  # (n_channels, 2) baseline medians at the trigger


@dataclass
class CaptureRecord:
    trigger_cycle: int
    trigger_time_ns: int
    trace_start_ns: int
    traces: np.ndarray  # (n_channels, trace_cycles, 2)
    reference: np.ndarray
    trigger_channels: tuple
    member_channels: tuple
    classification: EventClass
    capture_id: int = -1
    shots: list = field(default_factory=list)
    truth_event_id: int = None
    truth_event_ids: tuple = ()
    dataset: str = ""
    dead_until_ns: int = 0
    cycle_ns: int = 8000

    @property
    def trace_end_ns(self):
        return self.trace_start_ns + (self.traces.shape[1] - 1) * self.cycle_ns


@dataclass
class RejectedCapture:
    cycle: int
    reason: str


def classify(channels, layout):
    """Dual when the channel set spans both arrays, otherwise the single array's class."""
    arrays = {layout.array_of(c) for c in channels}
    if not arrays:
        raise ValueError("classification needs a non-empty channel set")
    if arrays == {"top", "bottom"}:
        return EventClass.DUAL
    return EventClass.TOP_ONLY if arrays == {"top"} else EventClass.BOTTOM_ONLY


def exceeding_channels(samples, reference, sigma, threshold):
    """Channels with any |x - ref| > threshold * sigma over the given samples (..., C, 2)."""
    dev = np.abs(np.asarray(samples) - reference) > threshold * sigma
    dev = dev.reshape(-1, *dev.shape[-2:])
    return tuple(int(c) for c in np.flatnonzero(dev.any(axis=(0, 2))))


def capture(trigger, prebuffer, window, config, layout, qubit_runner=None):
    """Assemble a capture from the pre-buffer and window samples and launch the qubit sequence."""
    if len(prebuffer) < config.prebuffer_cycles:
        raise ValueError("pre-buffer underflow")
    traces = np.concatenate([prebuffer[-config.prebuffer_cycles:], window], axis=0).transpose(1, 0, 2)
    members = exceeding_channels(window, trigger.reference, config.sigma, config.threshold)
    members = tuple(sorted(set(members) | set(trigger.channels)))
    rec = CaptureRecord(
        trigger_cycle=trigger.cycle,
        trigger_time_ns=trigger.time_ns,
        trace_start_ns=trigger.time_ns - config.prebuffer_cycles * config.cycle_ns,
        traces=np.ascontiguousarray(traces),
        reference=trigger.reference,
        trigger_channels=trigger.channels,
        member_channels=members,
        classification=classify(members, layout),
        dead_until_ns=trigger.time_ns + config.dead_cycles * config.cycle_ns,
        cycle_ns=config.cycle_ns,
    )
    if qubit_runner is not None:
        rec.shots = qubit_runner(trigger)
    return rec


class TriggerEngine:
    """Single logical consumer of readout cycles; see module docstring.

    ``start_cycle`` is the absolute index of the first cycle fed, so trigger
    times are ``cycle * cycle_ns``.
    """

    chunk = 65536

    def __init__(self, config, layout, start_cycle=0, qubit_runner=None):
        if config.sigma is None:
            raise CalibrationError("trigger sigma is not calibrated")
        self.config = config
        self.layout = layout
        self.next_cycle = int(start_cycle)
        self.qubit_runner = qubit_runner
        c = config.sigma.shape[0]
        self._hist = np.empty((0, c, 2))
        self._raw = deque(maxlen=config.prebuffer_cycles)
        self._dead_left = 0
        self._window = None
        self._trigger = None
        self._prebuffer = None
        self.rejected = []
        self.triggers = []
        self.captures = []
        self._thr = config.threshold * config.sigma
        self._delta = 2.0 * config.sigma

    @property
    def standby(self):
        return self._dead_left == 0

    def prime(self, history):
        """Load standby cycles that precede ``start_cycle`` as baseline and pre-buffer.

        Used when a stream is replayed from the middle: the engine then
        behaves as if it had been running through ``history``.
        """
        h = np.asarray(history, dtype=float)
        b = self.config.baseline_cycles
        if len(h) < b:
            raise ValueError(f"priming needs {b} cycles, got {len(h)}")
        self._hist = h[-b:].copy()
        self._raw.clear()
        self._push_raw(h)

    def push(self, sample):
        """Feed one readout cycle; returns the list of captures completed by it."""
        return self.feed(np.asarray(sample, dtype=float)[None])

    def feed(self, block):
        block = np.asarray(block, dtype=float)
        done = []
        pos, m = 0, len(block)
        while pos < m:
            if self._dead_left > 0:
                k = min(self._dead_left, m - pos)
                part = block[pos:pos + k]
                if self._window is not None:
                    need = self.config.window_cycles - len(self._window)
                    if need > 0:
                        self._window.extend(part[:need])
                        if len(self._window) == self.config.window_cycles:
                            done.append(self._finish())
                self._push_raw(part)
                self._dead_left -= k
                self.next_cycle += k
                pos += k
                continue
            # _scan folds every standby cycle it passes into the baseline history
            j = self._scan(block[pos:])
            if j is None:
                self._push_raw(block[pos:])
                self.next_cycle += m - pos
                break
            self._push_raw(block[pos:pos + j])
            self.next_cycle += j
            pos += j
            self._start(block[pos])
        self.captures.extend(done)
        return done

    # -- internals -------------------------------------------------------
    def _push_raw(self, part):
        self._raw.extend(part[-self._raw.maxlen:])

    def _start(self, sample):
        cfg = self.config
        ref, chans, warm = self._pending
        cyc = self.next_cycle
        self._dead_left = cfg.dead_cycles
        if warm or len(self._raw) < cfg.prebuffer_cycles:
            reason = "baseline warm-up" if warm else "pre-buffer underflow"
            self.rejected.append(RejectedCapture(cyc, reason))
            self._window = None
            return
        self._trigger = Trigger(cyc, cyc * cfg.cycle_ns, chans, ref)
        self.triggers.append(self._trigger)
        self._prebuffer = np.array(self._raw)
        self._window = []

    def _finish(self):
        rec = capture(self._trigger, self._prebuffer, np.array(self._window), self.config,
                      self.layout, self.qubit_runner)
        self._window = None
        return rec

    def _exceed(self, x, ref):
        return np.abs(x - ref) > self._thr

    def _scan(self, x):
        """Index of the first triggering cycle in ``x`` or ``None``; sets ``self._pending``."""
        b = self.config.baseline_cycles
        off = 0
        # warm-up: partial baseline, evaluated sample by sample
        while len(self._hist) < b and off < len(x):
            if len(self._hist):
                ref = np.median(self._hist, axis=0)
                ex = self._exceed(x[off], ref)
                if ex.any():
                    self._pending = (ref, _chans(ex), True)
                    return off
            self._hist = np.concatenate([self._hist, x[off:off + 1]], axis=0)
            off += 1
        while off < len(x):
            end = min(len(x), off + self.chunk)
            j = self._scan_chunk(x[off:end])
            if j is not None:
                return off + j
            off = end
        return None

    def _scan_chunk(self, x):
        b = self.config.baseline_cycles
        hist = self._hist
        z = np.concatenate([hist, x], axis=0)
        centre = np.median(hist, axis=0)
        delta = self._delta
        above = np.concatenate([np.zeros((1,) + centre.shape, int), np.cumsum(z > centre + delta, axis=0)])
        below = np.concatenate([np.zeros((1,) + centre.shape, int), np.cumsum(z < centre - delta, axis=0)])
        m = len(x)
        n_above = above[b:b + m] - above[:m]
        n_below = below[b:b + m] - below[:m]
        hi_idx, lo_idx = b // 2, (b - 1) // 2
        # the window median is certainly within +-delta of ``centre`` when these hold
        bounded = (n_above <= b - 1 - hi_idx) & (n_below <= lo_idx)
        cand = (np.abs(x - centre) > self._thr - delta) | ~bounded
        for j in np.flatnonzero(cand.any(axis=(1, 2))):
            ref = np.median(z[j:j + b], axis=0)
            ex = self._exceed(x[j], ref)
            if ex.any():
                self._pending = (ref, _chans(ex), False)
                self._hist = z[j:j + b]
                return int(j)
        self._hist = z[-b:]
        return None


def _chans(ex):
    return tuple(int(c) for c in np.flatnonzero(ex.any(axis=1)))


def detect(engine, sample):
    """Feed one cycle; return the :class:`Trigger` it fired, else ``None``."""
    n = len(engine.triggers)
    engine.push(sample)
    return engine.triggers[-1] if len(engine.triggers) > n else None


class StreamingAcquisition:
    """Threaded producer/consumer wrapper around :class:`TriggerEngine`.

    One producer per array pushes ``(seq, array, block)`` into a bounded
    queue; the consumer joins the two arrays' blocks for the same sequence
    number in order and feeds the engine. Finished captures go to a bounded
    spill read by ``sink`` in its own thread; a full spill raises
    :class:`CaptureOverflowError` instead of dropping data.
    """

    def __init__(self, engine, queue_size=16, spill_size=1024):
        self.engine = engine
        self.inbox = queue.Queue(maxsize=queue_size)
        self.spill = queue.Queue(maxsize=spill_size)
        self.error = None

    def run(self, sources, sink=None):
        layout = self.engine.layout
        arrays = ("top", "bottom")
        collected = []

        def produce(name):
            for seq, blk in enumerate(sources[name]):
                self.inbox.put((seq, name, np.asarray(blk, dtype=float)))
            self.inbox.put((None, name, None))

        def drain():
            while True:
                item = self.spill.get()
                if item is None:
                    return
                (sink or collected.append)(item)

        producers = [threading.Thread(target=produce, args=(a,), daemon=True) for a in arrays]
        drainer = threading.Thread(target=drain, daemon=True)
        for t in producers:
            t.start()
        drainer.start()

        pending = {a: {} for a in arrays}
        finished = set()
        seq = 0
        try:
            while True:
                while all(seq in pending[a] for a in arrays):
                    top, bot = pending["top"].pop(seq), pending["bottom"].pop(seq)
                    if top.shape[1] != layout.n_top or bot.shape[1] != layout.n_bottom:
                        raise ConfigError("block channel count does not match the layout")
                    for rec in self.engine.feed(np.concatenate([top, bot], axis=1)):
                        try:
                            self.spill.put_nowait(rec)
                        except queue.Full:
                            raise CaptureOverflowError("capture spill is full; consumer too slow") from None
                    seq += 1
                if len(finished) == 2 and not any(pending[a] for a in arrays):
                    break
                s, name, blk = self.inbox.get()
                if s is None:
                    finished.add(name)
                    if len(finished) == 2 and any(pending[a] for a in arrays):
                        if any(len(pending[a]) != len(pending[b]) for a in arrays for b in arrays):
                            raise ConfigError("array streams ended with unequal block counts")
                else:
                    pending[name][s] = blk
        finally:
            self.spill.put(None)
            drainer.join()
        return collected


def apply_detection_efficiency(pixel_energy, efficiency, rng):
    """Zero a detector array's pixel energies with probability ``1 - efficiency``.

    Returns the surviving dict and the set of arrays that were suppressed.
    """
    out, lost = {}, set()
    for role, e in pixel_energy.items():
        if efficiency < 1.0 and rng.random() >= efficiency:
            out[role] = np.zeros_like(e)
            lost.add(role)
        else:
            out[role] = e
    return out, lost
