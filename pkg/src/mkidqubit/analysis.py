"""Rates, energy distributions, post-event qubit curves, recovery fits,
misclassification estimate, drift series and CSV/SVG output."""
from dataclasses import dataclass, field
import csv
import math
from pathlib import Path

import numpy as np
from scipy.optimize import curve_fit

from .daq import EventClass
from .errors import DataError, EstimationError, FitError
from .geometry import sample_muon_trajectories, chord_lengths, direction_vectors

CLASSES = (EventClass.DUAL, EventClass.TOP_ONLY, EventClass.BOTTOM_ONLY)
FIRST_BIN_US = 20.0
LATE_SHOTS_US = 400.0


# -- rates -------------------------------------------------------------------
@dataclass(frozen=True)
class RateEstimate:
    event_class: str
    count: int
    live_time_s: float
    area_cm2: float
    rate: float  # events / s / cm^2
    sigma: float
    expected: float = None

    @property
    def ratio(self):
        """Measured over expected rate, ``None`` without an expectation."""
        if not self.expected:
            return None
        return self.rate / self.expected

    @property
    def pull(self):
        if self.expected is None or self.sigma == 0:
            return None
        return (self.rate - self.expected) / self.sigma


def rate_estimate(event_class, count, live_time_s, area_cm2, expected=None):
    if live_time_s <= 0 or area_cm2 <= 0:
        if count:
            raise DataError("positive counts need positive live time and area")
        return RateEstimate(str(event_class), 0, max(live_time_s, 0.0), area_cm2, 0.0, 0.0, expected)
    norm = live_time_s * area_cm2
    return RateEstimate(str(event_class), int(count), float(live_time_s), float(area_cm2),
                        count / norm, math.sqrt(count) / norm, expected)


def live_time(duration_s, captures):
    """Run duration minus the dead windows of the captures (clipped to the run)."""
    end = int(round(duration_s * 1e9))
    dead = sum(max(0, min(c.dead_until_ns, end) - c.trigger_time_ns) for c in captures)
    return max(0.0, duration_s - dead * 1e-9)


def event_rates(captures, live_time_s, area_cm2=4.0, expected=None):
    """Per-class rates normalised to one detector substrate's area.

    ``expected`` optionally maps a class (or ``"dual"``) to its expected rate.
    """
    expected = expected or {}
    counts = {c: 0 for c in CLASSES}
    for cap in captures:
        counts[EventClass(cap.classification)] += 1
    out = {}
    for c in CLASSES:
        out[c.value] = rate_estimate(c.value, counts[c], live_time_s, area_cm2, expected.get(c.value))
    n_single = counts[EventClass.TOP_ONLY] + counts[EventClass.BOTTOM_ONLY]
    out["single"] = rate_estimate("single", n_single, live_time_s, area_cm2, expected.get("single"))
    return out


def dual_acceptance(stack, margin_factor=2.0, n=2_000_000, rng=None):
    """Fraction of generated muons crossing both detector chips, with its binomial error."""
    rng = rng or np.random.default_rng(0)
    pts, zen, azi, area = sample_muon_trajectories(stack, rng, n, margin_factor)
    lengths, _ = chord_lengths(pts, direction_vectors(zen, azi), stack)
    both = (lengths[:, 0] > 0) & (lengths[:, 2] > 0)
    p = both.mean()
    return p, math.sqrt(p * (1 - p) / n), area


def acceptance_weighted_dual_flux(stack, muon_flux, margin_factor=2.0, n=2_000_000, rng=None):
    """Expected dual rate per cm^2 of one detector chip for an isotropic-plane flux."""
    p, sp, area = dual_acceptance(stack, margin_factor, n, rng)
    chip_area = stack.top.area_cm2
    scale = muon_flux * area / chip_area
    return p * scale, sp * scale


# -- energies ----------------------------------------------------------------
def dual_groups(top, bottom, low=0.25, high=0.75):
    """Label dual events by how the energy splits between the substrates.

    ``top / (top + bottom)`` below ``low`` is bottom-heavy, above ``high``
    top-heavy, anything else (including zero total) distributed.
    """
    top = np.asarray(top, dtype=float)
    bottom = np.asarray(bottom, dtype=float)
    tot = top + bottom
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(tot > 0, top / np.where(tot > 0, tot, 1.0), 0.5)
    return np.where(ratio < low, "bottom-heavy", np.where(ratio > high, "top-heavy", "distributed"))


@dataclass
class EnergyHistograms:
    edges: np.ndarray
    density: dict  # "single" / "dual" -> density per bin
    counts: dict
    dual_pairs: np.ndarray  # (n, 2) top, bottom
    dual_group: np.ndarray

    def tail_mass(self, key, above=0.5):
        w = np.diff(self.edges)
        keep = self.edges[:-1] >= above
        return float(np.sum(self.density[key][keep] * w[keep]))


def energy_histograms(classes, top, bottom, bins=20, thresholds=(0.25, 0.75)):
    """Probability densities of normalised energy for single and dual events.

    Singles contribute the energy of the array that fired; duals contribute
    both substrate values.
    """
    classes = [EventClass(c) for c in classes]
    top = np.asarray(top, dtype=float)
    bottom = np.asarray(bottom, dtype=float)
    is_dual = np.array([c is EventClass.DUAL for c in classes], dtype=bool)
    is_top = np.array([c is EventClass.TOP_ONLY for c in classes], dtype=bool)
    is_bot = np.array([c is EventClass.BOTTOM_ONLY for c in classes], dtype=bool)
    single = np.concatenate([top[is_top], bottom[is_bot]])
    dual = np.concatenate([top[is_dual], bottom[is_dual]])
    edges = np.linspace(0.0, 1.0, bins + 1)
    dens, counts = {}, {}
    for key, vals in (("single", single), ("dual", dual)):
        h, _ = np.histogram(vals, edges)
        counts[key] = h
        dens[key] = h / (h.sum() * np.diff(edges)) if h.sum() else np.zeros(bins)
    pairs = np.column_stack([top[is_dual], bottom[is_dual]])
    groups = dual_groups(pairs[:, 0], pairs[:, 1], *thresholds)
    return EnergyHistograms(edges, dens, counts, pairs, groups)


# -- post-event curves -------------------------------------------------------
@dataclass
class PopulationCurve:
    kind: str
    event_class: str
    t_us: np.ndarray  # mean shot time per bin
    mean: np.ndarray
    sigma: np.ndarray  # binomial standard error
    n: np.ndarray
    outcomes: np.ndarray = field(repr=False, default=None)  # (n_captures, n_bins)
    times: np.ndarray = field(repr=False, default=None)


def cycle_bin_edges(period_us, n_cycles, latency_lo_us=10.0):
    """Edges putting each readout cycle's shot in its own bin."""
    return latency_lo_us + period_us * np.arange(n_cycles + 1) - 1e-9


def shot_matrix(captures, kind, edges):
    """Per-capture outcomes and times on the binning ``edges`` (NaN where a bin has no shot)."""
    nb = len(edges) - 1
    rows_o, rows_t = [], []
    for cap in captures:
        sh = [s for s in cap.shots if s.kind == kind]
        if not sh:
            continue
        t = np.array([s.time_us for s in sh])
        o = np.array([s.outcome for s in sh], dtype=float)
        idx = np.searchsorted(edges, t, side="right") - 1
        ok = (idx >= 0) & (idx < nb)
        ro = np.full(nb, np.nan)
        rt = np.full(nb, np.nan)
        ro[idx[ok]] = o[ok]
        rt[idx[ok]] = t[ok]
        rows_o.append(ro)
        rows_t.append(rt)
    if not rows_o:
        return np.empty((0, nb)), np.empty((0, nb))
    return np.array(rows_o), np.array(rows_t)


def curve_from_matrix(kind, event_class, outcomes, times):
    n = np.sum(~np.isnan(outcomes), axis=0)
    if np.any(n == 0):
        raise DataError(f"{event_class} {kind} curve has empty time bins")
    mean = np.nansum(outcomes, axis=0) / n
    t = np.nansum(times, axis=0) / n
    sigma = np.sqrt(mean * (1 - mean) / n)
    return PopulationCurve(kind, str(event_class), t, mean, sigma, n, outcomes, times)


def post_event_population(captures, kind, edges):
    """Binomial mean and standard error of P(1) per trigger-relative bin and class."""
    out = {}
    for c in CLASSES:
        caps = [cap for cap in captures if EventClass(cap.classification) is c]
        o, t = shot_matrix(caps, kind, edges)
        if len(o) == 0:
            continue
        out[c.value] = curve_from_matrix(kind, c.value, o, t)
    sing = [cap for cap in captures if EventClass(cap.classification).is_single]
    o, t = shot_matrix(sing, kind, edges)
    if len(o):
        out["single"] = curve_from_matrix(kind, "single", o, t)
    return out


# -- recovery fit ------------------------------------------------------------
@dataclass(frozen=True)
class RecoveryFit:
    kind: str
    amplitude: float
    baseline: float
    tau_us: float
    tau_ci: tuple
    residual_rms: float
    chi2_red: float
    n_bins: int


def recovery_model(t, baseline, amplitude, tau):
    return baseline - amplitude * np.exp(-t / tau)


def _fit_arrays(t, y, s, tau_guess):
    b0 = float(np.mean(y[-max(3, len(y) // 5):]))
    a0 = b0 - float(y[0])
    p0 = (b0, a0 * math.exp(t[0] / tau_guess), tau_guess)
    popt, _ = curve_fit(recovery_model, t, y, p0=p0, sigma=s, absolute_sigma=True,
                        bounds=([-np.inf, -np.inf, 1e-3], [np.inf, np.inf, 1e5]), maxfev=10000)
    return popt


def fit_recovery(curve, n_boot=200, rng=None, tau_guess=30.0, ci=0.95):
    """Least-squares ``baseline - A exp(-t/tau)`` with a bootstrap-over-captures interval."""
    t = np.asarray(curve.t_us, dtype=float)
    y = np.asarray(curve.mean, dtype=float)
    if len(t) < 6:
        raise FitError(f"need at least 6 time bins, got {len(t)}", {"n_bins": len(t)})
    if np.ptp(y) == 0:
        raise FitError("constant curve: amplitude is not identifiable", {"value": float(y[0])})
    n = np.asarray(curve.n, dtype=float)
    s = np.sqrt(np.clip(y * (1 - y), 0.25 / n, None) / n)
    try:
        popt = _fit_arrays(t, y, s, tau_guess)
    except (RuntimeError, ValueError) as exc:
        raise FitError(f"recovery fit did not converge: {exc}", {"t": t.tolist(), "y": y.tolist()}) from exc
    resid = y - recovery_model(t, *popt)
    rms = float(np.sqrt(np.mean(resid ** 2)))
    chi2 = float(np.sum((resid / s) ** 2) / max(1, len(t) - 3))
    if not np.all(np.isfinite(popt)) or abs(popt[1]) < 1e-12:
        raise FitError("recovery fit degenerate", {"params": popt.tolist(), "residual_rms": rms})

    lo = hi = float("nan")
    if n_boot and curve.outcomes is not None and len(curve.outcomes) > 1:
        rng = rng or np.random.default_rng(0)
        m = len(curve.outcomes)
        taus = []
        for _ in range(n_boot):
            pick = rng.integers(0, m, m)
            o, tt = curve.outcomes[pick], curve.times[pick]
            nn = np.sum(~np.isnan(o), axis=0)
            if np.any(nn == 0):
                continue
            yb = np.nansum(o, axis=0) / nn
            tb = np.nansum(tt, axis=0) / nn
            sb = np.sqrt(np.clip(yb * (1 - yb), 0.25 / nn, None) / nn)
            try:
                taus.append(_fit_arrays(tb, yb, sb, popt[2])[2])
            except (RuntimeError, ValueError):
                continue
        if taus:
            q = (1 - ci) / 2
            lo, hi = (float(v) for v in np.quantile(taus, [q, 1 - q]))
    return RecoveryFit(curve.kind, float(popt[1]), float(popt[0]), float(popt[2]),
                       (lo, hi), rms, chi2, len(t))


# -- misclassification -------------------------------------------------------
@dataclass(frozen=True)
class MisclassificationEstimate:
    f: float  # clipped to [0, 1]
    f_raw: float
    p_single: float
    p_dual: float
    p_base: float
    sigma_f: float
    corrected_flux: float = None
    dataset: str = ""


def solve_f(p_single, p_dual, p_base):
    """``P_single = (1 - f) P_base + f P_dual`` solved for ``f``.

    With ``P_base = 1`` this is the baseline-normalised form
    ``P_single = (1 - f) + f P_dual``.
    """
    den = p_base - p_dual
    if den == 0:
        raise EstimationError("dual and baseline populations coincide; f is undefined",
                              {"p_dual": p_dual, "p_base": p_base})
    return (p_base - p_single) / den


def corrected_flux(n_dual, n_single, f, live_time_s, area_cm2=4.0):
    """Dual rate with the misclassified share of singles added back."""
    return (n_dual + f * n_single) / (live_time_s * area_cm2)


def first_bin_mean(captures, kind, limit_us=FIRST_BIN_US):
    vals = [s.outcome for c in captures for s in c.shots if s.kind == kind and s.time_us < limit_us]
    return _mean_err(vals)


def late_mean(captures, kind, after_us=LATE_SHOTS_US):
    vals = [s.outcome for c in captures for s in c.shots if s.kind == kind and s.time_us >= after_us]
    return _mean_err(vals)


def _mean_err(vals):
    n = len(vals)
    if n == 0:
        raise DataError("no shots in the requested window")
    p = float(np.mean(vals))
    return p, math.sqrt(max(p * (1 - p), 0.25 / n) / n), n


def estimate_misclassification(p_single, p_dual, p_base, errors=(0.0, 0.0, 0.0), dataset=""):
    """f from first-bin populations of singles, duals and late-shot baseline."""
    f = solve_f(p_single, p_dual, p_base)
    es, ed, eb = errors
    den = p_base - p_dual
    # first-order propagation
    df_ds = -1 / den
    df_dd = (p_base - p_single) / den ** 2
    df_db = (p_single - p_dual) / den ** 2
    sf = math.sqrt((df_ds * es) ** 2 + (df_dd * ed) ** 2 + (df_db * eb) ** 2)
    return MisclassificationEstimate(min(1.0, max(0.0, f)), f, p_single, p_dual, p_base, sf, dataset=dataset)


def misclassification_from_captures(captures, kind, live_time_s=None, area_cm2=4.0, dataset=""):
    duals = [c for c in captures if EventClass(c.classification) is EventClass.DUAL]
    singles = [c for c in captures if EventClass(c.classification).is_single]
    if not duals or not singles:
        raise EstimationError("need both dual and single captures to estimate f")
    ps, es, _ = first_bin_mean(singles, kind)
    pd, ed, _ = first_bin_mean(duals, kind)
    pb, eb, _ = late_mean(captures, kind)
    est = estimate_misclassification(ps, pd, pb, (es, ed, eb), dataset)
    if live_time_s:
        flux = corrected_flux(len(duals), len(singles), est.f, live_time_s, area_cm2)
        est = MisclassificationEstimate(**{**est.__dict__, "corrected_flux": flux})
    return est


# -- drift -------------------------------------------------------------------
@dataclass
class DriftSeries:
    kind: str
    bin_width_s: float
    start_s: np.ndarray
    mean: np.ndarray
    sigma: np.ndarray
    counts: np.ndarray
    jumps: list  # bin index i where bins i and i+1 differ by more than k sigma
    k: float = 5.0

    @property
    def relative_range(self):
        m = self.mean[self.counts > 0]
        return float((m.max() - m.min()) / m.mean()) if len(m) else 0.0

    def jump_times_s(self):
        return [float(self.start_s[i + 1]) for i in self.jumps]


def drift_series(times_s, outcomes, bin_width_s, kind="", k=5.0, start_s=None, min_bins=10):
    """Binned P(1) versus run time with jump annotations at ``k`` combined sigma.

    Sigma uses ``p = (x + 0.5) / (n + 1)`` so that all-zero bins keep a finite error.
    """
    t = np.asarray(times_s, dtype=float)
    o = np.asarray(outcomes, dtype=float)
    if len(t) == 0:
        raise DataError("drift series needs shots")
    t0 = float(t.min()) if start_s is None else float(start_s)
    nb = int(math.floor((t.max() - t0) / bin_width_s)) + 1
    if nb < min_bins:
        raise DataError(f"shots span {nb} bins, need {min_bins}")
    idx = np.minimum(((t - t0) // bin_width_s).astype(int), nb - 1)
    counts = np.bincount(idx, minlength=nb)
    sums = np.bincount(idx, weights=o, minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    pt = (sums + 0.5) / (counts + 1)
    sigma = np.sqrt(pt * (1 - pt) / np.maximum(counts, 1))
    jumps = []
    for i in range(nb - 1):
        if counts[i] == 0 or counts[i + 1] == 0:
            continue
        if abs(mean[i + 1] - mean[i]) > k * math.hypot(sigma[i], sigma[i + 1]):
            jumps.append(i)
    return DriftSeries(kind, float(bin_width_s), t0 + bin_width_s * np.arange(nb), mean, sigma, counts, jumps, k)


def shots_vs_runtime(captures, kind):
    """Absolute shot times (s) and outcomes of one kind across captures."""
    t, o = [], []
    for cap in captures:
        for s in cap.shots:
            if s.kind == kind:
                t.append(cap.trigger_time_ns * 1e-9 + s.time_us * 1e-6)
                o.append(s.outcome)
    return np.array(t), np.array(o)


@dataclass(frozen=True)
class CorrelationReport:
    p_value: float
    statistic: float  # mean distance (s) from each jump to its nearest event
    n_jumps: int
    n_events: int
    n_permutations: int
    no_jumps: bool = False


NO_JUMPS = "no jumps"


def _nearest_distance(jumps, events_sorted):
    i = np.searchsorted(events_sorted, jumps)
    left = events_sorted[np.clip(i - 1, 0, len(events_sorted) - 1)]
    right = events_sorted[np.clip(i, 0, len(events_sorted) - 1)]
    return np.minimum(np.abs(jumps - left), np.abs(right - jumps))


def event_drift_correlation(jump_times_s, event_times_s, span_s, n_permutations=999, rng=None):
    """Permutation test: are jumps closer to events than uniformly placed events would be?

    Event times are redrawn uniformly over ``span_s`` (a tuple ``(start, end)``)
    for each permutation; ``p = (1 + #{perm <= observed}) / (1 + n_permutations)``.
    """
    jumps = np.asarray(jump_times_s, dtype=float)
    ev = np.sort(np.asarray(event_times_s, dtype=float))
    if len(jumps) == 0:
        return CorrelationReport(1.0, float("nan"), 0, len(ev), 0, no_jumps=True)
    if len(ev) == 0:
        raise DataError("correlation needs event times")
    rng = rng or np.random.default_rng(0)
    lo, hi = span_s
    obs = float(_nearest_distance(jumps, ev).mean())
    perm = np.empty(n_permutations)
    for k in range(n_permutations):
        fake = np.sort(rng.uniform(lo, hi, len(ev)))
        perm[k] = _nearest_distance(jumps, fake).mean()
    p = (1 + np.count_nonzero(perm <= obs)) / (1 + n_permutations)
    return CorrelationReport(float(p), obs, len(jumps), len(ev), n_permutations)


# -- output ------------------------------------------------------------------
def write_csv(path, header, rows):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def fig3a_rows(h):
    return [(h.edges[i], h.edges[i + 1], h.density["single"][i], h.density["dual"][i])
            for i in range(len(h.edges) - 1)]


def curve_rows(curves):
    rows = []
    for cls in ("dual", "top", "bottom", "single"):
        c = curves.get(cls)
        if c is None:
            continue
        for i in range(len(c.t_us)):
            rows.append((cls, i, c.t_us[i], c.mean[i], c.sigma[i], int(c.n[i])))
    return rows


def drift_rows(d):
    jumps = set(d.jumps)
    return [(d.start_s[i], d.mean[i], d.sigma[i], int(d.counts[i]), int(i in jumps))
            for i in range(len(d.start_s))]


HEADERS = {
    "fig3a": ("bin_low", "bin_high", "density_single", "density_dual"),
    "fig3b": ("capture_id", "dataset", "top", "bottom", "group"),
    "fig4a": ("class", "bin", "t_us", "mean_p1", "sigma", "n"),
    "fig4b": ("class", "bin", "t_us", "mean_p1", "sigma", "n"),
    "figC1": ("bin_start_s", "mean_p1", "sigma", "n", "jump"),
    "figC2": ("bin_start_s", "mean_p1", "sigma", "n", "jump"),
    "figC3": ("bin_start_s", "mean_p1", "sigma", "n", "jump"),
    "summary": ("quantity", "value"),
}


def save_svg(name, table, out_dir):
    """Static plot of one table; needs matplotlib (``plots`` extra)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    cols = set(table[0]) if table else set()
    if "density_single" in cols:
        lo = np.array([float(r["bin_low"]) for r in table])
        for key in ("density_single", "density_dual"):
            ax.step(lo, [float(r[key]) for r in table], where="post", label=key.split("_")[1])
        ax.set_xlabel("normalized energy")
        ax.set_ylabel("probability density")
    elif "group" in cols:
        for g in ("top-heavy", "bottom-heavy", "distributed"):
            sel = [r for r in table if r["group"] == g]
            ax.scatter([float(r["top"]) for r in sel], [float(r["bottom"]) for r in sel], s=4, label=g)
        ax.set_xlabel("top energy")
        ax.set_ylabel("bottom energy")
    elif "class" in cols:
        for cls in ("dual", "top", "bottom"):
            sel = [r for r in table if r["class"] == cls]
            if sel:
                ax.errorbar([float(r["t_us"]) for r in sel], [float(r["mean_p1"]) for r in sel],
                            [float(r["sigma"]) for r in sel], fmt=".", label=cls)
        ax.set_xlabel("time after trigger (us)")
        ax.set_ylabel("P(1)")
    elif "bin_start_s" in cols:
        ax.errorbar([float(r["bin_start_s"]) / 3600 for r in table], [float(r["mean_p1"]) for r in table],
                    [float(r["sigma"]) for r in table], fmt=".")
        ax.set_xlabel("run time (h)")
        ax.set_ylabel("P(1)")
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    fig.tight_layout()
    path = Path(out_dir) / f"{name}.svg"
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    return path
