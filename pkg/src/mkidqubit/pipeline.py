"""Capture records + calibration -> analysis bundle (CSV tables, optional SVG) and report."""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import SCHEMA_VERSION
from .analysis import (HEADERS, acceptance_weighted_dual_flux, curve_rows, cycle_bin_edges, drift_rows,
                       drift_series, energy_histograms, event_drift_correlation, event_rates, fig3a_rows,
                       fit_recovery, misclassification_from_captures, post_event_population, save_svg,
                       shots_vs_runtime)
from .calib import estimate_rotation, medians_from_captures, normalized_from_peaks, peak_temperatures, require_curves
from .daq import EventClass
from .errors import DataError, EstimationError
from .qubit import DEFAULT_PERIOD_US, GROUND, T1, T2, default_schedule
from .rng import keyed_rng

DRIFT_TABLE = {T2: "figC1", T1: "figC2", GROUND: "figC3"}
CURVE_TABLE = {T1: "fig4a", T2: "fig4b", GROUND: "figC3_classes"}


@dataclass
class AnalysisSummary:
    values: dict = field(default_factory=dict)  # quantity -> number, in report order
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    fits: dict = field(default_factory=dict)
    rates: dict = field(default_factory=dict)
    misclassification: dict = field(default_factory=dict)
    drift: dict = field(default_factory=dict)
    histograms: object = None
    curves: dict = field(default_factory=dict)
    energies: dict = field(default_factory=dict)


def capture_energies(captures, curves, layout, prebuffer_cycles, band=(100.0, 300.0)):
    """Normalised top/bottom substrate energies after one rotation correction per dataset."""
    top = np.zeros(len(captures))
    bottom = np.zeros(len(captures))
    require_curves(curves, range(layout.n_channels))
    by_ds = {}
    for k, c in enumerate(captures):
        by_ds.setdefault(c.dataset, []).append(k)
    rotations = {}
    for ds, idx in by_ds.items():
        caps = [captures[k] for k in idx]
        med = medians_from_captures(caps, prebuffer_cycles)
        cal = np.array([curves[ch].median for ch in range(layout.n_channels)])
        rot = estimate_rotation(med, cal)
        rotations[ds] = rot.theta
        traces = np.stack([np.asarray(c.traces, dtype=float) for c in caps])
        norm = normalized_from_peaks(peak_temperatures(traces, curves, rot), band)
        top[idx] = norm[:, layout.channels("top")].mean(axis=1)
        bottom[idx] = norm[:, layout.channels("bottom")].mean(axis=1)
    return top, bottom, rotations


def analyze(captures, curves, datasets, settings, stack, source, layout, prebuffer_cycles,
            expected_mc=2_000_000, seed=0):
    """Full analysis of one run.

    ``datasets`` is the list of dataset header dicts (name, kind, live_time_s).
    """
    s = AnalysisSummary()
    v = s.values
    exp_dual, exp_dual_sigma = acceptance_weighted_dual_flux(stack, source.muon_flux, source.margin_factor,
                                                             expected_mc, keyed_rng(seed, "acceptance"))
    v["expected_muon_flux"] = source.muon_flux
    v["expected_dual_rate"] = exp_dual
    v["expected_dual_rate_mc_sigma"] = exp_dual_sigma

    area = stack.top.area_cm2
    by_ds = {d["name"]: [c for c in captures if c.dataset == d["name"]] for d in datasets}
    total_live = sum(d["live_time_s"] for d in datasets)
    pooled = event_rates(captures, total_live, area, {"dual": exp_dual})
    s.rates["all"] = pooled
    n_caps = len(captures)
    v["n_captures"] = n_caps
    v["dual_rate"] = pooled["dual"].rate
    v["dual_rate_sigma"] = pooled["dual"].sigma
    v["dual_rate_pull"] = pooled["dual"].pull if pooled["dual"].pull is not None else 0.0
    v["single_rate"] = pooled["single"].rate
    v["dual_fraction"] = pooled["dual"].count / n_caps if n_caps else 0.0

    for d in datasets:
        name = d["name"]
        r = event_rates(by_ds[name], d["live_time_s"], area, {"dual": exp_dual})
        s.rates[name] = r
        v[f"{name}.live_time_s"] = d["live_time_s"]
        for cls in ("dual", "top", "bottom"):
            v[f"{name}.n_{cls}"] = r[cls].count
        v[f"{name}.dual_rate"] = r["dual"].rate
        v[f"{name}.dual_rate_sigma"] = r["dual"].sigma

    # energies
    if captures:
        top, bottom, rots = capture_energies(captures, curves, layout, prebuffer_cycles)
        s.energies = {"top": top, "bottom": bottom, "rotation": rots}
        for ds, th in rots.items():
            v[f"{ds}.rotation_correction_rad"] = th
        h = energy_histograms([c.classification for c in captures], top, bottom, settings.energy_bins,
                              (settings.cluster_low, settings.cluster_high))
        s.histograms = h
        v["tail_mass_single"] = h.tail_mass("single")
        v["tail_mass_dual"] = h.tail_mass("dual")
        s.tables["fig3a"] = (HEADERS["fig3a"], fig3a_rows(h))
        duals = [c for c in captures if EventClass(c.classification) is EventClass.DUAL]
        s.tables["fig3b"] = (HEADERS["fig3b"], [(c.capture_id, c.dataset, p[0], p[1], g)
                                                for c, p, g in zip(duals, h.dual_pairs, h.dual_group)])
        for g in ("top-heavy", "bottom-heavy", "distributed"):
            v[f"dual_group.{g}"] = int(np.count_nonzero(h.dual_group == g))

    # qubit curves, fits, misclassification, drift per dataset
    for d in datasets:
        name, kind = d["name"], d["kind"]
        caps = by_ds[name]
        if not caps:
            continue
        v[f"{name}.kind"] = kind
        sched = default_schedule(kind)
        edges = cycle_bin_edges(DEFAULT_PERIOD_US[kind], sched.n_cycles, sched.latency_us[0])
        try:
            curves_k = post_event_population(caps, kind, edges)
        except DataError:
            curves_k = {}
        s.curves[name] = curves_k
        table = CURVE_TABLE[kind] if _first_of_kind(datasets, name, kind) else f"{CURVE_TABLE[kind]}_{name}"
        s.tables[table] = (HEADERS["fig4a"], curve_rows(curves_k))
        if kind in (T1, T2) and "dual" in curves_k:
            try:
                fit = fit_recovery(curves_k["dual"], settings.n_bootstrap, keyed_rng(seed, "bootstrap", name))
                s.fits[name] = fit
                v[f"{name}.tau_us"] = fit.tau_us
                v[f"{name}.tau_ci_low"] = fit.tau_ci[0]
                v[f"{name}.tau_ci_high"] = fit.tau_ci[1]
                v[f"{name}.recovery_amplitude"] = fit.amplitude
                v[f"{name}.recovery_baseline"] = fit.baseline
            except EstimationError as exc:
                v[f"{name}.tau_us"] = float("nan")
                s.fits[name] = exc
            try:
                est = misclassification_from_captures(caps, kind, d["live_time_s"], area, name)
                s.misclassification[name] = est
                v[f"{name}.f"] = est.f
                v[f"{name}.f_sigma"] = est.sigma_f
                v[f"{name}.corrected_flux"] = est.corrected_flux
            except (EstimationError, DataError):
                v[f"{name}.f"] = float("nan")
        t_s, o = shots_vs_runtime(caps, kind)
        if len(t_s):
            try:
                ds_series = drift_series(t_s, o, settings.drift_bin_s, kind, settings.jump_k, start_s=0.0)
            except DataError:
                continue
            s.drift[name] = ds_series
            tname = DRIFT_TABLE[kind] if _first_of_kind(datasets, name, kind) else f"{DRIFT_TABLE[kind]}_{name}"
            s.tables[tname] = (HEADERS[DRIFT_TABLE[kind]], drift_rows(ds_series))
            v[f"{name}.drift_jumps"] = len(ds_series.jumps)
            v[f"{name}.drift_relative_range"] = ds_series.relative_range
            if kind == GROUND:
                filled = ds_series.counts > 0
                v[f"{name}.min_ground_population"] = float(np.min(1 - ds_series.mean[filled]))
            ev_t = np.array([c.trigger_time_ns * 1e-9 for c in caps])
            rep = event_drift_correlation(ds_series.jump_times_s(), ev_t, (0.0, d["duration_s"]),
                                          rng=keyed_rng(seed, "permutation", name))
            v[f"{name}.jump_event_p_value"] = rep.p_value
    s.tables["summary"] = (HEADERS["summary"], list(v.items()))
    return s


def _first_of_kind(datasets, name, kind):
    return next(d["name"] for d in datasets if d["kind"] == kind) == name


def write_bundle(summary, out_dir, run_id, plots=False):
    """One CSV per table, each starting with a ``# schema_version=... run_id=...`` line."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    import csv

    written = []
    for name, (header, rows) in summary.tables.items():
        path = out / f"{name}.csv"
        with path.open("w", newline="") as fh:
            fh.write(f"# schema_version={SCHEMA_VERSION} run_id={run_id}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(x) for x in r])
        written.append(path)
    if plots:
        for name in summary.tables:
            if name != "summary":
                written.append(save_svg(name, read_table(out / f"{name}.csv", run_id)[1], out))
    return written


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def read_table(path, run_id=None):
    """``(meta, rows)`` of a bundle CSV; checks the schema version and optionally the run id."""
    import csv

    p = Path(path)
    if not p.is_file():
        raise DataError(f"{p} not found")
    with p.open(newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("#"):
            raise DataError(f"{p} has no schema header")
        meta = dict(kv.split("=", 1) for kv in first[1:].split())
        if int(meta.get("schema_version", -1)) != SCHEMA_VERSION:
            raise DataError(f"{p}: schema version {meta.get('schema_version')} != {SCHEMA_VERSION}")
        if run_id is not None and meta.get("run_id") != run_id:
            raise DataError(f"{p}: run id {meta.get('run_id')} does not match {run_id}")
        return meta, list(csv.DictReader(fh))


REPORT_LINES = (
    ("dual_rate", "dual rate (events/s/cm^2)"),
    ("dual_rate_sigma", "dual rate sigma"),
    ("expected_dual_rate", "expected dual rate (acceptance weighted)"),
    ("expected_muon_flux", "configured muon flux"),
    ("dual_fraction", "dual fraction of captures"),
    ("tail_mass_single", "single-event energy mass above 0.5"),
    ("tail_mass_dual", "dual-event energy mass above 0.5"),
)


def format_report(bundle_dir):
    """Plain-text comparison of measured and expected numbers, straight from summary.csv."""
    meta, rows = read_table(Path(bundle_dir) / "summary.csv")
    vals = {r["quantity"]: r["value"] for r in rows}
    lines = [f"run {meta.get('run_id')}  (schema {meta.get('schema_version')})"]
    for key, label in REPORT_LINES:
        if key in vals:
            lines.append(f"{label}: {vals[key]}")
    if "dual_rate" in vals and "expected_dual_rate" in vals:
        ratio = float(vals["dual_rate"]) / float(vals["expected_dual_rate"])
        lines.append(f"measured / expected dual rate: {ratio!r}")
    for key in sorted(vals):
        if key.endswith(".tau_us"):
            ds = key.split(".")[0]
            lines.append(f"tau_{vals.get(ds + '.kind', ds).upper()} [{ds}] (us): {vals[key]}  CI [{vals.get(ds + '.tau_ci_low')}, "
                         f"{vals.get(ds + '.tau_ci_high')}]")
    for key in sorted(vals):
        if key.endswith(".f"):
            ds = key.split(".")[0]
            lines.append(f"f [{ds}]: {vals[key]} +- {vals.get(ds + '.f_sigma')}  "
                         f"corrected flux: {vals.get(ds + '.corrected_flux')}")
    for key in sorted(vals):
        if key.endswith(".drift_jumps") or key.endswith(".min_ground_population") \
                or key.endswith(".jump_event_p_value") or key.endswith(".drift_relative_range"):
            lines.append(f"{key}: {vals[key]}")
    return "\n".join(lines)
