"""Versioned line-delimited record files.

Every file starts with a header line carrying ``schema_version`` and
``run_id``. Capture traces live in a float32 ``.npy`` sidecar next to the
capture file, in capture order.
"""
import json
from pathlib import Path

import numpy as np

from . import SCHEMA_VERSION
from .daq import CaptureRecord, EventClass
from .errors import DataError
from .qubit import ShotRecord

CAPTURES = "captures.jsonl"
TRACES = "captures_traces.npy"
EVENTS = "events.jsonl"
CALIBRATION = "calibration.jsonl"


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_records(path, header_kind, run_id, header, rows):
    head = {"record": "header", "file": header_kind, "schema_version": SCHEMA_VERSION, "run_id": run_id}
    head.update(header)
    with Path(path).open("w") as fh:
        fh.write(_dumps(head) + "\n")
        for r in rows:
            fh.write(_dumps(r) + "\n")


def read_records(path, header_kind, run_id=None):
    """``(header, rows)``; rejects a wrong file kind, schema version or run id."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{p} not found")
    with p.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{p} is empty (no header)")
    try:
        head = json.loads(lines[0])
        rows = [json.loads(x) for x in lines[1:] if x]
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: malformed record ({exc})") from None
    if head.get("record") != "header" or head.get("file") != header_kind:
        raise DataError(f"{p} is not a {header_kind} file")
    if head.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{p}: schema version {head.get('schema_version')} != {SCHEMA_VERSION}")
    if run_id is not None and head.get("run_id") != run_id:
        raise DataError(f"{p}: run id {head.get('run_id')} does not match {run_id}")
    return head, rows


def capture_to_row(c):
    return {
        "capture_id": c.capture_id,
        "dataset": c.dataset,
        "trigger_cycle": c.trigger_cycle,
        "trigger_time_ns": c.trigger_time_ns,
        "trace_start_ns": c.trace_start_ns,
        "cycle_ns": c.cycle_ns,
        "dead_until_ns": c.dead_until_ns,
        "classification": EventClass(c.classification).value,
        "trigger_channels": list(c.trigger_channels),
        "member_channels": list(c.member_channels),
        "truth_event_id": c.truth_event_id,
        "truth_event_ids": list(c.truth_event_ids),
        "reference": np.asarray(c.reference, dtype=float).round(12).tolist(),
        "shots": [[s.kind, round(s.time_us, 9), s.outcome] for s in c.shots],
    }


def row_to_capture(r, traces):
    return CaptureRecord(
        trigger_cycle=r["trigger_cycle"],
        trigger_time_ns=r["trigger_time_ns"],
        trace_start_ns=r["trace_start_ns"],
        traces=traces,
        reference=np.asarray(r["reference"]),
        trigger_channels=tuple(r["trigger_channels"]),
        member_channels=tuple(r["member_channels"]),
        classification=EventClass(r["classification"]),
        capture_id=r["capture_id"],
        shots=[ShotRecord(k, t, o, r["truth_event_id"]) for k, t, o in r["shots"]],
        truth_event_id=r["truth_event_id"],
        truth_event_ids=tuple(r["truth_event_ids"]),
        dataset=r["dataset"],
        dead_until_ns=r["dead_until_ns"],
        cycle_ns=r["cycle_ns"],
    )


def write_captures(out_dir, run_id, header, captures, n_channels, trace_cycles):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / CAPTURES, "captures", run_id, header, (capture_to_row(c) for c in captures))
    arr = np.zeros((len(captures), n_channels, trace_cycles, 2), dtype=np.float32)
    for k, c in enumerate(captures):
        arr[k] = c.traces
    np.save(out / TRACES, arr)


def read_captures(out_dir, run_id=None):
    """Header and captures (traces memory-mapped from the sidecar)."""
    out = Path(out_dir)
    head, rows = read_records(out / CAPTURES, "captures", run_id)
    tp = out / TRACES
    if not tp.is_file():
        raise DataError(f"{tp} not found")
    traces = np.load(tp, mmap_mode="r")
    if len(traces) != len(rows):
        raise DataError(f"{tp} holds {len(traces)} traces for {len(rows)} captures")
    return head, [row_to_capture(r, traces[k]) for k, r in enumerate(rows)]


def write_calibration(path, run_id, curves):
    rows = []
    for ch in sorted(curves):
        c = curves[ch]
        for t, (i, q) in zip(c.temperatures, c.iq):
            rows.append({"record": "knot", "channel": ch, "T_mK": float(t), "I": float(i), "Q": float(q)})
        rows.append({"record": "median", "channel": ch, "I": float(c.median[0]), "Q": float(c.median[1])})
    write_records(path, "calibration", run_id, {"n_channels": len(curves)}, rows)


def read_calibration(path, run_id=None):
    from .calib import build_calibration

    head, rows = read_records(path, "calibration", run_id)
    knots, medians = {}, {}
    for r in rows:
        if r["record"] == "knot":
            knots.setdefault(r["channel"], []).append((r["T_mK"], r["I"], r["Q"]))
        elif r["record"] == "median":
            medians[r["channel"]] = (r["I"], r["Q"])
    curves = {}
    for ch, k in knots.items():
        k = np.array(k)
        curves[ch] = build_calibration(ch, k[:, 0], k[:, 1:], medians.get(ch))
    return head, curves
