"""``mkidqubit`` command line: simulate | calibrate | detect | analyze | report.

Exit status: 0 success, 2 configuration error, 3 data error, 4 fit or
estimation error.
"""
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import OUTPUT_ENV, dump_config, load_config
from .errors import CalibrationError, DataError, MkidQubitError
from .records import (CALIBRATION, EVENTS, read_calibration, read_captures, write_calibration, write_captures,
                      write_records)

log = logging.getLogger("mkidqubit")


def _config(ctx_obj, extra_set=()):
    return load_config(ctx_obj.get("config"), tuple(ctx_obj.get("overrides", ())) + tuple(extra_set))


def _out_dir(explicit, cfg):
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(OUTPUT_ENV, cfg.output_dir))


@click.group()
@click.version_option(__version__)
@click.option("-c", "--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="INI run configuration.")
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
              help="Override one configuration key (repeatable).")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def cli(ctx, config_path, overrides, verbose):
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(message)s")
    ctx.obj = {"config": config_path, "overrides": overrides}


@cli.command()
@click.option("-o", "--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("-j", "--jobs", type=click.IntRange(1), default=None, help="Worker processes (default from config).")
@click.pass_obj
def simulate(obj, out, jobs):
    """Simulate every dataset and write capture and ground-truth event files."""
    from .simulate import simulate_run

    cfg = _config(obj)
    out = _out_dir(out, cfg)
    out.mkdir(parents=True, exist_ok=True)
    results = simulate_run(cfg, jobs)
    layout = cfg.geometry.layout()
    captures = [c for r in results for c in r.captures]
    header = {"datasets": [r.header() for r in results], "config": cfg.to_dict(),
              "n_channels": layout.n_channels, "trace_cycles": cfg.trigger.trigger_config().trace_cycles,
              "prebuffer_cycles": cfg.trigger.trigger_config().prebuffer_cycles}
    write_captures(out, cfg.run_id, header, captures, layout.n_channels, header["trace_cycles"])
    truth = [dict(row, dataset=r.name) for r in results for row in r.truth]
    write_records(out / EVENTS, "events", cfg.run_id,
                  {"datasets": [{"name": r.name, "n_generated": r.n_generated} for r in results]}, truth)
    (out / "config.ini").write_text(dump_config(cfg))
    for r in results:
        n = {k: sum(1 for c in r.captures if c.classification.value == k) for k in ("dual", "top", "bottom")}
        click.echo(f"{r.name}: {len(r.captures)} captures {n} live {r.live_time_s:.1f} s")
    click.echo(f"run {cfg.run_id} -> {out}")


@cli.command()
@click.option("-o", "--out", type=click.Path(dir_okay=False), default=None, help="Calibration file.")
@click.option("--n-average", type=click.IntRange(1), default=1000, show_default=True)
@click.pass_obj
def calibrate(obj, out, n_average):
    """Temperature sweep of every MKID and spline calibration file."""
    from .simulate import calibrate_channels

    cfg = _config(obj)
    path = Path(out) if out else _out_dir(None, cfg) / CALIBRATION
    path.parent.mkdir(parents=True, exist_ok=True)
    curves = calibrate_channels(cfg, n_average=n_average)
    write_calibration(path, cfg.run_id, curves)
    click.echo(f"{len(curves)} channels calibrated -> {path}")


@cli.command()
@click.option("--stream", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Recorded (n_cycles, n_channels, 2) .npy stream to replay.")
@click.option("--dataset", default=None, help="Replay the full simulated stream of this dataset instead.")
@click.option("--cycles", type=click.IntRange(1), default=None, help="Replay at most this many cycles.")
@click.option("-o", "--out", type=click.Path(dir_okay=False), default=None, help="Trigger record file.")
@click.pass_obj
def detect(obj, stream, dataset, cycles, out):
    """Replay a readout stream through the trigger engine and list triggers."""
    from .daq import TriggerEngine, estimate_sigma

    cfg = _config(obj)
    layout = cfg.geometry.layout()
    if stream:
        data = np.load(stream, mmap_mode="r")
        if data.ndim != 3 or data.shape[1:] != (layout.n_channels, 2):
            raise DataError(f"stream must have shape (n, {layout.n_channels}, 2), got {data.shape}")
        n_bg = cfg.trigger.background_count
        sigma = estimate_sigma(np.asarray(data[:n_bg]), n_bg)
        engine = TriggerEngine(cfg.trigger.trigger_config(sigma), layout, n_bg)
        stop = len(data) if cycles is None else min(len(data), n_bg + cycles)
        for c0 in range(n_bg, stop, 65536):
            engine.feed(np.asarray(data[c0:min(stop, c0 + 65536)]))
    else:
        from .simulate import full_stream_replay

        ds = cfg.dataset(dataset) if dataset else cfg.datasets[0]
        engine = full_stream_replay(cfg, ds, cycles)
    rows = [{"cycle": t.cycle, "time_ns": t.time_ns, "channels": list(t.channels)} for t in engine.triggers]
    for cap, row in zip(engine.captures, rows):
        row["classification"] = cap.classification.value
        row["members"] = list(cap.member_channels)
    rows += [{"cycle": r.cycle, "rejected": r.reason} for r in engine.rejected]
    rows.sort(key=lambda r: r["cycle"])
    path = Path(out) if out else _out_dir(None, cfg) / "triggers.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_records(path, "triggers", cfg.run_id, {"n_cycles": engine.next_cycle}, rows)
    click.echo(f"{len(engine.triggers)} triggers, {len(engine.rejected)} rejected -> {path}")


@cli.command()
@click.option("--captures", "cap_dir", type=click.Path(file_okay=False), default=None,
              help="Directory holding captures.jsonl (default: output directory).")
@click.option("--calibration", "cal_path", type=click.Path(dir_okay=False), default=None)
@click.option("-o", "--out", type=click.Path(file_okay=False), default=None, help="Bundle directory.")
@click.option("--plots/--no-plots", default=False, help="Also write SVG plots (needs matplotlib).")
@click.pass_obj
def analyze(obj, cap_dir, cal_path, out, plots):
    """Rates, energy histograms, qubit curves, fits, f and drift tables."""
    from .config import AnalysisSettings, GeometryConfig
    from .pipeline import analyze as run_analysis, write_bundle
    from .radiation import SourceConfig

    base = _out_dir(None, _config(obj)) if cap_dir is None else Path(cap_dir)
    head, captures = read_captures(base)
    run_id = head["run_id"]
    cfgd = head["config"]
    n_channels = head["n_channels"]
    cal = Path(cal_path) if cal_path else base / CALIBRATION
    if not cal.is_file():
        raise CalibrationError(f"missing calibration for channels {list(range(n_channels))}: {cal} not found")
    _, curves = read_calibration(cal, run_id)
    geometry = GeometryConfig(**cfgd["geometry"])
    settings = AnalysisSettings(**cfgd["analysis"])
    source = SourceConfig(**cfgd["source"])
    summary = run_analysis(captures, curves, head["datasets"], settings, geometry.stack(), source,
                           geometry.layout(), head["prebuffer_cycles"], seed=cfgd["seed"])
    dest = Path(out) if out else base / "analysis"
    files = write_bundle(summary, dest, run_id, plots)
    click.echo(f"{len(files)} files -> {dest}")


@cli.command()
@click.argument("bundle", type=click.Path(file_okay=False), required=False)
@click.pass_obj
def report(obj, bundle):
    """Human-readable summary of an analysis bundle."""
    from .pipeline import format_report

    path = Path(bundle) if bundle else _out_dir(None, _config(obj)) / "analysis"
    click.echo(format_report(path))


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="mkidqubit", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(2 if isinstance(exc, click.UsageError) else exc.exit_code)
    except MkidQubitError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)
    return 0


if __name__ == "__main__":
    main()
