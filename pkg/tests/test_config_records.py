import numpy as np
import pytest

from mkidqubit import SCHEMA_VERSION
from mkidqubit.calib import build_calibration
from mkidqubit.config import OUTPUT_ENV, Dataset, RunConfig, dump_config, load_config, parse_datasets
from mkidqubit.daq import CaptureRecord, EventClass
from mkidqubit.errors import ConfigError, DataError
from mkidqubit.mkid import MKIDConfig, arc_points
from mkidqubit.qubit import ShotRecord
from mkidqubit.records import (
    read_calibration,
    read_captures,
    read_records,
    write_calibration,
    write_captures,
    write_records,
)


def test_default_config_round_trips(tmp_path):
    cfg = RunConfig()
    p = tmp_path / "run.ini"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    assert load_config(p).run_id == cfg.run_id


def test_overrides_take_precedence(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[run]\nseed = 5\n[qubit]\nt1_base_us = 30\n")
    cfg = load_config(p, ["run.seed=9", "source.muon_flux=0.02", "run.datasets=t1:10, g=ground:5"])
    assert cfg.seed == 9
    assert cfg.qubit.t1_base_us == 30.0
    assert cfg.source.muon_flux == 0.02
    assert cfg.datasets == (Dataset("t1", "t1", 10.0), Dataset("g", "ground", 5.0))


def test_run_id_tracks_data_relevant_fields():
    a = RunConfig()
    assert RunConfig(jobs=4, output_dir="elsewhere").run_id == a.run_id
    assert RunConfig(seed=1).run_id != a.run_id


@pytest.mark.parametrize("text", [
    "[run]\ncolour = red\n",
    "[qubit]\nt3_base_us = 1\n",
    "[fridge]\nbase = 10\n",
    "[mkid]\nphase0 = 1.0\n",
    "[run]\nschema_version = 99\n",
    "[run]\nseed = abc\n",
    "[source]\nmuon_flux = lots\n",
])
def test_bad_config_rejected(tmp_path, text):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


def test_missing_file_and_bad_override(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")
    with pytest.raises(ConfigError):
        load_config(None, ["seed=3"])


def test_output_dir_from_environment(monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, "/tmp/somewhere")
    assert load_config().output_dir == "/tmp/somewhere"
    assert load_config(None, ["run.output_dir=here"]).output_dir == "here"


def test_dataset_parsing():
    assert parse_datasets("t1:43200") == (Dataset("t1", "t1", 43200.0),)
    with pytest.raises(ConfigError):
        parse_datasets("t1")
    with pytest.raises(ConfigError):
        parse_datasets("x=rabi:10")
    with pytest.raises(ConfigError):
        RunConfig(datasets=(Dataset("a", "t1", 1.0), Dataset("a", "t2", 1.0)))


def test_record_header_checks(tmp_path):
    p = tmp_path / "r.jsonl"
    write_records(p, "events", "abc", {}, [{"x": 1}])
    head, rows = read_records(p, "events", "abc")
    assert head["schema_version"] == SCHEMA_VERSION and rows == [{"x": 1}]
    with pytest.raises(DataError, match="run id"):
        read_records(p, "events", "other")
    with pytest.raises(DataError):
        read_records(p, "captures")
    text = p.read_text().replace(f'"schema_version":{SCHEMA_VERSION}', '"schema_version":0')
    p.write_text(text)
    with pytest.raises(DataError, match="schema"):
        read_records(p, "events")
    p.write_text("")
    with pytest.raises(DataError):
        read_records(p, "events")


def test_captures_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    caps = []
    for k in range(3):
        caps.append(CaptureRecord(100 * k, 800_000 * k, 800_000 * k - 16_000, rng.normal(size=(18, 92, 2)),
                                  rng.normal(size=(18, 2)), (1,), (1, 12), EventClass.DUAL, capture_id=k,
                                  shots=[ShotRecord("t1", 12.25, 1, 7)], truth_event_id=7,
                                  truth_event_ids=(7,), dataset="t1", dead_until_ns=800_000 * k + 712_000))
    write_captures(tmp_path, "rid", {"n": 3}, caps, 18, 92)
    head, back = read_captures(tmp_path, "rid")
    assert head["n"] == 3
    for a, b in zip(caps, back):
        assert b.trigger_time_ns == a.trigger_time_ns and b.classification is a.classification
        assert b.member_channels == a.member_channels and b.shots[0].outcome == 1
        assert np.allclose(b.traces, a.traces, rtol=1e-6)
        assert np.allclose(b.reference, a.reference, atol=1e-12)
    (tmp_path / "captures_traces.npy").unlink()
    with pytest.raises(DataError):
        read_captures(tmp_path)


def test_calibration_round_trip(tmp_path):
    m = MKIDConfig()
    t = np.arange(10.0, 301.0, 10.0)
    curve = build_calibration(0, t, arc_points(m, t), [m.nominal.i, m.nominal.q])
    p = tmp_path / "cal.jsonl"
    write_calibration(p, "rid", {0: curve})
    _, back = read_calibration(p, "rid")
    assert np.array_equal(back[0].temperatures, curve.temperatures)
    assert np.allclose(back[0](np.linspace(10, 300, 50)), curve(np.linspace(10, 300, 50)), atol=1e-15)
