"""Run configuration: one INI file, every key documented and validated.

Sections map onto the model blocks (``geometry``, ``source``, ``mkid``,
``qubit``, ``trigger``, ``analysis``) plus ``run`` for the seed, datasets and
output directory. Unknown sections or keys are rejected. ``overrides`` of the
form ``section.key=value`` take precedence over the file.
"""
import configparser
from dataclasses import asdict, dataclass, field, fields, replace
import hashlib
import json
import math
import os
from pathlib import Path

from . import SCHEMA_VERSION
from .daq import ChannelLayout, TriggerConfig
from .errors import ConfigError
from .geometry import DEFAULT_LATERAL_MM, DEFAULT_THICKNESS_MM, StackGeometry
from .mkid import MKIDConfig
from .qubit import KINDS, QubitModel
from .radiation import SourceConfig

OUTPUT_ENV = "MKIDQUBIT_OUTPUT_DIR"


@dataclass(frozen=True)
class GeometryConfig:
    lateral_mm: float = DEFAULT_LATERAL_MM
    thickness_mm: float = DEFAULT_THICKNESS_MM
    gap_mm: float = None  # None: gap giving the default opening angle
    pixel_rows: int = 3
    pixel_cols: int = 3

    def stack(self):
        return StackGeometry.build(self.lateral_mm, self.thickness_mm, self.gap_mm,
                                   (self.pixel_rows, self.pixel_cols))

    def layout(self):
        n = self.pixel_rows * self.pixel_cols
        return ChannelLayout(n, n)


@dataclass(frozen=True)
class TriggerSettings:
    threshold: float = 8.0
    background_count: int = 10000
    prebuffer_us: float = 15.0
    window_us: float = 700.0
    baseline_cycles: int = 64
    cycle_ns: int = 8000
    dead_time_us: float = None
    detection_efficiency: float = 1.0

    def trigger_config(self, sigma=None):
        return TriggerConfig(sigma=sigma, **asdict(self))


@dataclass(frozen=True)
class AnalysisSettings:
    energy_bins: int = 20
    cluster_low: float = 0.25
    cluster_high: float = 0.75
    drift_bin_s: float = 1080.0  # about 18 minutes
    jump_k: float = 5.0
    n_bootstrap: int = 200
    first_bin_us: float = 20.0
    late_shots_us: float = 400.0


@dataclass(frozen=True)
class Dataset:
    name: str
    kind: str
    duration_s: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"dataset {self.name!r}: unknown kind {self.kind!r}")
        if not (self.duration_s >= 0 and math.isfinite(self.duration_s)):
            raise ConfigError(f"dataset {self.name!r}: duration must be a non-negative number")


DEFAULT_DATASETS = (Dataset("t1", "t1", 43200.0), Dataset("t2", "t2", 79200.0),
                    Dataset("ground", "ground", 79200.0))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 20240601
    datasets: tuple = DEFAULT_DATASETS
    output_dir: str = "mkidqubit-out"
    jobs: int = 1
    rotation_drift_deg: float = 5.0  # per-dataset IQ rotation drawn from +-this
    schema_version: int = SCHEMA_VERSION
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    mkid: MKIDConfig = field(default_factory=MKIDConfig)
    qubit: QubitModel = field(default_factory=QubitModel)
    trigger: TriggerSettings = field(default_factory=TriggerSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)

    def __post_init__(self):
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError("dataset names must be unique")

    def with_datasets(self, *datasets):
        return replace(self, datasets=tuple(datasets))

    def dataset(self, name):
        for d in self.datasets:
            if d.name == name:
                return d
        raise ConfigError(f"no dataset named {name!r}")

    def to_dict(self):
        d = asdict(self)
        d["datasets"] = [asdict(x) for x in self.datasets]
        d.pop("output_dir")
        d.pop("jobs")
        return d

    @property
    def run_id(self):
        """Content hash of everything that affects simulated data."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


BLOCKS = {
    "geometry": GeometryConfig,
    "source": SourceConfig,
    "mkid": MKIDConfig,
    "qubit": QubitModel,
    "trigger": TriggerSettings,
    "analysis": AnalysisSettings,
}
# per-channel values are derived from the seed, not configured
_MKID_FIXED = {"channel", "phase0"}
RUN_KEYS = {"seed", "datasets", "output_dir", "jobs", "rotation_drift_deg", "schema_version"}


def parse_datasets(text):
    """``"t1:43200, t2:79200"`` or ``"name=kind:seconds"`` entries."""
    out = []
    for item in (s.strip() for s in text.split(",")):
        if not item:
            continue
        name, _, rest = item.partition("=")
        if not rest:
            rest, name = name, name.split(":")[0]
        kind, sep, dur = rest.partition(":")
        if not sep:
            raise ConfigError(f"dataset entry {item!r} must look like kind:seconds")
        try:
            out.append(Dataset(name.strip(), kind.strip(), float(dur)))
        except ValueError:
            raise ConfigError(f"dataset entry {item!r}: duration is not a number") from None
    return tuple(out)


def format_datasets(datasets):
    return ", ".join(f"{d.name}={d.kind}:{d.duration_s:g}" for d in datasets)


def _convert(cls, key, text):
    ftype = {f.name: f for f in fields(cls)}[key]
    default = ftype.default
    text = text.strip()
    if text.lower() in ("none", ""):
        return None
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"{cls.__name__}.{key}: cannot parse {text!r}") from None


def _block_keys(name):
    keys = {f.name for f in fields(BLOCKS[name]) if not f.name.startswith("_")}
    if name == "mkid":
        keys -= _MKID_FIXED
    return keys


def load_config(path=None, overrides=()):
    """RunConfig from an optional INI file plus ``section.key=value`` overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            cp.read(p)
        except configparser.Error as exc:
            raise ConfigError(f"config file {p}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        sec, dot, k = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp.set(sec, k, value)

    run_kw, blocks = {}, {}
    for sec in cp.sections():
        if sec == "run":
            for k, v in cp.items(sec):
                if k not in RUN_KEYS:
                    raise ConfigError(f"unknown key run.{k}")
                if k == "datasets":
                    run_kw[k] = parse_datasets(v)
                elif k in ("output_dir",):
                    run_kw[k] = v.strip()
                elif k == "rotation_drift_deg":
                    run_kw[k] = float(v)
                else:
                    try:
                        run_kw[k] = int(v)
                    except ValueError:
                        raise ConfigError(f"run.{k}: expected an integer, got {v!r}") from None
            continue
        if sec not in BLOCKS:
            raise ConfigError(f"unknown config section [{sec}]")
        allowed = _block_keys(sec)
        kw = {}
        for k, v in cp.items(sec):
            if k not in allowed:
                raise ConfigError(f"unknown key {sec}.{k}")
            kw[k] = _convert(BLOCKS[sec], k, v)
        blocks[sec] = BLOCKS[sec](**kw)

    if run_kw.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"config schema version {run_kw['schema_version']} is not {SCHEMA_VERSION}")
    if OUTPUT_ENV in os.environ and "output_dir" not in run_kw:
        run_kw["output_dir"] = os.environ[OUTPUT_ENV]
    return RunConfig(**run_kw, **blocks)


def dump_config(cfg):
    """INI text that :func:`load_config` reads back to an equal RunConfig."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {
        "seed": str(cfg.seed),
        "datasets": format_datasets(cfg.datasets),
        "output_dir": cfg.output_dir,
        "jobs": str(cfg.jobs),
        "rotation_drift_deg": repr(cfg.rotation_drift_deg),
        "schema_version": str(cfg.schema_version),
    }
    for name in BLOCKS:
        block = getattr(cfg, name)
        cp[name] = {k: ("none" if getattr(block, k) is None else repr(getattr(block, k)))
                    for k in sorted(_block_keys(name))}
    from io import StringIO

    buf = StringIO()
    cp.write(buf)
    return buf.getvalue()
