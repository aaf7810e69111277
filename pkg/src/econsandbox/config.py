"""Run configuration (one YAML file, every key optional) and run manifests."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data_dir: str | None = None          # directory written by ``generate``
    transactions: str | None = None      # overrides <data_dir>/transactions.csv
    products: str | None = None
    customers: str | None = None
    planted: str | None = None
    out_dir: str = "out"


@dataclass
class BackendConfig:
    name: str
    endpoint: str
    model: str
    temperature: float = 0.0
    timeout: float = 60.0
    max_retries: int = 2
    api_key_env: str | None = None


@dataclass
class DatasetConfig:
    k: int = 4                    # distractors per instance
    trends_window: int = 3
    limit: int | None = None      # first N eligible transactions; None = all


@dataclass
class RetailConfig:
    K: int = 3                    # samples per instance (stability needs >= 2)
    sigma: float = 0.0            # mock agent quantity noise
    strategies: bool = False
    use_style: bool = True
    diagnostics: bool = False     # add consistency loss and attention divergence per episode
    perturb_sigma: float = 0.05   # relative price shock for the consistency loss


@dataclass
class WholesaleConfig:
    rounds: int = 6
    templates_dir: str | None = None
    n_dialogues: int = 100


@dataclass
class MeanFieldConfig:
    enabled: bool = True
    W: int = 3
    eta: float = 0.5
    tol: float = 1e-6
    max_iter: int = 100
    runner: str = "linear"        # "linear" (analytic mock) or "agents"
    intercept: float = 1.0        # linear runner: q = intercept + slope * field
    slope: float = 0.5
    smoothing: float = 1.0


@dataclass
class CalibrationConfig:
    discount_edges: tuple = (0.05, 0.2)
    smoothing: float = 1.0
    min_count: int = 5
    w_min: float = 0.2
    w_max: float = 5.0
    delta: float = 0.15


@dataclass
class SymbolicConfig:
    budget: int = 100_000
    max_depth: int = 4
    population_size: int = 200
    refine: bool = False


@dataclass
class SplitConfig:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    mock: bool = False
    paths: PathsConfig = field(default_factory=PathsConfig)
    backends: list = field(default_factory=list)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    retail: RetailConfig = field(default_factory=RetailConfig)
    wholesale: WholesaleConfig = field(default_factory=WholesaleConfig)
    meanfield: MeanFieldConfig = field(default_factory=MeanFieldConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    symbolic: SymbolicConfig = field(default_factory=SymbolicConfig)
    split: SplitConfig | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def data_path(self, kind: str) -> Path | None:
        explicit = getattr(self.paths, kind)
        if explicit:
            return Path(explicit)
        if self.paths.data_dir:
            name = {"transactions": "transactions.csv", "products": "products.jsonl",
                    "customers": "customers.jsonl", "planted": "planted.json"}[kind]
            return Path(self.paths.data_dir) / name
        return None

    def check_paths(self) -> None:
        """Every explicitly referenced input must exist."""
        for kind in ("transactions", "products", "customers", "planted"):
            p = getattr(self.paths, kind)
            if p and not Path(p).exists():
                raise ConfigError(f"paths.{kind}: {p} does not exist")
        if self.paths.data_dir and not Path(self.paths.data_dir).is_dir():
            raise ConfigError(f"paths.data_dir: {self.paths.data_dir} is not a directory")
        if self.wholesale.templates_dir and not Path(self.wholesale.templates_dir).is_dir():
            raise ConfigError(f"wholesale.templates_dir: {self.wholesale.templates_dir} "
                              "is not a directory")


_SECTIONS = {
    "paths": PathsConfig, "dataset": DatasetConfig, "retail": RetailConfig,
    "wholesale": WholesaleConfig, "meanfield": MeanFieldConfig,
    "calibration": CalibrationConfig, "symbolic": SymbolicConfig, "split": SplitConfig,
}


def _section(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown option(s) {', '.join(unknown)}")
    try:
        obj = cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    if isinstance(obj, CalibrationConfig):
        obj.discount_edges = tuple(obj.discount_edges)
    return obj


def config_from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown option(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = None if value is None and key == "split" else \
                _section(_SECTIONS[key], value or {}, key)
        elif key == "backends":
            kwargs[key] = [_section(BackendConfig, b, f"backends[{i}]")
                           for i, b in enumerate(value or [])]
        else:
            kwargs[key] = value
    cfg = RunConfig(**kwargs)
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed must be an integer")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the YAML file at ``path``, then ``overrides`` (top-level or dotted keys)."""
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for key, value in (overrides or {}).items():
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    cfg = config_from_dict(raw)
    cfg.check_paths()
    return cfg


def config_hash(cfg: RunConfig) -> str:
    """Hash of every option that can change results (the output directory cannot)."""
    d = cfg.to_dict()
    d["paths"].pop("out_dir")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Provenance for one command invocation.  Only the timestamps vary between reruns."""

    run_id: str
    command: str
    config_hash: str
    started: str = field(default_factory=_now)
    finished: str | None = None
    versions: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def start(cls, command: str, cfg: RunConfig) -> "RunManifest":
        h = config_hash(cfg)
        versions = {}
        for dist in ("artifact", "numpy", "scikit-learn", "sympy", "httpx", "PyYAML"):
            try:
                versions[dist] = metadata.version(dist)
            except metadata.PackageNotFoundError:
                versions[dist] = None
        return cls(run_id=f"{command}-{h[:12]}", command=command, config_hash=h,
                   versions=versions)

    def record(self, path) -> None:
        self.outputs[os.path.basename(str(path))] = file_digest(path)

    def finish(self, path) -> None:
        self.finished = _now()
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=1, sort_keys=True)
