"""Experiment configuration: nested dataclasses with JSON round-tripping."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ConfigurationError

STRATEGIES = ("parallel-sfl", "random-cluster", "fixed-frequency", "single-cluster-sfl")
NONIID_PRESETS = (0, 1, 2, 4, 5, 10)


@dataclass
class FleetSection:
    num_workers: int = 40
    compute_spread: float = 10.0
    bandwidth_mbps: tuple = (1.0, 30.0)
    base_time: float = 0.05
    jitter: float = 0.05

    def validate(self):
        _check(self.num_workers >= 2, "fleet.num_workers", "must be >= 2")
        _check(self.compute_spread >= 1, "fleet.compute_spread", "must be >= 1")
        lo, hi = self.bandwidth_mbps
        _check(0 < lo <= hi, "fleet.bandwidth_mbps", "must be [low, high] with 0 < low <= high")
        _check(self.base_time > 0, "fleet.base_time", "must be > 0")
        _check(self.jitter >= 0, "fleet.jitter", "must be >= 0")


@dataclass
class DataSection:
    num_classes: int = 10
    samples_per_class: int = 300
    test_per_class: int = 100
    feature_dim: int = 32
    separation: float = 0.3
    stretch_rank: int = 8
    stretch_scale: float = 3.0
    noniid_level: float = 0.0
    concentration: float | None = None

    def validate(self):
        _check(self.num_classes >= 2, "data.num_classes", "must be >= 2")
        _check(self.samples_per_class >= 1, "data.samples_per_class", "must be >= 1")
        _check(self.test_per_class >= 1, "data.test_per_class", "must be >= 1")
        _check(self.feature_dim >= 2, "data.feature_dim", "must be >= 2")
        _check(self.separation > 0, "data.separation", "must be > 0")
        _check(0 <= self.stretch_rank <= self.feature_dim, "data.stretch_rank", "must be in [0, feature_dim]")
        _check(self.stretch_scale >= 0, "data.stretch_scale", "must be >= 0")
        _check(self.noniid_level >= 0, "data.noniid_level", "must be >= 0 (0 means IID)")
        _check(self.concentration is None or self.concentration > 0, "data.concentration", "must be > 0")


@dataclass
class ModelSection:
    hidden_dims: tuple = (128, 128)
    split_layer: int = 2
    activation: str = "tanh"
    lr: float = 0.1
    lr_decay: float = 0.993
    batch_size: int = 64
    top_ratio: float | None = None  # top/bottom compute-time ratio; None derives it from the layer sizes

    def validate(self):
        _check(len(self.hidden_dims) >= 1 and all(int(h) >= 1 for h in self.hidden_dims),
               "model.hidden_dims", "needs at least one positive width")
        _check(1 <= self.split_layer <= len(self.hidden_dims), "model.split_layer",
               f"must be in [1, {len(self.hidden_dims)}]")
        _check(self.activation in ("tanh", "linear"), "model.activation", "must be 'tanh' or 'linear'")
        _check(self.lr >= 0, "model.lr", "must be >= 0")
        _check(0 < self.lr_decay <= 1, "model.lr_decay", "must be in (0, 1]")
        _check(self.batch_size >= 1, "model.batch_size", "must be >= 1")
        _check(self.top_ratio is None or self.top_ratio > 0, "model.top_ratio", "must be > 0")


@dataclass
class ClusteringSection:
    lam: float = 0.5
    k: int | None = None
    per_worker_bandwidth_mbps: float = 2.0
    waiting_norm: float | None = None
    kl_norm: float | None = None
    refine_budget: int = 20_000
    alpha: float = 0.8

    def validate(self):
        _check(0 <= self.lam <= 1, "clustering.lam", "must be in [0, 1]")
        _check(self.k is None or self.k >= 1, "clustering.k", "must be >= 1")
        _check(self.per_worker_bandwidth_mbps > 0, "clustering.per_worker_bandwidth_mbps", "must be > 0")
        _check(self.waiting_norm is None or self.waiting_norm > 0, "clustering.waiting_norm", "must be > 0")
        _check(self.kl_norm is None or self.kl_norm > 0, "clustering.kl_norm", "must be > 0")
        _check(self.refine_budget >= 0, "clustering.refine_budget", "must be >= 0")
        _check(0 <= self.alpha <= 1, "clustering.alpha", "must be in [0, 1]")


@dataclass
class FrequencySection:
    tau_max: int = 20
    fixed_tau: int | None = None  # tau for the fixed-frequency baselines; None means tau_max

    def validate(self):
        _check(self.tau_max >= 1, "frequency.tau_max", "must be >= 1")
        _check(self.fixed_tau is None or self.fixed_tau >= 1, "frequency.fixed_tau", "must be >= 1")


@dataclass
class OutputSection:
    out_dir: str = "runs/default"
    count_bottom_distribution: bool = True
    write_plans: bool = True


@dataclass
class ExperimentConfig:
    fleet: FleetSection = field(default_factory=FleetSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    clustering: ClusteringSection = field(default_factory=ClusteringSection)
    frequency: FrequencySection = field(default_factory=FrequencySection)
    output: OutputSection = field(default_factory=OutputSection)
    rounds: int = 60
    strategy: str = "parallel-sfl"
    seed: int = 0
    max_workers: int = 1

    def validate(self) -> "ExperimentConfig":
        for section in (self.fleet, self.data, self.model, self.clustering, self.frequency):
            section.validate()
        _check(self.rounds >= 1, "rounds", "must be >= 1")
        _check(self.strategy in STRATEGIES, "strategy", f"must be one of {', '.join(STRATEGIES)}")
        _check(self.max_workers >= 1, "max_workers", "must be >= 1")
        k = self.clustering.k
        _check(k is None or k <= self.fleet.num_workers, "clustering.k", "must not exceed fleet.num_workers")
        return self

    @property
    def layer_dims(self) -> tuple:
        return (self.data.feature_dim, *[int(h) for h in self.model.hidden_dims], self.data.num_classes)

    @property
    def fixed_tau(self) -> int:
        return self.frequency.fixed_tau or self.frequency.tau_max

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return _build(cls, doc, "").validate()

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())


def _check(cond: bool, name: str, msg: str) -> None:
    if not cond:
        raise ConfigurationError(f"{name}: {msg}")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_TUPLE_FIELDS = {"bandwidth_mbps", "hidden_dims"}


def _build(cls, doc, prefix: str):
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{prefix or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigurationError(f"{prefix + '.' if prefix else ''}{unknown[0]}: unknown field")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in doc:
            continue
        value = doc[name]
        path = f"{prefix}.{name}" if prefix else name
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, path)
        elif name in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigurationError(f"{path}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = _coerce(value, current, path)
    return cls(**kwargs)


def _coerce(value, default, path):
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer")
        return value
    if isinstance(default, float) or default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string")
        return value
    return value


def scenario(name: str) -> ExperimentConfig:
    """Named presets: ``iid`` and ``noniid-p{1,2,4,5,10}``."""
    cfg = ExperimentConfig()
    if name == "iid":
        cfg.data.noniid_level = 0.0
    elif name.startswith("noniid-p"):
        try:
            p = int(name[len("noniid-p"):])
        except ValueError:
            p = -1
        if p not in NONIID_PRESETS or p == 0:
            raise ConfigurationError(f"unknown scenario {name!r}")
        cfg.data.noniid_level = float(p)
    else:
        raise ConfigurationError(f"unknown scenario {name!r}")
    return cfg


SCENARIOS = ("iid",) + tuple(f"noniid-p{p}" for p in NONIID_PRESETS if p)
