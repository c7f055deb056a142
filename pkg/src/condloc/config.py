"""Run configuration: one JSON document, every section optional.

Unknown keys and ill-typed values are rejected with the dotted key path.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, MiningError
from .evaluation import EvalConfig
from .mining import MiningConfig
from .model import NetworkConfig
from .retrieval import RetrievalConfig
from .synthworld import DEFAULT_CONDITIONS, ConditionProfile, DatasetConfig, WorldConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    world: WorldConfig = field(default_factory=WorldConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    conditions: list = field(default_factory=lambda: [dataclasses.asdict(c) for c in DEFAULT_CONDITIONS])
    network: NetworkConfig = field(default_factory=NetworkConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    @property
    def condition_profiles(self) -> tuple[ConditionProfile, ...]:
        return tuple(_profile(c, f"conditions[{i}]") for i, c in enumerate(self.conditions))

    def validate(self) -> "RunConfig":
        profiles = self.condition_profiles
        names = [p.name for p in profiles]
        if not names:
            raise ConfigError("conditions", "at least the reference condition is required")
        if len(set(names)) != len(names):
            raise ConfigError("conditions", "condition names must be unique")
        if not profiles[0].is_identity:
            raise ConfigError("conditions[0]", "the first (reference) condition must be the identity transform")
        for q in self.dataset.query_conditions:
            if q not in names:
                raise ConfigError("dataset.query_conditions", f"{q!r} is not a declared condition")
        self.network.validate(names)
        try:
            self.mining.validate()
        except MiningError as exc:
            raise ConfigError("mining", str(exc)) from None
        if self.mining.reference_resample_count > self.dataset.reference_count:
            raise ConfigError("mining.reference_resample_count", "exceeds dataset.reference_count")
        self.training.validate()
        if self.dataset.resolution < 16:
            raise ConfigError("dataset.resolution", "must be >= 16")
        if not self.retrieval.scales or any(s <= 0 for s in self.retrieval.scales):
            raise ConfigError("retrieval.scales", "must be non-empty and positive")
        if self.retrieval.top_k < 1:
            raise ConfigError("retrieval.top_k", "must be >= 1")
        for i, b in enumerate(self.evaluation.bins):
            if len(b) != 2 or b[0] <= 0 or b[1] <= 0:
                raise ConfigError(f"evaluation.bins[{i}]", "expected a positive [meters, degrees] pair")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """SHA-256 of the canonical JSON, ignoring where outputs are written."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, **sections) -> "RunConfig":
        """Copy with ``section={key: value}`` or top-level ``key=value`` overrides."""
        d = self.to_dict()
        for k, v in sections.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k].update(v)
            else:
                d[k] = v
        return from_dict(d)


def _profile(d, key) -> ConditionProfile:
    if isinstance(d, ConditionProfile):
        return d
    if not isinstance(d, dict):
        raise ConfigError(key, "expected an object")
    known = {f.name for f in dataclasses.fields(ConditionProfile)}
    for k in d:
        if k not in known:
            raise ConfigError(f"{key}.{k}", "unknown key")
    if "name" not in d:
        raise ConfigError(f"{key}.name", "required")
    return ConditionProfile(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def _check_type(key: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(key, f"expected {type(default).__name__}, got {type(value).__name__}")
    if isinstance(default, float) and not isinstance(value, bool):
        return float(value)
    return value


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    defaults = cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        key = f"{prefix}.{k}" if prefix else k
        if k not in fields:
            raise ConfigError(key, "unknown key")
        default = getattr(defaults, k)
        if dataclasses.is_dataclass(default):
            kwargs[k] = _build(type(default), v, key)
        else:
            kwargs[k] = _check_type(key, copy.deepcopy(v), default)
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    if "conditions" in data:
        if not isinstance(data["conditions"], list):
            raise ConfigError("conditions", "expected a list")
        cfg.conditions = [dataclasses.asdict(_profile(c, f"conditions[{i}]")) for i, c in enumerate(data["conditions"])]
    return cfg.validate()


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("<file>", f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"malformed JSON in {path}: {exc}") from None
    return from_dict(data)


def dump_config(cfg: RunConfig, path=None) -> str:
    text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
