"""Run configuration: nested dataclasses with a strict JSON surface.

A run file is plain JSON mirroring the dataclass tree below.  Every key is
optional (defaults apply) but unknown keys are rejected with their full
dotted path, so typos cannot silently fall back to defaults.  The JSON
schema committed next to this module is generated from the same dataclass
tree; a test keeps the two in sync.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from importlib import resources

from .distill import DistillConfig
from .errors import ConfigError
from .heads import HeadConfig

SCHEMA_RESOURCE = "runconfig.schema.json"


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic field geometry; generation details live with the generator."""
    cells_per_field: int = 2000
    height: int = 1536
    width: int = 1536
    channels: int = 3
    k_env: int = 25

    def __post_init__(self):
        for name in ("cells_per_field", "height", "width", "channels",
                     "k_env"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass(frozen=True)
class CropsConfig:
    """View extraction geometry plus the dataset split fractions."""
    morph_side: int = 24
    env_side: int = 64
    box_margin: float = 2.0
    pretrain: float = 0.75
    finetune: float = 0.0
    test: float = 0.25

    def __post_init__(self):
        if self.morph_side < 2 or self.env_side < 2:
            raise ConfigError("view sides must be at least 2")
        if self.box_margin < 0:
            raise ConfigError("box_margin must be nonnegative")
        parts = (self.pretrain, self.finetune, self.test)
        if any(p < 0 for p in parts):
            raise ConfigError("split fractions must be nonnegative")
        if abs(sum(parts) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {parts}")


@dataclass(frozen=True)
class EvalConfig:
    n_clusters: int | None = None
    recall_ks: tuple[int, ...] = (1, 5, 10)
    kmeans_restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters is not None and self.n_clusters < 2:
            raise ConfigError("n_clusters must be at least 2")
        if len(self.recall_ks) == 0 or any(k < 1 for k in self.recall_ks):
            raise ConfigError("recall_ks must be positive")
        if self.kmeans_restarts < 1:
            raise ConfigError("kmeans_restarts must be positive")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    crops: CropsConfig = field(default_factory=CropsConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


# -- dict and JSON conversion --------------------------------------------------

def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _from_value(hint, value, path: str):
    origin = typing.get_origin(hint)
    if origin in (types.UnionType, typing.Union):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _from_value(args[0], value, path)
    if dataclasses.is_dataclass(hint):
        return _dataclass_from_dict(hint, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be an array, got {value!r}")
        item_hints = typing.get_args(hint)
        if len(item_hints) == 2 and item_hints[1] is Ellipsis:
            return tuple(_from_value(item_hints[0], v, f"{path}[{i}]")
                         for i, v in enumerate(value))
        if len(value) != len(item_hints):
            raise ConfigError(f"{path} must have {len(item_hints)} entries")
        return tuple(_from_value(h, v, f"{path}[{i}]")
                     for i, (h, v) in enumerate(zip(item_hints, value)))
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    raise ConfigError(f"{path} has unsupported type {hint!r}")


def _dataclass_from_dict(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'} must be an object, got {d!r}")
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown config key {where!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in d:
            sub = f"{path}.{f.name}" if path else f.name
            kwargs[f.name] = _from_value(hints[f.name], d[f.name], sub)
    return cls(**kwargs)


def config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(d: dict) -> RunConfig:
    return _dataclass_from_dict(RunConfig, d, "")


def to_json(config: RunConfig) -> str:
    return json.dumps(config_to_dict(config), sort_keys=True, indent=2) + "\n"


def from_json(text: str) -> RunConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(d)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return from_json(fh.read())


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_json(config))


def config_hash(config: RunConfig) -> str:
    """Stable 16-hex-digit digest of the fully resolved configuration."""
    canonical = json.dumps(config_to_dict(config), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# -- JSON schema ---------------------------------------------------------------

def _schema_for(hint) -> dict:
    origin = typing.get_origin(hint)
    if origin in (types.UnionType, typing.Union):
        args = typing.get_args(hint)
        inner = [a for a in args if a is not type(None)]
        base = _schema_for(inner[0])
        base["type"] = [base["type"], "null"]
        return base
    if dataclasses.is_dataclass(hint):
        return _dataclass_schema(hint)
    if origin is tuple:
        item_hints = typing.get_args(hint)
        if len(item_hints) == 2 and item_hints[1] is Ellipsis:
            return {"type": "array", "items": _schema_for(item_hints[0]),
                    "minItems": 1}
        return {"type": "array",
                "items": _schema_for(item_hints[0]),
                "minItems": len(item_hints), "maxItems": len(item_hints)}
    if hint is float:
        return {"type": "number"}
    if hint is int:
        return {"type": "integer"}
    if hint is str:
        return {"type": "string"}
    raise ConfigError(f"no schema mapping for {hint!r}")


def _dataclass_schema(cls) -> dict:
    hints = _hints(cls)
    props = {f.name: _schema_for(hints[f.name])
             for f in dataclasses.fields(cls)}
    return {"type": "object", "properties": props,
            "additionalProperties": False}


def schema_dict() -> dict:
    """Draft-07 schema equivalent to the strict parser above."""
    schema = {"$schema": "http://json-schema.org/draft-07/schema#",
              "title": "madkit run configuration"}
    schema.update(_dataclass_schema(RunConfig))
    return schema


def load_committed_schema() -> dict:
    text = resources.files("madkit").joinpath(SCHEMA_RESOURCE).read_text(
        encoding="utf-8")
    return json.loads(text)
