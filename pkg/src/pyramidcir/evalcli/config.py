"""Versioned pipeline configuration.

A config file is JSON with ``schema_version`` and ``seed`` at the top level and
one object per section (data, model, train, backbone, rep, refine, eval,
sweep).  Omitted keys take the defaults below; unknown keys are rejected.
Command-line overrides use ``section.key=value`` with JSON values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from ..errors import ConfigError

SCHEMA_VERSION = 1


@dataclass
class DataSection:
    n_triplets: int = 500
    n_val: int = 100
    pool_size: int = 200
    grid: int = 2
    subset_k: int = 6
    fill: float = 0.75


@dataclass
class ModelSection:
    n_layers: int = 2
    D: int = 64
    n_heads: int = 4
    P: int = 4
    M: int = 2
    max_seq_len: int = 256
    dtype: str = "float32"


@dataclass
class TrainSection:
    tau: float = 0.05
    lr: float = 1e-3
    epochs: int = 4
    batch_size: int = 32
    weight_decay: float = 0.01
    clip_norm: float = 1.0


@dataclass
class BackboneSection:
    n_layers: int = 4
    epochs: int = 8
    lr: float = 1e-3
    groups_per_batch: int = 4
    random_negatives: int = 1
    listwise_weight: float = 1.0
    path_fraction: float = 0.2


@dataclass
class RepSection:
    source: str = "backbone"  # backbone | matcher
    max_samples: int = 0  # 0 uses every training triplet


@dataclass
class RefineSection:
    lam: float = 0.06
    alpha: float = 0.6
    layers: str = "all"
    top_n: int = 100
    normalize: str = "minmax"
    renormalize_yes_no: bool = False


@dataclass
class EvalSection:
    ks: list = field(default_factory=lambda: [1, 5, 10, 50])
    subset_ks: list = field(default_factory=lambda: [1, 2, 3])


@dataclass
class SweepSection:
    alpha: list = field(default_factory=lambda: [0.0, 0.3, 0.6, 0.9, 1.2])
    lam: list = field(default_factory=lambda: [0.0, 0.02, 0.04, 0.06, 0.08, 0.1])
    M: list = field(default_factory=lambda: [1, 2, 3])
    inject_position: list = field(default_factory=lambda: ["first", "middle", "last", "all"])


_SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainSection,
             "backbone": BackboneSection, "rep": RepSection, "refine": RefineSection,
             "eval": EvalSection, "sweep": SweepSection}


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    rep: RepSection = field(default_factory=RepSection)
    refine: RefineSection = field(default_factory=RefineSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        cfg = cls()
        for key, value in d.items():
            if key == "seed":
                cfg.seed = _coerce(int, value, "seed")
                continue
            if key not in _SECTIONS:
                raise ConfigError(f"unknown config section {key!r}")
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            section = getattr(cfg, key)
            for k, v in value.items():
                _set(section, key, k, v)
        return cfg

    def override(self, assignments: Sequence[str]) -> "PipelineConfig":
        """Apply ``section.key=value`` (or ``seed=value``) assignments in place."""
        for a in assignments:
            if "=" not in a:
                raise ConfigError(f"override {a!r} is not of the form section.key=value")
            path, raw = a.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            if path == "seed":
                self.seed = _coerce(int, value, "seed")
                continue
            sec, _, key = path.partition(".")
            if sec not in _SECTIONS or not key:
                raise ConfigError(f"unknown config key {path!r}")
            _set(getattr(self, sec), sec, key, value)
        return self

    def validate(self) -> "PipelineConfig":
        """Range checks that can be made without running anything."""
        r = self.refine
        if not 0.0 <= r.lam <= 1.0:
            raise ConfigError(f"refine.lam must lie in [0, 1], got {r.lam}")
        if not r.alpha >= 0:
            raise ConfigError(f"refine.alpha must be >= 0, got {r.alpha}")
        if r.top_n < 1:
            raise ConfigError("refine.top_n must be >= 1")
        if r.normalize not in ("none", "minmax", "affine"):
            raise ConfigError(f"refine.normalize must be none, minmax or affine, got {r.normalize!r}")
        if self.rep.source not in ("backbone", "matcher"):
            raise ConfigError(f"rep.source must be backbone or matcher, got {self.rep.source!r}")
        if self.model.dtype not in ("float32", "float64"):
            raise ConfigError(f"model.dtype must be float32 or float64, got {self.model.dtype!r}")
        for name in ("ks", "subset_ks"):
            if any(not isinstance(k, int) or k < 1 for k in getattr(self.eval, name)):
                raise ConfigError(f"eval.{name} must hold integers >= 1")
        return self


def _coerce(kind, value, name):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is bool and not isinstance(value, bool):
        raise ConfigError(f"{name}: expected true/false, got {value!r}")
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{name}: expected an integer, got {value!r}")
    if not isinstance(value, kind):
        raise ConfigError(f"{name}: expected {kind.__name__}, got {value!r}")
    return value


def _set(section, sec_name: str, key: str, value) -> None:
    types = {f.name: f.type for f in fields(section)}
    if key not in types:
        raise ConfigError(f"unknown config key {sec_name}.{key}")
    kind = {"int": int, "float": float, "str": str, "bool": bool, "list": list}[types[key]]
    setattr(section, key, _coerce(kind, value, f"{sec_name}.{key}"))


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> PipelineConfig:
    if path is None:
        cfg = PipelineConfig()
    else:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        cfg = PipelineConfig.from_dict(raw)
    return cfg.override(overrides).validate()
