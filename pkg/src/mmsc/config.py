"""Run configuration: one TOML file, flag overrides, strict validation."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError
from .model import ModelConfig
from .synth import SynthConfig
from .trainer import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class DataPaths:
    edges: str | None = None
    embeddings: str | None = None
    truth: str | None = None


@dataclass
class JudgeOptions:
    kind: str = "oracle"
    command: str | None = None


@dataclass
class EvalOptions:
    n_groups: int = 10
    negatives: int = 1000


@dataclass
class ColdstartOptions:
    holdout: float = 0.1
    k: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    workers: int = 1
    data: DataPaths = field(default_factory=DataPaths)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    judge: JudgeOptions = field(default_factory=JudgeOptions)
    eval: EvalOptions = field(default_factory=EvalOptions)
    coldstart: ColdstartOptions = field(default_factory=ColdstartOptions)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if hasattr(v, "to_dict") else (
                asdict(v) if hasattr(v, "__dataclass_fields__") else v
            )
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def validate(self):
        self.synth.validate()
        self.model.validate()
        self.train.validate()
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.judge.kind not in ("oracle", "none", "always-yes", "always-no", "external"):
            raise ConfigError(f"judge.kind {self.judge.kind!r} is not supported")
        if self.judge.kind == "external" and not self.judge.command:
            raise ConfigError("judge.command is required for the external judge")
        if self.eval.n_groups < 1 or self.eval.negatives < 1:
            raise ConfigError("eval.n_groups and eval.negatives must be >= 1")
        if not 0 < self.coldstart.holdout < 1:
            raise ConfigError("coldstart.holdout must lie in (0, 1)")
        if self.coldstart.k < 1:
            raise ConfigError("coldstart.k must be >= 1")
        return self


_SECTIONS = {
    "data": DataPaths,
    "synth": SynthConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "judge": JudgeOptions,
    "eval": EvalOptions,
    "coldstart": ColdstartOptions,
}
_TOP = ("seed", "out", "workers")


def _build(cls, values, where):
    known = {f.name: f for f in fields(cls)}
    extra = sorted(set(values) - set(known))
    if extra:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(extra)}")
    for k, v in values.items():
        if isinstance(v, list):
            values[k] = tuple(v)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def from_mapping(data):
    data = dict(data)
    extra = sorted(set(data) - set(_SECTIONS) - set(_TOP))
    if extra:
        raise ConfigError(f"unknown top-level key(s): {', '.join(extra)}")
    kwargs = {k: data[k] for k in _TOP if k in data}
    for name, cls in _SECTIONS.items():
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[name] = _build(cls, dict(section), name)
    cfg = RunConfig(**kwargs)
    if "seed" in data:
        cfg = with_seed(cfg, cfg.seed, sections=data)
    return cfg


def with_seed(cfg, seed, sections=None):
    """Propagate the run seed to sections that do not set their own."""
    sections = sections or {}
    out = replace(cfg, seed=seed)
    for name in ("synth", "model", "train"):
        if "seed" not in sections.get(name, {}):
            setattr(out, name, replace(getattr(out, name), seed=seed))
    return out


def load_config(path=None):
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_mapping(data)


def override(cfg, section, **values):
    """Copy of ``cfg`` with ``values`` set in ``section`` (``None`` values skipped)."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    if section is None:
        return replace(cfg, **values)
    sub = getattr(cfg, section)
    known = {f.name for f in fields(sub)}
    extra = sorted(set(values) - known)
    if extra:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(extra)}")
    return replace(cfg, **{section: replace(sub, **values)})
