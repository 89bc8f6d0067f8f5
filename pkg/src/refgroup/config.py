"""Run configuration: flat ``section.key = value`` text files.

Full-scale reference values, kept for comparison and not used here:
image 480x480, visual channels 1024/512/256/128, word channels 768,
token channels 512, AdamW lr 1e-4, 50 epochs, batch 64.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .encoders import ConfigError


@dataclass
class DataConfig:
    image_size: int = 64
    n_train: int = 500
    n_val: int = 100
    n_test: int = 100
    min_objects: int = 2
    max_objects: int = 5
    unseen: tuple = ()           # shape names held out of training referents


@dataclass
class ModelConfig:
    n_tokens: int = 8
    token_dim: int = 32
    text_dim: int = 32
    visual_dims: tuple = (64, 32, 16, 8)
    tokens: str = "full"         # full | single | off
    grouping: str = "hard"       # hard | soft | none
    stages: str = "multi"        # multi | single
    affinity: str = "cosine"     # cosine | dot
    pooling: str = "mean"        # mean | sum
    coords: str = "on"           # on | off: coordinate planes into the image stem


@dataclass
class LossConfig:
    mode: str = "as-written"     # as-written | infonce
    contrastive: str = "on"      # on | off
    temperature: float = 0.1
    dice_eps: float = 1.0


@dataclass
class DecoderConfig:
    mode: str = "consecutive"    # consecutive | parallel


@dataclass
class TauConfig:
    mode: str = "learnable"      # learnable | fixed:<value>
    init: float = 1.0


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 30
    batch_size: int = 16
    threshold: float = 0.5
    augment: str = "on"         # on | off
    schedule: str = "cosine"    # constant | cosine


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    tau: TauConfig = field(default_factory=TauConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        m, lo = self.model, self.loss
        _choice("model.tokens", m.tokens, ("full", "single", "off"))
        _choice("model.grouping", m.grouping, ("hard", "soft", "none"))
        _choice("model.stages", m.stages, ("multi", "single"))
        _choice("model.affinity", m.affinity, ("cosine", "dot"))
        _choice("model.pooling", m.pooling, ("mean", "sum"))
        _choice("model.coords", m.coords, ("on", "off"))
        _choice("loss.mode", lo.mode, ("as-written", "infonce"))
        _choice("loss.contrastive", lo.contrastive, ("on", "off"))
        _choice("train.augment", self.train.augment, ("on", "off"))
        _choice("train.schedule", self.train.schedule, ("constant", "cosine"))
        _choice("decoder.mode", self.decoder.mode, ("consecutive", "parallel"))
        if not (self.tau.mode == "learnable" or self.tau.mode.startswith("fixed:")):
            raise ConfigError(f"tau.mode must be 'learnable' or 'fixed:<value>', got {self.tau.mode!r}")
        if self.tau.mode.startswith("fixed:"):
            try:
                if float(self.tau.mode[6:]) <= 0:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"bad fixed temperature in {self.tau.mode!r}") from None
        if len(m.visual_dims) != 4:
            raise ConfigError("model.visual_dims needs four entries")
        if m.tokens == "full" and m.n_tokens < 2:
            raise ConfigError("model.n_tokens must be >= 2 when tokens=full")
        if lo.contrastive == "on" and self.effective_tokens() < 2:
            raise ConfigError("contrastive loss needs at least two tokens")
        if self.data.image_size % 32:
            raise ConfigError("data.image_size must be divisible by 32")
        if self.train.batch_size < 1 or self.train.epochs < 0:
            raise ConfigError("train.batch_size must be >= 1 and train.epochs >= 0")
        if not 0 < self.train.threshold < 1:
            raise ConfigError("train.threshold must lie in (0, 1)")
        return self

    def effective_tokens(self) -> int:
        return {"full": self.model.n_tokens, "single": 1, "off": 0}[self.model.tokens]

    # ---- flat key access --------------------------------------------------
    def items(self):
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                yield f"{sec.name}.{f.name}", getattr(obj, f.name)

    def set(self, key: str, raw):
        sec, _, name = key.partition(".")
        if sec not in {f.name for f in dataclasses.fields(self)}:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(self, sec)
        types = {f.name: f for f in dataclasses.fields(obj)}
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(obj, name)
        setattr(obj, name, _coerce(key, raw, current))

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.items())

    def to_single_line(self) -> str:
        return ";".join(f"{k}={_fmt(v)}" for k, v in self.items())

    @classmethod
    def from_single_line(cls, s: str) -> "RunConfig":
        return cls.from_pairs(p.split("=", 1) for p in s.split(";") if p)

    @classmethod
    def from_pairs(cls, pairs) -> "RunConfig":
        cfg = cls()
        for k, v in pairs:
            cfg.set(k.strip(), v.strip())
        return cfg.validate()

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        pairs = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value, got {line!r}")
            pairs.append(line.split("=", 1))
        return cls.from_pairs(pairs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def replace(self, **overrides) -> "RunConfig":
        """Copy with ``{'section.key': value}``-style overrides (use ``__`` for ``.``)."""
        cfg = RunConfig.from_pairs((k, _fmt(v)) for k, v in self.items())
        for k, v in overrides.items():
            cfg.set(k.replace("__", "."), _fmt(v) if not isinstance(v, str) else v)
        return cfg.validate()


def _choice(key, value, allowed):
    if value not in allowed:
        raise ConfigError(f"{key} must be one of {allowed}, got {value!r}")


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(key, raw, current):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(current, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if key == "model.visual_dims":
                return tuple(int(p) for p in parts)
            return tuple(parts)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw
