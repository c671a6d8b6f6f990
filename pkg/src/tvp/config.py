"""Dataclass configs and the INI-style run configuration loader."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

VARIANTS = ("tvp", "fvp", "nvp", "wo_se", "wo_rm")


@dataclass
class DataConfig:
    height: int = 32
    width: int = 32
    frames: int = 9  # source frames per clip, T
    amplitude: int = 0  # 0 means height // 4
    glyph_scale: int = 0  # 0 means max(1, height // 16)
    train_clips: int = 512
    val_clips: int = 64
    seed: int = 0


@dataclass
class ModelConfig:
    height: int = 32
    width: int = 32
    n_frames: int = 5  # N
    max_len: int = 40  # M
    d_u: int = 32
    d_t: int = 32
    n_layers: int = 4  # L
    d_w: int = 64
    gen_channels: int = 32
    inv_channels: int = 32
    disc_channels: int = 32
    text_depth: int = 1
    text_heads: int = 2
    text_trainable: bool = True


@dataclass
class LossWeights:
    mse: float = 100.0
    perc: float = 1.0
    adv2d: float = 1.0
    adv3d: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and v < float("inf")):
                raise ConfigError(f"loss weight {f.name}={v} must be finite and >= 0")


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 5e-4
    adv_weight: float = 0.005
    perc_weight: float = 0.01
    recon_threshold: float = 0.05
    seed: int = 0


@dataclass
class TrainConfig:
    """One TVP (or baseline) training run.

    ``steps`` counts scheduler iterations; the schedule is G, G, D repeating,
    so ``steps=3000`` yields 2000 generator and 1000 discriminator updates.
    """

    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    variant: str = "tvp"
    checkpoint_every: int = 0
    log_every: int = 1
    include_first_in_mse: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    data_dir: str = ""
    generator_path: str = ""

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.model.n_frames < 2:
            raise ConfigError("n_frames must be >= 2")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d.get("model", {}))
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class EvalConfig:
    split: str = "val"
    include_first: bool = False
    lpips_backbone: str = ""


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def train_config(self) -> TrainConfig:
        t = dataclasses.replace(self.train, model=self.model, weights=self.weights)
        return t


def _coerce(value: str, typ: Any, key: str):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(str(typ), str)
    try:
        if typ is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return typ(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def _scalar_fields(obj) -> dict:
    return {f.name: f for f in fields(obj) if f.type in ("int", "float", "bool", "str", int, float, bool, str)}


def load_run_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read an INI file with sections matching RunConfig attributes.

    Unknown sections or keys raise ConfigError. ``overrides`` maps
    ``"section.key"`` to values and is applied last (flags win over file).
    """
    cfg = RunConfig()
    items: list[tuple[str, str, str]] = []
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                items.append((section, key, value))
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        items.append((section, key, str(value)))

    for section, key, value in items:
        target = getattr(cfg, section, None)
        if target is None or not dataclasses.is_dataclass(target):
            raise ConfigError(f"unknown config section [{section}]")
        known = _scalar_fields(target)
        if key not in known:
            raise ConfigError(f"unknown config key {section}.{key}")
        setattr(target, key, _coerce(value, known[key].type, f"{section}.{key}"))
    # re-run validation hooks
    LossWeights(**dataclasses.asdict(cfg.weights))
    cfg.train_config()
    return cfg


def dump_run_config(cfg: RunConfig) -> str:
    """Serialize the resolved config back into INI text."""
    parser = configparser.ConfigParser()
    for name in ("data", "model", "weights", "pretrain", "train", "eval"):
        section = getattr(cfg, name)
        parser[name] = {k: str(getattr(section, k)) for k in _scalar_fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
