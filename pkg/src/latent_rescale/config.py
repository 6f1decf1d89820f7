"""Run configuration: nested dataclasses, JSON files and dotted-key overrides."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    rec: float = 1.0   # reconstruction (both latent chains)
    gui: float = 1.0   # LR guidance toward bicubic
    pec: float = 1.0   # perceptual terms inside the enhancement loss


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass
class ModelConfig:
    dfrm_width: int = 48
    dfrm_blocks: int = 2
    inn_blocks: int = 8
    inn_hidden: int = 32
    pixel_guidance: bool = True
    use_inn: bool = True
    tpm_width: int = 32
    scheduler_width: int = 32
    lora_rank: int = 4
    timestep_mode: str = "adaptive"   # "adaptive" or "fixed"
    fixed_timestep: int = 999


@dataclass
class TrainConfig:
    lr_stage1: float = 1e-4
    lr_stage2: float = 5e-5
    lr_stage3: float = 5e-6
    steps_stage1: int = 2000
    steps_stage2: int = 400
    steps_stage3: int = 200
    batch_size: int = 8
    crop: int = 128           # pixels; training crops for all stages
    tpm_warmstart_steps: int = 0
    val_every: int = 250
    codec_steps: int = 1500
    denoiser_steps: int = 1500


@dataclass
class BackendConfig:
    codec: str = "toy"              # "toy" or "external"
    codec_weights: str = ""         # archive (toy) or TorchScript file (external)
    codec_scale: float = 1.0        # external only
    codec_shift: float = 0.0        # external only
    denoiser: str = "toy"
    denoiser_weights: str = ""


@dataclass
class RunConfig:
    factor: int = 16
    patch_size: int = 96            # latent cells
    stride: int = 64                # latent cells
    t0: int = 999
    seed: int = 0
    checkpoint: str = ""
    loss: LossWeights = field(default_factory=LossWeights)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.factor not in (8, 16, 32):
            raise ConfigError(f"factor must be 8, 16 or 32, got {self.factor}")
        if not (self.patch_size >= self.stride >= 1):
            raise ConfigError(f"need patch_size >= stride >= 1, got {self.patch_size}, {self.stride}")
        if not 0 <= self.t0 < self.schedule.T:
            raise ConfigError(f"t0 must lie in [0, {self.schedule.T - 1}]")
        for name, v in dataclasses.asdict(self.loss).items():
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss.{name} must be finite and non-negative")
        if self.model.timestep_mode not in ("adaptive", "fixed"):
            raise ConfigError("model.timestep_mode must be adaptive or fixed")
        if self.train.crop % self.factor or self.train.crop % 8:
            raise ConfigError("train.crop must be divisible by the factor and by 8")
        b = self.backend
        for name, kind, weights in (("codec", b.codec, b.codec_weights), ("denoiser", b.denoiser, b.denoiser_weights)):
            if kind not in ("toy", "external"):
                raise ConfigError(f"backend.{name} must be toy or external, got {kind!r}")
            if kind == "external" and not weights:
                raise ConfigError(f"backend.{name}=external needs backend.{name}_weights")
        if b.codec_scale <= 0 or not math.isfinite(b.codec_scale):
            raise ConfigError("backend.codec_scale must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")


def _build(klass, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(klass)}
    kwargs = {}
    for key, value in d.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {prefix}{key}")
        sub = _section_type(klass, key)
        kwargs[key] = _build(sub, value, f"{prefix}{key}.") if sub else _coerce(klass, key, value, prefix)
    try:
        return klass(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _section_type(klass, key):
    default = {f.name: f for f in dataclasses.fields(klass)}[key]
    if default.default_factory is not dataclasses.MISSING:
        return default.default_factory
    return None


def _coerce(klass, key, value, prefix=""):
    default = getattr(klass(), key) if klass is not RunConfig else RunConfig.__dataclass_fields__[key].default
    kind = type(default)
    try:
        if kind is bool:
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for {prefix}{key} (expected {kind.__name__})") from None


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None,
                base: dict | None = None) -> RunConfig:
    """``base`` (e.g. a checkpoint's config), then the JSON file, then dotted overrides."""
    data: dict = copy.deepcopy(base) if base else {}
    if path:
        try:
            _merge(data, json.loads(Path(path).read_text()))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    for dotted, value in (overrides or {}).items():
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{dotted}: {part} is not a section")
        node[parts[-1]] = value
    return RunConfig.from_dict(data)


def _merge(dst: dict, src: dict) -> None:
    if not isinstance(src, dict):
        raise ConfigError("config file must hold a JSON object")
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v)
        else:
            dst[k] = v


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def describe_keys(cfg: RunConfig | None = None) -> list[tuple[str, Any]]:
    """Flattened ``(dotted key, default)`` pairs for help output."""
    cfg = cfg or RunConfig()
    out = []

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                walk(v, f"{prefix}{f.name}.")
            else:
                out.append((f"{prefix}{f.name}", v))

    walk(cfg, "")
    return out
