"""Run configuration: nested dataclasses loaded from YAML, with dotted-path
overrides and a stable hash."""

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

CONFIG_FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data/toy"
    taxonomy: str = "toy"
    source_split: str = "source"
    target_split: str = "target"
    val_split: str = "target_val"


@dataclass
class ModelConfig:
    architecture: str = "tiny-cnn-s4"
    embed_dim: int = 32


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_iters: int = 100
    warmup_ratio: float = 1e-6
    poly_power: float = 1.0


@dataclass
class EmaConfig:
    alpha: float = 0.999
    # use min(alpha, 1 - 1/(it + 1)) so the teacher tracks the student early on
    ramp: bool = True


@dataclass
class PseudoConfig:
    threshold: float = 0.968
    confidence_weighting: bool = True


@dataclass
class MixConfig:
    enabled: bool = True
    fraction: float = 0.5
    prior_guided: bool = True
    active_groups: Optional[List[str]] = None  # None: taxonomy default


@dataclass
class MaskConfig:
    enabled: bool = True
    patch_size: int = 16
    ratio: float = 0.7


@dataclass
class ContrastiveSection:
    enabled: bool = True
    temperature: float = 0.1
    lambda_pix: float = 0.1
    max_anchors_per_class: int = 128
    max_pixels_total: int = 1024
    stages: List[str] = field(default_factory=lambda: ["source", "mix", "masked"])


@dataclass
class TrainConfig:
    format_version: int = CONFIG_FORMAT_VERSION
    seed: int = 7
    max_iterations: int = 3000
    batch_size: int = 1
    crop: int = 96
    flip_prob: float = 0.5
    eval_interval: int = 1000
    checkpoint_interval: int = 1000
    # false: train on source labels only (no teacher, mixing, masking)
    adapt: bool = True
    # source-only warm-up: adaptation losses start at this iteration
    adapt_start: int = 0
    per_stage_steps: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    contrastive: ContrastiveSection = field(default_factory=ContrastiveSection)

    def validate(self):
        def positive(name, v, strict=True):
            if (v <= 0) if strict else (v < 0):
                raise ConfigError(f"{name} must be {'positive' if strict else 'non-negative'}, got {v}")

        if self.format_version != CONFIG_FORMAT_VERSION:
            raise ConfigError(f"unsupported config format_version {self.format_version}")
        positive("max_iterations", self.max_iterations, strict=False)
        positive("batch_size", self.batch_size)
        positive("crop", self.crop)
        positive("adapt_start", self.adapt_start, strict=False)
        positive("eval_interval", self.eval_interval)
        positive("checkpoint_interval", self.checkpoint_interval)
        positive("optim.lr", self.optim.lr, strict=False)
        positive("optim.warmup_iters", self.optim.warmup_iters, strict=False)
        positive("model.embed_dim", self.model.embed_dim)
        positive("mask.patch_size", self.mask.patch_size)
        positive("contrastive.temperature", self.contrastive.temperature)
        positive("contrastive.lambda_pix", self.contrastive.lambda_pix, strict=False)
        positive("contrastive.max_anchors_per_class", self.contrastive.max_anchors_per_class)
        positive("contrastive.max_pixels_total", self.contrastive.max_pixels_total)
        for name, v in (("flip_prob", self.flip_prob), ("mix.fraction", self.mix.fraction),
                        ("mask.ratio", self.mask.ratio), ("pseudo.threshold", self.pseudo.threshold)):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 <= self.ema.alpha < 1.0:
            raise ConfigError(f"ema.alpha must be in [0, 1), got {self.ema.alpha}")
        bad = set(self.contrastive.stages) - {"source", "mix", "masked"}
        if bad:
            raise ConfigError(f"contrastive.stages has unknown entries {sorted(bad)}")
        return self


def to_dict(cfg) -> Dict[str, Any]:
    return dataclasses.asdict(cfg)


def _build(cls, doc: Dict[str, Any], prefix: str = ""):
    if not isinstance(doc, dict):
        raise ConfigError(f"section {prefix.rstrip('.') or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {[prefix + k for k in unknown]}; "
                          f"valid keys: {sorted(valid_keys())}")
    kwargs = {}
    for name, value in doc.items():
        sub = _SECTIONS.get(name) if prefix == "" else None
        kwargs[name] = _build(sub, value, prefix + name + ".") if sub else value
    return cls(**kwargs)


_SECTIONS = {
    "data": DataConfig, "model": ModelConfig, "optim": OptimConfig, "ema": EmaConfig,
    "pseudo": PseudoConfig, "mix": MixConfig, "mask": MaskConfig,
    "contrastive": ContrastiveSection,
}


def valid_keys() -> List[str]:
    keys = []
    for f in dataclasses.fields(TrainConfig):
        if f.name in _SECTIONS:
            keys += [f"{f.name}.{g.name}" for g in dataclasses.fields(_SECTIONS[f.name])]
        else:
            keys.append(f.name)
    return keys


def from_dict(doc: Dict[str, Any]) -> TrainConfig:
    return _coerce(_build(TrainConfig, doc or {})).validate()


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"{path}: {e}") from e
    try:
        return from_dict(doc)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e


def _coerce(cfg: TrainConfig) -> TrainConfig:
    """Cast YAML scalars to the declared field types (ints for floats, etc.)."""
    def fix(obj):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                fix(v)
                continue
            default = f.default if f.default is not dataclasses.MISSING else None
            try:
                if isinstance(default, bool):
                    if not isinstance(v, bool):
                        raise ConfigError(f"{f.name} must be true/false, got {v!r}")
                elif isinstance(default, int) and not isinstance(v, bool):
                    if isinstance(v, float) and not v.is_integer():
                        raise ConfigError(f"{f.name} must be an integer, got {v!r}")
                    setattr(obj, f.name, int(v))
                elif isinstance(default, float):
                    setattr(obj, f.name, float(v))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad value for {f.name}: {v!r}") from e
    fix(cfg)
    return cfg


def apply_overrides(cfg: TrainConfig, overrides: List[str]) -> TrainConfig:
    """Apply ``key=value`` strings with dotted keys; values are parsed as YAML scalars."""
    doc = to_dict(cfg)
    keys = set(valid_keys())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in keys:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {sorted(keys)}")
        value = yaml.safe_load(raw) if raw.strip() else None
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return from_dict(doc)


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def builtin_config_path(name: str) -> Path:
    return Path(__file__).parent / "resources" / "configs" / f"{name}.yaml"


def resolve_config(ref) -> TrainConfig:
    p = Path(ref)
    if p.exists():
        return load_config(p)
    builtin = builtin_config_path(str(ref))
    if builtin.exists():
        return load_config(builtin)
    raise ConfigError(f"no config file or builtin named {ref!r}")
