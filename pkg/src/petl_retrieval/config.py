"""Dataclass configs and run-config file loading.

Config files are JSON or TOML. Keys may be nested tables or flat dotted
paths (``"loss.lambda": 0.2``); both forms can be mixed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

# CLIP ViT-B/32 image statistics.
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class EncoderConfig:
    image_size: int = 224
    patch_size: int = 32
    layers: int = 12
    vision_width: int = 768
    text_width: int = 512
    vision_heads: int = 12
    text_heads: int = 8
    embed_dim: int = 512
    context_length: int = 77
    vocab_size: int = 49408
    mlp_ratio: int = 4
    text_causal: bool = True
    init_std: float = 0.02
    ln_eps: float = 1e-5

    @classmethod
    def toy(cls, **overrides: Any) -> "EncoderConfig":
        base = dict(
            image_size=32,
            patch_size=8,
            layers=2,
            vision_width=32,
            text_width=24,
            vision_heads=2,
            text_heads=2,
            embed_dim=16,
            context_length=16,
            vocab_size=128,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_image_tokens(self) -> int:
        return 1 + self.grid**2

    def validate(self) -> None:
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        for name in ("vision", "text"):
            width = getattr(self, f"{name}_width")
            heads = getattr(self, f"{name}_heads")
            if heads < 1 or width % heads:
                raise ConfigError(f"{name}_width {width} not divisible by {name}_heads {heads}")
        if self.context_length < 3:
            raise ConfigError("context_length must be >= 3 (BOS, one word, EOS)")
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must cover the special tokens")
        if self.embed_dim < 1 or self.mlp_ratio < 1:
            raise ConfigError("embed_dim and mlp_ratio must be positive")


# kind -> allowed hyperparameters with their defaults.
STRATEGY_PARAMS: dict[str, dict[str, Any]] = {
    "zero_shot": {},
    "linear_probe": {},
    "full_finetune": {},
    "adapter_sequential": {"d": 64, "scale": 1.0, "branches": ["vision", "text"]},
    "mrs_adapter": {"d": 64, "r": 64, "tie_across_layers": True},
    "mrs_no_share": {"d": 64, "r": 64, "tie_across_layers": True, "branches": ["vision", "text"]},
    "text_prompt": {"prompt_length": 8, "prompt_depth": "shallow", "prompt_position": "end"},
    "visual_prompt": {"prompt_length": 50, "prompt_depth": "deep"},
    "vl_prompt": {
        "prompt_length": 8,
        "prompt_depth": "shallow",
        "prompt_position": "end",
        "visual_prompt_length": None,  # None: same as prompt_length
    },
}


@dataclass
class PetlStrategy:
    kind: str = "mrs_adapter"
    params: dict[str, Any] = field(default_factory=dict)

    def resolved(self) -> dict[str, Any]:
        """Hyperparameters with defaults filled in; raises on unknown keys."""
        if self.kind not in STRATEGY_PARAMS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}")
        allowed = STRATEGY_PARAMS[self.kind]
        extra = set(self.params) - set(allowed)
        if extra:
            raise ConfigError(f"strategy {self.kind} does not take {sorted(extra)}")
        out = dict(allowed)
        out.update(self.params)
        if "prompt_depth" in out and out["prompt_depth"] not in ("shallow", "deep"):
            raise ConfigError(f"prompt_depth must be shallow or deep, got {out['prompt_depth']!r}")
        if "prompt_position" in out and out["prompt_position"] not in ("end", "mid"):
            raise ConfigError(f"prompt_position must be end or mid, got {out['prompt_position']!r}")
        if "branches" in out:
            branches = list(out["branches"])
            if not branches or set(branches) - {"vision", "text"}:
                raise ConfigError(f"branches must be a nonempty subset of vision/text: {branches}")
            out["branches"] = branches
        return out

    @property
    def label(self) -> str:
        return self.kind


@dataclass
class LossConfig:
    margin_cross: float = 0.2
    margin_image: float = 0.2
    margin_text: float = 0.2
    dropout_p: float = 0.2
    negative_mode: str = "hardest"

    def validate(self) -> None:
        if min(self.margin_cross, self.margin_image, self.margin_text) < 0:
            raise ConfigError("margins must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.negative_mode not in ("hardest", "sum"):
            raise ConfigError(f"negative_mode must be hardest or sum, got {self.negative_mode!r}")


# config-file key -> LossConfig field
LOSS_KEY_ALIASES = {"lambda": "margin_cross", "alpha_v": "margin_image", "alpha_t": "margin_text"}


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class ScheduleConfig:
    decay_factor: float = 0.7
    decay_every: int = 20


@dataclass
class ToyDatasetConfig:
    n_classes: int = 8
    items_per_class: int = 25
    captions_per_image: int = 5
    image_size: int = 32
    channels: int = 3
    vocab_size: int = 96
    noise_std: float = 0.5
    templates_per_class: int = 10
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_classes", "items_per_class", "captions_per_image", "image_size",
                     "channels", "vocab_size", "templates_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


@dataclass
class DataConfig:
    source: str = "toy"  # "toy" or a manifest JSON path
    toy: ToyDatasetConfig = field(default_factory=ToyDatasetConfig)
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None


@dataclass
class RunConfig:
    name: str = "run"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    strategy: PetlStrategy = field(default_factory=PetlStrategy)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    k_folds: int = 5
    eval_batch_size: int = 128
    dtype: str = "float32"
    backbone_checkpoint: str | None = None
    output_dir: str = "runs"

    def validate(self) -> None:
        self.encoder.validate()
        self.strategy.resolved()
        self.loss.validate()
        if self.data.source == "toy":
            self.data.toy.validate()
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2: triplet losses need in-batch negatives")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.k_folds < 1:
            raise ConfigError("k_folds must be >= 1")
        if self.optimizer.kind != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer.kind!r}")
        if self.schedule.decay_every < 1 or self.schedule.decay_factor <= 0:
            raise ConfigError("schedule needs decay_every >= 1 and decay_factor > 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["loss"] = {
            {v: k for k, v in LOSS_KEY_ALIASES.items()}.get(k, k): v for k, v in out["loss"].items()
        }
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        cfg = _build(cls, _unflatten(data), "")
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(read_config_file(path))


_NESTED: dict[tuple[type, str], type] = {
    (RunConfig, "encoder"): EncoderConfig,
    (RunConfig, "strategy"): PetlStrategy,
    (RunConfig, "loss"): LossConfig,
    (RunConfig, "optimizer"): OptimizerConfig,
    (RunConfig, "schedule"): ScheduleConfig,
    (RunConfig, "data"): DataConfig,
    (DataConfig, "toy"): ToyDatasetConfig,
}


def _unflatten(data: dict[str, Any]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, dict):
            value = _unflatten(value)
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"config key {key!r} conflicts with a scalar value")
        leaf = parts[-1]
        if isinstance(value, dict) and isinstance(node.get(leaf), dict):
            node[leaf].update(value)
        else:
            node[leaf] = value
    return out


def _build(cls: type, data: dict[str, Any], prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a table at {prefix or '<root>'}")
    if cls is LossConfig:
        data = {LOSS_KEY_ALIASES.get(k, k): v for k, v in data.items()}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys at {prefix or '<root>'}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        nested = _NESTED.get((cls, key))
        if nested is not None and key != "params":
            value = _build(nested, value, f"{prefix}{key}.")
        elif isinstance(value, list) and key in ("betas", "ratios", "mean", "std"):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def read_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            return tomllib.loads(text)
        return json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
