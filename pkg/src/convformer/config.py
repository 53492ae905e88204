"""Flat ``key=value`` run configuration: parsing, defaults, and the effective-config echo."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .data import AugmentFlags
from .errors import ConfigError
from .model import VARIANTS, ModelConfig, build_variant
from .train import TrainConfig

REQUIRED = ("num_classes",)

# key -> one-line description; the default is the RunConfig field default
DOCS = {
    "num_classes": "number of output classes (required, >= 2)",
    "in_channels": "input image channels",
    "stage_channels": "encoder widths at 1/2, 1/4, 1/8, 1/16, comma separated",
    "stem_conv_blocks": "conv blocks per stem after the strided conv",
    "heads": "attention heads",
    "points": "sampling points per head per level",
    "encoder_dim": "width of the additional multi-scale encoder",
    "encoder_layers": "layers in the additional encoder",
    "stem_layers": "Enhanced DeTrans layers per hybrid stem",
    "ffm_expansion": "hidden-width multiplier of the feed-forward module",
    "level_embed": "learned per-level embedding in the additional encoder",
    "variant": f"architecture variant: {', '.join(VARIANTS)}",
    "max_iters": "optimizer steps",
    "batch_size": "images per step",
    "seed": "initialization and batch-sampling seed",
    "lr0": "initial learning rate",
    "weight_decay": "decoupled AdamW weight decay",
    "poly_power": "exponent of the poly learning-rate schedule",
    "augment_flip": "random horizontal/vertical flips",
    "augment_crop": "random shift-crop with zero padding",
    "max_shift": "largest crop shift in pixels",
    "eval_every": "record training-set Dice every N steps (0 = never)",
    "dataset_dir": "directory holding images.cft and masks.cft (empty = synthetic)",
    "train_size": "synthetic training images",
    "val_size": "synthetic validation images",
    "image_size": "synthetic image side length (multiple of 16)",
    "data_seed": "synthetic data seed",
    "eval_split": "split scored by eval: train or val",
    "spacing": "pixel spacing for boundary distances",
    "output_dir": "directory for checkpoints, logs and reports",
    "checkpoint_in": "checkpoint read by eval (empty = output_dir/model.ckpt)",
    "dump_masks": "write predicted masks as PGM images during eval",
    "deterministic": "single-threaded BLAS for bitwise-reproducible runs",
    "ablation_seeds": "number of seeds per variant in ablate",
}

MODEL_KEYS = ("num_classes", "in_channels", "stage_channels", "stem_conv_blocks", "heads", "points",
              "encoder_dim", "encoder_layers", "stem_layers", "ffm_expansion", "level_embed")


@dataclass
class RunConfig:
    num_classes: int = 2
    in_channels: int = 1
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    stem_conv_blocks: int = 2
    heads: int = 4
    points: int = 4
    encoder_dim: int = 32
    encoder_layers: int = 4
    stem_layers: int = 1
    ffm_expansion: int = 4
    level_embed: bool = True
    variant: str = "full"
    max_iters: int = 1000
    batch_size: int = 4
    seed: int = 0
    lr0: float = 2e-4
    weight_decay: float = 0.005
    poly_power: float = 0.9
    augment_flip: bool = True
    augment_crop: bool = True
    max_shift: int = 4
    eval_every: int = 0
    dataset_dir: str = ""
    train_size: int = 8
    val_size: int = 16
    image_size: int = 64
    data_seed: int = 0
    eval_split: str = "train"
    spacing: float = 1.0
    output_dir: str = "runs"
    checkpoint_in: str = ""
    dump_masks: bool = False
    deterministic: bool = False
    ablation_seeds: int = 1

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.eval_split not in ("train", "val"):
            raise ConfigError(f"eval_split must be train or val, got {self.eval_split!r}")
        if self.image_size <= 0 or self.image_size % 16:
            raise ConfigError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        for key in ("train_size", "ablation_seeds"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.val_size < 0:
            raise ConfigError("val_size must be >= 0")
        self.model_config()
        self.train_config()

    def model_config(self) -> ModelConfig:
        return build_variant(self.variant, **{k: getattr(self, k) for k in MODEL_KEYS})

    def train_config(self) -> TrainConfig:
        return TrainConfig(max_iters=self.max_iters, batch_size=self.batch_size, seed=self.seed, lr0=self.lr0,
                           weight_decay=self.weight_decay, poly_power=self.poly_power,
                           augment=AugmentFlags(self.augment_flip, self.augment_crop, self.max_shift),
                           eval_every=self.eval_every)


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
assert set(FIELDS) == set(DOCS)


def parse_value(key: str, text: str):
    kind = type(FIELDS[key].default)
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind is tuple:
        return tuple(int(p) for p in text.split(",") if p.strip())
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment. Errors name the line."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = parse_value(key, val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    for key in REQUIRED:
        if key not in values:
            raise ConfigError(f"{source}: missing required key {key!r}")
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def format_config(cfg: RunConfig, docs: bool = True) -> str:
    """Every key with its effective value; parses back to an equal ``RunConfig``."""
    lines = []
    for name in FIELDS:
        if docs:
            lines.append(f"# {DOCS[name]}")
        lines.append(f"{name}={format_value(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"
