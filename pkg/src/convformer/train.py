"""Training recipe: Dice + cross-entropy loss, AdamW with a poly schedule, and the loop."""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .data import AugmentFlags, augment, stack_batch
from .errors import ConfigError, DataError, NumericError, StateError
from .metrics import MetricsReport
from .model import ConvFormer, ModelConfig
from .tensor import ParameterStore, Tensor, no_grad

DICE_SMOOTH = 1.0


@dataclass
class TrainConfig:
    max_iters: int = 1000
    batch_size: int = 4
    seed: int = 0
    lr0: float = 2e-4
    weight_decay: float = 0.005
    poly_power: float = 0.9
    augment: AugmentFlags = field(default_factory=AugmentFlags)
    eval_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.poly_power <= 1:
            raise ConfigError(f"poly_power must lie in (0, 1], got {self.poly_power}")
        if self.max_iters < 0:
            raise ConfigError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


def poly_lr(it: int, cfg: TrainConfig) -> float:
    """``lr0 * (1 - it / max_iters) ** poly_power``, reaching 0 at the last iteration."""
    if it < 0 or it > cfg.max_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.max_iters}]")
    if cfg.max_iters == 0:
        return cfg.lr0
    return cfg.lr0 * (1.0 - it / cfg.max_iters) ** cfg.poly_power


def adamw_step(store: ParameterStore, lr: float, wd: float, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update, in place.

    Moments live on the store's ``Param`` entries and are kept in float64.
    """
    missing = [n for n, p in store.params.items() if p.tensor.grad is None]
    if missing:
        raise StateError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[:3]}")
    b1, b2 = betas
    store.step += 1
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for p in store.params.values():
        t = p.tensor
        g = t.grad.astype(np.float64)
        if p.m is None:
            p.m = np.zeros_like(g)
            p.v = np.zeros_like(g)
        p.m = b1 * p.m + (1.0 - b1) * g
        p.v = b2 * p.v + (1.0 - b2) * g * g
        w = t.data.astype(np.float64)
        w = w - lr * wd * w
        w = w - lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
        t.data[...] = w


def one_hot(target: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    """``[B, H, W]`` class indices to ``[B, K, H, W]`` indicators."""
    target = np.asarray(target)
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        raise DataError(f"target classes must lie in [0, {num_classes}), got range "
                        f"[{target.min()}, {target.max()}]")
    return (target[:, None] == np.arange(num_classes).reshape(1, -1, 1, 1)).astype(dtype)


def dice_ce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean of the soft-Dice loss and the pixelwise cross-entropy.

    Soft Dice is computed per class over the whole batch with smoothing 1 and
    averaged over classes.
    """
    if logits.ndim != 4 or np.shape(target) != (logits.shape[0],) + logits.shape[2:]:
        raise DataError(f"logits {logits.shape} and target {np.shape(target)} do not align")
    k = logits.shape[1]
    y = one_hot(target, k, logits.dtype)
    ce = ops.mul(ops.mean(ops.sum(ops.mul(ops.log_softmax(logits, axis=1), y), axis=1)), -1.0)
    probs = ops.softmax(logits, axis=1)
    inter = ops.sum(ops.mul(probs, y), axis=(0, 2, 3))
    denom = ops.add(ops.sum(probs, axis=(0, 2, 3)), y.sum(axis=(0, 2, 3)) + DICE_SMOOTH)
    dice = ops.div(ops.add(ops.mul(inter, 2.0), DICE_SMOOTH), denom)
    dice_loss = ops.sub(1.0, ops.mean(dice))
    return ops.mul(ops.add(ce, dice_loss), 0.5)


def predict(model: ConvFormer, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Argmax class maps ``[N, H, W]`` in eval mode; restores the previous mode."""
    was_training = model.store.training
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = model(np.asarray(images[i:i + batch_size], dtype=model.store.dtype))
            out.append(np.argmax(logits.data, axis=1))
    model.store.training = was_training
    return np.concatenate(out) if out else np.zeros((0,) + np.shape(images)[2:], dtype=np.int64)


def evaluate(model: ConvFormer, dataset, spacing: float = 1.0) -> MetricsReport:
    """Foreground-vs-rest metrics per sample (class 1 for binary tasks, any nonzero class otherwise)."""
    images, masks = stack_batch(dataset)
    preds = predict(model, images)
    report = MetricsReport()
    for p, g in zip(preds, masks):
        report.add(p > 0, g > 0, spacing)
    return report


class TrainingAborted(NumericError):
    def __init__(self, iteration: int, batch_seed: tuple[int, int], cause: str):
        super().__init__(f"non-finite loss at iteration {iteration} (batch seed {batch_seed}): {cause}")
        self.iteration = iteration
        self.batch_seed = batch_seed


@dataclass
class TrainResult:
    model: ConvFormer
    losses: list[float]
    lrs: list[float]
    history: list[tuple[int, float]]


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(n)[:batch_size] if batch_size <= n else rng.integers(0, n, batch_size)


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Sequence,
               model: ConvFormer | None = None,
               log: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Run ``max_iters`` optimizer steps on ``dataset`` and return the trained model.

    Each iteration draws its batch and augmentations from a generator seeded
    with ``(seed, iteration)``, so a run is reproducible and a failing batch
    can be regenerated from the seed in the abort message. With
    ``eval_every > 0`` the training-set mean Dice is recorded periodically.
    """
    if not dataset:
        raise DataError("empty training set")
    model = model or ConvFormer(model_cfg, seed=train_cfg.seed)
    model.train()
    losses, lrs, history = [], [], []
    for it in range(train_cfg.max_iters):
        batch_seed = (train_cfg.seed, it)
        rng = np.random.default_rng(batch_seed)
        idx = batch_indices(len(dataset), train_cfg.batch_size, rng)
        images, masks = stack_batch([augment(*dataset[i], train_cfg.augment, rng) for i in idx])
        lr = poly_lr(it, train_cfg)
        model.store.zero_grad()
        try:
            loss = dice_ce_loss(model(images.astype(model.store.dtype)), masks)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"loss = {value}")
            loss.backward()
        except NumericError as exc:
            raise TrainingAborted(it, batch_seed, str(exc)) from exc
        adamw_step(model.store, lr, train_cfg.weight_decay)
        losses.append(value)
        lrs.append(lr)
        if log is not None:
            log(it, lr, value)
        if train_cfg.eval_every and (it + 1) % train_cfg.eval_every == 0:
            history.append((it + 1, evaluate(model, dataset).mean("dice")))
            model.train()
    return TrainResult(model, losses, lrs, history)


def dead_parameters(model: ConvFormer, images: np.ndarray, masks: np.ndarray, lr: float = 1e-3) -> list[str]:
    """Parameters whose gradient is identically zero after one optimizer step.

    The step matters: the deformable query projections start at zero, which
    silences the positional branch until they have moved once. A parameter
    that is really disconnected stays at zero regardless.
    """
    model.train()
    images = np.asarray(images, dtype=model.store.dtype)
    for step in range(2):
        model.store.zero_grad()
        dice_ce_loss(model(images), masks).backward()
        if step == 0:
            adamw_step(model.store, lr, 0.0)
    return [n for n, t in model.store.named_parameters() if not np.abs(t.grad).max() > 0]
