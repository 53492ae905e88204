"""Synthetic ellipse segmentation data and paired geometric augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

NOISE_SIGMA = 0.1


@dataclass(frozen=True)
class AugmentFlags:
    flip: bool = True
    crop: bool = True
    max_shift: int = 4


def _ellipse_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
    ay, ax = rng.uniform(0.08 * size, 0.25 * size, 2)
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    u = (yy - cy) * c + (xx - cx) * s
    v = -(yy - cy) * s + (xx - cx) * c
    return (u / ay) ** 2 + (v / ax) ** 2 <= 1.0


def synth_sample(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One ``([1, S, S] float32 image, [S, S] int64 mask)`` pair with 1 to 3 ellipses."""
    while True:
        mask = np.zeros((size, size), dtype=bool)
        image = np.zeros((size, size))
        for _ in range(rng.integers(1, 4)):
            e = _ellipse_mask(size, rng)
            image[e] = rng.uniform(0.5, 1.0)
            mask |= e
        if mask.any() and not mask.all():
            break
    image += rng.normal(0.0, NOISE_SIGMA, image.shape)
    return image[None].astype(np.float32), mask.astype(np.int64)


def synth_dataset(n: int, size: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` samples, deterministic in ``seed``. Masks are never empty or full."""
    if size <= 0 or size % 16:
        raise ConfigError(f"image size must be a positive multiple of 16, got {size}")
    rng = np.random.default_rng(seed)
    return [synth_sample(size, rng) for _ in range(n)]


def augment(image: np.ndarray, mask: np.ndarray, flags: AugmentFlags,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Apply one random flip and shift-crop to both ``[C, H, W]`` image and ``[H, W]`` mask.

    The crop is a shift of up to ``flags.max_shift`` pixels with zero padding,
    so the output keeps the input size.
    """
    if flags.flip:
        if rng.random() < 0.5:
            image, mask = image[..., ::-1], mask[..., ::-1]
        if rng.random() < 0.5:
            image, mask = image[..., ::-1, :], mask[..., ::-1, :]
    if flags.crop and flags.max_shift > 0:
        dy, dx = rng.integers(-flags.max_shift, flags.max_shift + 1, 2)
        image, mask = shift_crop(image, int(dy), int(dx)), shift_crop(mask, int(dy), int(dx))
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def shift_crop(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate the last two axes by ``(dy, dx)``, filling uncovered pixels with zero."""
    h, w = a.shape[-2:]
    out = np.zeros_like(a)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = a[..., ys, xs]
    return out


def stack_batch(samples) -> tuple[np.ndarray, np.ndarray]:
    images, masks = zip(*samples)
    return np.stack(images), np.stack(masks)
