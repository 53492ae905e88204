"""Fixed 2D sinusoidal encoding and the enhanced (EPE) variant with a depth-wise conv branch."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from . import ops
from .errors import ConfigError
from .layers import BatchNorm2d, DWConv2d
from .tensor import DEFAULT_DTYPE, ParameterStore, Tensor


def _axis_encoding(n: int, dim: int) -> np.ndarray:
    """``[dim, n]``: row 2i is sin(pos / 10000^(2i/dim)), row 2i+1 the matching cos."""
    pos = np.arange(n, dtype=np.float64)
    freq = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = pos[None, :] / freq[:, None]
    enc = np.empty((dim, n))
    enc[0::2] = np.sin(angles)
    enc[1::2] = np.cos(angles)
    return enc


def sinusoidal_pe(h: int, w: int, c: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """Content-independent ``[C, H, W]`` encoding.

    The first ``C/2`` channels encode the row index, the last ``C/2`` the
    column index, each with its own half-width as the frequency constant.
    """
    if c <= 0 or c % 4:
        raise ConfigError(f"sinusoidal encoding needs channels divisible by 4, got {c}")
    half = c // 2
    rows = _axis_encoding(h, half)
    cols = _axis_encoding(w, half)
    pe = np.concatenate([np.broadcast_to(rows[:, :, None], (half, h, w)),
                         np.broadcast_to(cols[:, None, :], (half, h, w))], axis=0)
    return Tensor(pe.astype(dtype))


class PositionalGrid:
    """Per-level cache of fixed encodings for a pyramid of known shapes."""

    def __init__(self, level_shapes: Sequence[tuple[int, int]], channels: int):
        if channels % 4:
            raise ConfigError(f"channels must be divisible by 4, got {channels}")
        self.level_shapes = [tuple(s) for s in level_shapes]
        self.channels = channels
        self.cache = {s: sinusoidal_pe(s[0], s[1], channels) for s in self.level_shapes}

    def get(self, h: int, w: int) -> Tensor:
        key = (h, w)
        if key not in self.cache:
            self.cache[key] = sinusoidal_pe(h, w, self.channels)
        return self.cache[key]


class EPE:
    """Enhanced positional encoding: ``PE(shape) + ReLU(BN(DWConv(x)))``.

    The result is a positional embedding to be added to attention queries,
    not a replacement for ``x``. The depth-wise conv has no bias since the
    batch norm right after it absorbs any constant.
    """

    def __init__(self, store: ParameterStore, name: str, channels: int, k: int = 3):
        if channels % 4:
            raise ConfigError(f"EPE channels must be divisible by 4, got {channels}")
        self.channels = channels
        self.dw = DWConv2d(store, f"{name}.dw", channels, k, bias=False)
        self.bn = BatchNorm2d(store, f"{name}.bn", channels)
        self.grid = PositionalGrid([], channels)

    def content(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.dw(x)))

    def __call__(self, x: Tensor) -> Tensor:
        _, c, h, w = x.shape
        if c != self.channels:
            raise ConfigError(f"EPE built for {self.channels} channels, got {c}")
        pe = self.grid.get(h, w)
        return ops.add(ops.reshape(pe, (1, c, h, w)), self.content(x))


def epe(x: Tensor, module: EPE) -> Tensor:
    return module(x)
