"""Enhanced DeTrans: deformable attention plus a feed-forward module closed by a shared depth-wise conv."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from . import ops
from .deform_attn import (
    MsMhsa,
    MultiScaleFeatures,
    flatten_multiscale,
    make_reference_points,
    unflatten_tokens,
)
from .layers import DWConv2d, LayerNorm, Linear
from .posenc import EPE, sinusoidal_pe
from .tensor import ParameterStore, Tensor


class FFM:
    """``LN(GELU(x W1 + b1) W2 + b2 + x)``; the residual sits inside the norm. No dropout."""

    def __init__(self, store: ParameterStore, name: str, dim: int, expansion: int = 4):
        self.fc1 = Linear(store, f"{name}.fc1", dim, expansion * dim)
        self.fc2 = Linear(store, f"{name}.fc2", expansion * dim, dim)
        self.norm = LayerNorm(store, f"{name}.norm", dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(ops.add(self.fc2(ops.gelu(self.fc1(x))), x))


def conv_based_ffm(x: Tensor, level_shapes: Sequence[tuple[int, int]], ffm: FFM, dw: DWConv2d) -> Tensor:
    """Run the FFM on tokens, then the same depth-wise kernel on every level's 2D map.

    No residual is added around the depth-wise conv.
    """
    y = ffm(x)
    ms = unflatten_tokens(y, level_shapes)
    return flatten_multiscale(MultiScaleFeatures([dw(lvl) for lvl in ms.levels]))


class EnhancedDeTransLayer:
    """``y = LN(x + MSMHSA(x + pos)); out = ConvFFM(y)`` (plain FFM when ``conv_ffm`` is off)."""

    def __init__(self, store: ParameterStore, name: str, dim: int, n_levels: int, heads: int = 4,
                 points: int = 4, expansion: int = 4, conv_ffm: bool = True):
        self.attn = MsMhsa(store, f"{name}.attn", dim, n_levels, heads, points)
        self.attn_norm = LayerNorm(store, f"{name}.attn_norm", dim)
        self.ffm = FFM(store, f"{name}.ffm", dim, expansion)
        # one kernel, shared by every pyramid level
        self.dw = DWConv2d(store, f"{name}.dw_ffm", dim, 3) if conv_ffm else None

    def __call__(self, x: Tensor, pos: Tensor | None, refs: np.ndarray,
                 level_shapes: Sequence[tuple[int, int]]) -> Tensor:
        y = self.attn_norm(ops.add(x, self.attn(x, pos, x, refs, level_shapes)))
        if self.dw is None:
            return self.ffm(y)
        return conv_based_ffm(y, level_shapes, self.ffm, self.dw)


def enhanced_detrans_layer(x: Tensor, pos: Tensor | None, refs: np.ndarray,
                           level_shapes: Sequence[tuple[int, int]], params: EnhancedDeTransLayer) -> Tensor:
    return params(x, pos, refs, level_shapes)


class EnhancedDeTransEncoder:
    """Stack of Enhanced DeTrans layers over a pyramid, with an input-to-output residual per level.

    Positional embedding per level is EPE (or the fixed sinusoidal map when
    ``use_epe`` is off) plus an optional learned per-level embedding.
    """

    def __init__(self, store: ParameterStore, name: str, dim: int, n_levels: int, n_layers: int = 4,
                 use_epe: bool = True, use_residual: bool = True, level_embed: bool = True,
                 heads: int = 4, points: int = 4, expansion: int = 4, conv_ffm: bool = True):
        self.dim, self.n_levels = dim, n_levels
        self.use_epe, self.use_residual = use_epe, use_residual
        self.epe = [EPE(store, f"{name}.epe{i}", dim) for i in range(n_levels)] if use_epe else None
        self.level_embed = (store.add(f"{name}.level_embed", store.rng.normal(0.0, 0.02, (n_levels, dim)))
                            if level_embed else None)
        self.layers = [EnhancedDeTransLayer(store, f"{name}.layers.{i}", dim, n_levels, heads, points,
                                            expansion, conv_ffm) for i in range(n_layers)]

    def positional(self, ms: MultiScaleFeatures) -> Tensor:
        b, c = ms.levels[0].shape[:2]
        parts = []
        for i, lvl in enumerate(ms.levels):
            h, w = lvl.shape[2:]
            p = self.epe[i](lvl) if self.use_epe else ops.reshape(sinusoidal_pe(h, w, c), (1, c, h, w))
            p = ops.reshape(ops.transpose(p, (0, 2, 3, 1)), (p.shape[0], h * w, c))
            if self.level_embed is not None:
                p = ops.add(p, ops.getitem(self.level_embed, i))
            if p.shape[0] != b:
                p = ops.add(p, np.zeros((b, 1, 1), dtype=p.dtype))
            parts.append(p)
        return parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)

    def __call__(self, ms: MultiScaleFeatures) -> MultiScaleFeatures:
        shapes = ms.level_shapes
        x = flatten_multiscale(ms)
        if self.layers:
            pos = self.positional(ms)
            refs = make_reference_points(shapes)
            for layer in self.layers:
                x = layer(x, pos, refs, shapes)
        out = unflatten_tokens(x, shapes)
        if self.use_residual:
            out = MultiScaleFeatures([ops.add(o, i) for o, i in zip(out.levels, ms.levels)])
        return out


def enhanced_detrans_encoder(ms: MultiScaleFeatures, params: EnhancedDeTransEncoder) -> MultiScaleFeatures:
    return params(ms)
