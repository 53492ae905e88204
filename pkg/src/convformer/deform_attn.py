"""Multi-scale multi-head deformable self-attention over flattened feature pyramids."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .layers import Linear
from .tensor import ParameterStore, Tensor


@dataclass
class MultiScaleFeatures:
    """Ordered pyramid of ``[B, C, H_l, W_l]`` maps sharing batch and channel sizes."""

    levels: list[Tensor]

    def __post_init__(self):
        if not self.levels:
            raise DimensionError("empty pyramid")
        b, c = self.levels[0].shape[:2]
        for lvl in self.levels:
            if lvl.ndim != 4 or lvl.shape[:2] != (b, c):
                raise DimensionError(f"pyramid levels disagree on batch/channels: {[t.shape for t in self.levels]}")

    @property
    def level_shapes(self) -> list[tuple[int, int]]:
        return [(t.shape[2], t.shape[3]) for t in self.levels]

    @property
    def level_offsets(self) -> list[int]:
        return ops.level_starts(self.level_shapes).tolist()

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]

    def __len__(self) -> int:
        return len(self.levels)


def flatten_multiscale(ms: MultiScaleFeatures) -> Tensor:
    """``[B, S, C]`` tokens: each level row-major, levels concatenated in order."""
    b, c = ms.levels[0].shape[:2]
    parts = [ops.reshape(ops.transpose(t, (0, 2, 3, 1)), (b, t.shape[2] * t.shape[3], c)) for t in ms.levels]
    return parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)


def unflatten_tokens(tokens: Tensor, level_shapes: Sequence[tuple[int, int]]) -> MultiScaleFeatures:
    b, s, c = tokens.shape
    starts = ops.level_starts(level_shapes)
    if starts[-1] != s:
        raise DimensionError(f"{s} tokens but level shapes {list(level_shapes)} hold {starts[-1]}")
    if len(level_shapes) == 1:
        h, w = level_shapes[0]
        return MultiScaleFeatures([ops.transpose(ops.reshape(tokens, (b, h, w, c)), (0, 3, 1, 2))])
    levels = []
    for (h, w), s0, s1 in zip(level_shapes, starts[:-1], starts[1:]):
        piece = ops.getitem(tokens, (slice(None), slice(int(s0), int(s1))))
        levels.append(ops.transpose(ops.reshape(piece, (b, h, w, c)), (0, 3, 1, 2)))
    return MultiScaleFeatures(levels)


def make_reference_points(level_shapes: Sequence[tuple[int, int]], batch: int = 1) -> np.ndarray:
    """``[B, S, L, 2]`` normalized ``(y, x)`` centres of every token, repeated for each level."""
    if not level_shapes:
        raise DimensionError("no levels")
    pts = []
    for h, w in level_shapes:
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        pts.append(np.stack([ys.ravel(), xs.ravel()], axis=-1))
    flat = np.concatenate(pts, axis=0)
    refs = np.repeat(flat[:, None, :], len(level_shapes), axis=1)
    return np.broadcast_to(refs[None], (batch,) + refs.shape).astype(np.float32)


class MsMhsa:
    """Deformable attention: every token samples ``K`` points per level per head.

    Sampling offsets are predicted in pixel units of each level and divided by
    that level's extent. The offset projection's weights start at zero, with a
    per-head direction pattern in its bias so the ``K`` points are distinct;
    the attention-weight projection starts at zero, giving uniform weights.
    """

    def __init__(self, store: ParameterStore, name: str, dim: int, n_levels: int,
                 heads: int = 4, points: int = 4):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.n_levels, self.heads, self.points = dim, n_levels, heads, points
        self.value_proj = Linear(store, f"{name}.value_proj", dim, dim)
        self.sampling_offsets = Linear(store, f"{name}.sampling_offsets", dim, heads * n_levels * points * 2)
        self.attention_weights = Linear(store, f"{name}.attention_weights", dim, heads * n_levels * points)
        self.output_proj = Linear(store, f"{name}.output_proj", dim, dim)
        self.sampling_offsets.weight.data[...] = 0
        self.sampling_offsets.bias.data[...] = self._direction_grid().reshape(-1)
        self.attention_weights.weight.data[...] = 0
        self.attention_weights.bias.data[...] = 0
        self.last_weights: np.ndarray | None = None

    def _direction_grid(self) -> np.ndarray:
        theta = np.arange(self.heads) * (2 * np.pi / self.heads)
        grid = np.stack([np.sin(theta), np.cos(theta)], axis=-1)
        grid = grid / np.abs(grid).max(axis=-1, keepdims=True)
        grid = np.tile(grid[:, None, None, :], (1, self.n_levels, self.points, 1))
        grid *= np.arange(1, self.points + 1).reshape(1, 1, -1, 1)
        return grid

    def __call__(self, query: Tensor, pos_embed: Tensor | None, values, refs: np.ndarray,
                 level_shapes: Sequence[tuple[int, int]] | None = None) -> Tensor:
        """``values`` is a :class:`MultiScaleFeatures` or already-flattened ``[B, S, C]`` tokens."""
        if isinstance(values, MultiScaleFeatures):
            level_shapes = values.level_shapes
            values = flatten_multiscale(values)
        elif level_shapes is None:
            raise DimensionError("flattened values need level_shapes")
        n_lvl = len(level_shapes)
        if n_lvl != self.n_levels or refs.shape[-2] != n_lvl:
            raise DimensionError(f"attention built for {self.n_levels} levels; values have {n_lvl}, "
                                 f"reference points {refs.shape[-2]}")
        b, s, c = query.shape
        m, k, d = self.heads, self.points, self.dim // self.heads
        q = query if pos_embed is None else ops.add(query, pos_embed)

        value = ops.reshape(self.value_proj(values), (b, values.shape[1], m, d))
        offsets = ops.reshape(self.sampling_offsets(q), (b, s, m, n_lvl, k, 2))
        extent = np.asarray(level_shapes, dtype=query.dtype).reshape(1, 1, 1, n_lvl, 1, 2)
        loc = ops.add(ops.div(offsets, extent), refs.reshape(refs.shape[0], s, 1, n_lvl, 1, 2))
        logits = ops.reshape(self.attention_weights(q), (b, s, m, n_lvl * k))
        weights = ops.reshape(ops.softmax(logits, axis=-1), (b, s, m, n_lvl, k))
        self.last_weights = weights.data
        sampled = ops.deform_sample(value, level_shapes, loc, weights)
        return self.output_proj(ops.reshape(sampled, (b, s, c)))


def ms_mhsa(query: Tensor, pos_embed: Tensor | None, ms_values: MultiScaleFeatures, refs: np.ndarray,
            params: MsMhsa) -> Tensor:
    return params(query, pos_embed, ms_values, refs)
