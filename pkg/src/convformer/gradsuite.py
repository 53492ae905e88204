"""Registry of named finite-difference checks, shared by the CLI and the test suite."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from . import ops
from .deform_attn import MsMhsa, make_reference_points
from .detrans import EnhancedDeTransLayer
from .gradcheck import GradCheckReport, grad_check
from .tensor import ParameterStore, Tensor
from .train import dice_ce_loss

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-2

CHECKS: dict[str, Callable[[int], GradCheckReport]] = {}


def register(name: str):
    def deco(fn):
        CHECKS[name] = fn
        return fn
    return deco


def _simple(name: str, fn, *shapes, positive: tuple[int, ...] = (), tol: float = PRIMITIVE_TOL):
    def check(seed: int = 0) -> GradCheckReport:
        rng = np.random.default_rng(seed)
        inputs = [rng.uniform(0.5, 2.0, s) if i in positive else rng.normal(size=s) for i, s in enumerate(shapes)]
        return grad_check(fn, inputs, tol=tol, seed=seed, name=name)
    CHECKS[name] = check
    return check


_simple("add", ops.add, (3, 4), (4,))
_simple("sub", ops.sub, (3, 4), (3, 1))
_simple("mul", ops.mul, (2, 3, 4), (3, 4))
_simple("div", ops.div, (3, 4), (4,), positive=(1,))
_simple("exp", ops.exp, (3, 4))
_simple("log", ops.log, (3, 4), positive=(0,))
_simple("relu", ops.relu, (4, 5))
_simple("gelu", ops.gelu, (10,))
_simple("softmax", lambda x: ops.softmax(x, axis=-1), (3, 5))
_simple("log_softmax", lambda x: ops.log_softmax(x, axis=1), (3, 5, 2))
_simple("sum", lambda x: ops.sum(x, axis=(0, 2)), (2, 3, 4))
_simple("mean", lambda x: ops.mean(x, axis=1, keepdims=True), (2, 3, 4))
_simple("reshape", lambda x: ops.reshape(x, (6, 4)), (2, 3, 4))
_simple("transpose", lambda x: ops.transpose(x, (2, 0, 1)), (2, 3, 4))
_simple("getitem", lambda x: ops.getitem(x, (slice(None), slice(1, 3))), (2, 4, 3))
_simple("concat", lambda a, b: ops.concat([a, b], axis=1), (2, 3), (2, 2))
_simple("linear", ops.linear, (4, 3), (3, 5), (5,))
_simple("layer_norm", ops.layer_norm, (3, 6), (6,), (6,))
_simple("batch_norm", lambda x, g, b: ops.batch_norm(x, g, b, None, None, True), (3, 2, 3, 3), (2,), (2,))
_simple("conv2d", lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1), (2, 2, 4, 4), (3, 2, 3, 3), (3,))
_simple("conv2d_strided", lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
        (2, 3, 5, 5), (4, 3, 3, 3), (4,))
_simple("dwconv2d", ops.dwconv2d, (2, 3, 4, 4), (3, 1, 3, 3), (3,))
_simple("transpose_conv2d", lambda x, w, b: ops.transpose_conv2d(x, w, b, 2), (2, 3, 3, 3), (3, 2, 2, 2), (2,))


@register("bilinear_sample")
def _bilinear(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    inputs = [rng.normal(size=(2, 3, 4, 5)), rng.uniform(-0.1, 1.1, size=(2, 6, 2))]
    return grad_check(ops.bilinear_sample, inputs, seed=seed, name="bilinear_sample")


@register("deform_sample")
def _deform(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    shapes = [(3, 4), (2, 2)]
    inputs = [rng.normal(size=(2, 16, 2, 3)), rng.uniform(0, 1, size=(2, 5, 2, 2, 3, 2)),
              rng.uniform(size=(2, 5, 2, 2, 3))]
    return grad_check(lambda v, loc, a: ops.deform_sample(v, shapes, loc, a), inputs, seed=seed,
                      name="deform_sample")


@register("dice_ce_loss")
def _loss(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    target = rng.integers(0, 3, size=(2, 4, 4))
    return grad_check(lambda z: dice_ce_loss(z, target), [rng.normal(size=(2, 3, 4, 4))], seed=seed,
                      name="dice_ce_loss")


def _randomize(store: ParameterStore, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Replace the structured init so every parameter influences the output."""
    for _, t in store.named_parameters():
        t.data[...] = t.data + scale * rng.standard_normal(t.shape).astype(t.data.dtype)


@register("ms_mhsa")
def _ms_mhsa(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    store = ParameterStore(seed=seed, dtype=np.float64)
    shapes = [(4, 4), (2, 2)]
    attn = MsMhsa(store, "attn", dim=8, n_levels=2, heads=2, points=2)
    _randomize(store, rng)
    s = sum(h * w for h, w in shapes)
    query = Tensor(rng.normal(size=(1, s, 8)), name="query")
    pos = rng.normal(size=(1, s, 8))
    refs = make_reference_points(shapes).astype(np.float64)
    params = store.tensors()
    return grad_check(lambda q, *_: attn(q, pos, q, refs, shapes), [query] + params, seed=seed,
                      name="ms_mhsa", labels=["query"] + list(store.params))


@register("enhanced_detrans_layer")
def _layer(seed: int = 0) -> GradCheckReport:
    """Whole layer in float32 on a 2-level 4x4/2x2 pyramid, so the looser composite tolerance applies."""
    rng = np.random.default_rng(seed)
    store = ParameterStore(seed=seed, dtype=np.float32)
    shapes = [(4, 4), (2, 2)]
    layer = EnhancedDeTransLayer(store, "layer", dim=8, n_levels=2, heads=2, points=2, expansion=2)
    _randomize(store, rng)
    s = sum(h * w for h, w in shapes)
    x = Tensor(rng.normal(size=(1, s, 8)).astype(np.float32), name="x")
    pos = Tensor(rng.normal(size=(1, s, 8)).astype(np.float32))
    refs = make_reference_points(shapes)
    params = store.tensors()
    return grad_check(lambda t, *_: layer(t, pos, refs, shapes), [x] + params, h=3e-3, tol=COMPOSITE_TOL,
                      dtype=None, seed=seed, name="enhanced_detrans_layer", labels=["x"] + list(store.params))


def run(names=None, seed: int = 0) -> list[GradCheckReport]:
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient check(s): {unknown}")
    return [CHECKS[n](seed) for n in names]
