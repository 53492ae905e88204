"""Differentiable primitives.

Every function takes :class:`Tensor` (or array-like constants), computes the
forward value with numpy and registers an analytic backward closure. Outputs
keep the floating dtype of their inputs, so the same code runs in float32 for
training and float64 for gradient checking. Reductions accumulate in float64.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import DimensionError, StateError
from .tensor import Tensor, as_tensor, make_result

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _rsum(x: np.ndarray, axis, keepdims=False) -> np.ndarray:
    return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return make_result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return make_result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return make_result(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError below
        out = np.exp(x.data)

    def backward(g):
        x._accumulate(g * out)

    return make_result(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return make_result(out, (x,), backward, "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        x._accumulate(g * mask)

    return make_result(out, (x,), backward, "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the normal CDF written through erf."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        x._accumulate(g * (cdf + x.data * pdf))

    return make_result(out.astype(x.dtype, copy=False), (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        x._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return make_result(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _rsum(x.data, axis, keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            axes = tuple(a % x.ndim for a in axes)
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g, x.shape))

    return make_result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return make_result(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes: tuple) -> Tensor:
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = np.argsort(axes)

    def backward(g):
        x._accumulate(g.transpose(inv))

    return make_result(out, (x,), backward, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    out = np.ascontiguousarray(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        x._accumulate(full)

    return make_result(out, (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return make_result(out, tensors, backward, "concat")


# ---------------------------------------------------------------------------
# dense layers and normalization


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the trailing axis; ``W`` is ``[Din, Dout]``."""
    din, dout = weight.shape
    if x.shape[-1] != din:
        raise DimensionError(f"linear: trailing dim {x.shape[-1]} != weight rows {din}")
    x2 = x.data.reshape(-1, din)
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, dout)
        if x.requires_grad:
            x._accumulate((g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            weight._accumulate(x2.T @ g2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(_rsum(g2, 0))

    return make_result(out.reshape(x.shape[:-1] + (dout,)), parents, backward, "linear")


def _mean64(x: np.ndarray, axis, dtype) -> np.ndarray:
    return np.mean(x, axis=axis, keepdims=True, dtype=np.float64).astype(dtype, copy=False)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if c == 0:
        raise DimensionError("layer_norm over an empty channel axis")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    dt = x.dtype
    xc = x.data - _mean64(x.data, -1, dt)
    inv = (1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True, dtype=np.float64) + eps)).astype(dt)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(inv * (gx - _mean64(gx, -1, dt) - xhat * _mean64(gx * xhat, -1, dt)))
        if gamma.requires_grad:
            gamma._accumulate(_rsum(g * xhat, lead))
        if beta.requires_grad:
            beta._accumulate(_rsum(g, lead))

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray | None,
               running_var: np.ndarray | None, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Batch normalization over ``(B, H, W)`` of an NCHW tensor.

    In training mode batch statistics are used (biased variance) and the
    running buffers, when given, are updated in place with the unbiased
    variance. Eval mode requires the running buffers.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects NCHW input, got shape {x.shape}")
    dt = x.dtype
    axes = (0, 2, 3)
    shp = (1, -1, 1, 1)
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mu = np.mean(x.data, axis=axes, dtype=np.float64)
        xc = x.data - mu.astype(dt).reshape(shp)
        var = np.mean(xc * xc, axis=axes, dtype=np.float64)
        inv = (1.0 / np.sqrt(var + eps)).astype(dt).reshape(shp)
        xhat = xc * inv
        if running_mean is not None:
            unbiased = var * n / (n - 1) if n > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise StateError("batch_norm in eval mode needs running statistics")
        inv = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(dt).reshape(shp)
        xhat = (x.data - running_mean.astype(dt).reshape(shp)) * inv
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def backward(g):
        if x.requires_grad:
            gx = g * gamma.data.reshape(shp)
            if training:
                dx = inv * (gx - _mean64(gx, axes, dt) - xhat * _mean64(gx * xhat, axes, dt))
            else:
                dx = gx * inv
            x._accumulate(dx)
        if gamma.requires_grad:
            gamma._accumulate(_rsum(g * xhat, axes))
        if beta.requires_grad:
            beta._accumulate(_rsum(g, axes))

    return make_result(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# convolutions


def _check_out(n: int, k: int, stride: int, padding: int) -> int:
    size = (n + 2 * padding - k) // stride + 1
    if size < 1:
        raise DimensionError(f"convolution output size {size} < 1 (n={n}, k={k}, stride={stride}, pad={padding})")
    return size


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """``[B*Ho*Wo, C*k*k]`` patch matrix of a padded NCHW array."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with a ``[Cout, Cin, k, k]`` kernel (im2col + GEMM)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects 4D input and weight")
    b, cin, h, w = x.shape
    cout, cin_w, k, k2 = weight.shape
    if cin != cin_w or k != k2:
        raise DimensionError(f"conv2d: input channels {cin} vs weight {weight.shape}")
    ho, wo = _check_out(h, k, stride, padding), _check_out(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out2 = cols @ wmat.T
    if bias is not None:
        out2 += bias.data
    out = np.ascontiguousarray(out2.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if weight.requires_grad:
            weight._accumulate((g2.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(_rsum(g2, 0))
        if not x.requires_grad:
            return
        if stride == 1 and padding <= k - 1:
            # full correlation of the padded gradient with the flipped, transposed kernel
            pad = k - 1 - padding
            gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
            gcols = _im2col(gp, k, 1, h, w)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            dx = (gcols @ wflip.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2)
            x._accumulate(np.ascontiguousarray(dx))
            return
        dcols = (g2 @ wmat).reshape(b, ho, wo, cin, k, k)
        dxp = np.zeros((b, xp.shape[2], xp.shape[3], cin), dtype=x.dtype)
        span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + span_h:stride, j:j + span_w:stride, :] += dcols[..., i, j]
        dx = dxp[:, padding:padding + h, padding:padding + w, :] if padding else dxp
        x._accumulate(np.ascontiguousarray(dx.transpose(0, 3, 1, 2)))

    return make_result(out, parents, backward, "conv2d")


def dwconv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Depth-wise convolution: one ``k x k`` kernel per channel, spatial size preserved."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("dwconv2d expects 4D input and weight")
    b, c, h, w = x.shape
    cw, one, k, k2 = weight.shape
    if cw != c or one != 1 or k != k2:
        raise DimensionError(f"dwconv2d: weight {weight.shape} incompatible with {c} channels")
    if k % 2 == 0:
        raise DimensionError("dwconv2d needs an odd kernel")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise DimensionError("dwconv2d padding must be (k-1)/2 to preserve spatial size")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = weight.data
    out = np.zeros(x.shape, dtype=np.result_type(x.dtype, wd.dtype))
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + h, j:j + w] * wd[:, 0, i, j].reshape(1, c, 1, 1)
    if bias is not None:
        out += bias.data.reshape(1, c, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if weight.requires_grad:
            win = sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(1, 0, 2, 3, 4, 5)
            patches = win.reshape(c, b * h * w, k * k)
            gc = g.transpose(1, 0, 2, 3).reshape(c, 1, b * h * w)
            weight._accumulate((gc @ patches).reshape(wd.shape).astype(wd.dtype, copy=False))
        if bias is not None and bias.requires_grad:
            bias._accumulate(_rsum(g, (0, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + h, j:j + w] += g * wd[:, 0, i, j].reshape(1, c, 1, 1)
            x._accumulate(dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp)

    return make_result(out, parents, backward, "dwconv2d")


def transpose_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Non-overlapping transposed convolution (kernel size == stride), weight ``[Cin, Cout, k, k]``.

    This is the exact adjoint of ``conv2d`` with the same weight, stride ``k``
    and no padding.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("transpose_conv2d expects 4D input and weight")
    b, cin, h, w = x.shape
    cin_w, cout, k, k2 = weight.shape
    if cin != cin_w or k != k2:
        raise DimensionError(f"transpose_conv2d: input channels {cin} vs weight {weight.shape}")
    if k != stride:
        raise DimensionError("transpose_conv2d requires kernel size == stride")
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wmat = weight.data.reshape(cin, cout * k * k)
    y = (x2 @ wmat).reshape(b, h, w, cout, k, k).transpose(0, 3, 1, 4, 2, 5)
    out = np.ascontiguousarray(y).reshape(b, cout, h * k, w * k)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(b, cout, h, k, w, k).transpose(0, 2, 4, 1, 3, 5).reshape(b * h * w, cout * k * k)
        if x.requires_grad:
            x._accumulate(np.ascontiguousarray((g2 @ wmat.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2)))
        if weight.requires_grad:
            weight._accumulate((x2.T @ g2).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(_rsum(g, (0, 2, 3)))

    return make_result(out, parents, backward, "transpose_conv2d")


# ---------------------------------------------------------------------------
# deformable sampling


def level_starts(level_shapes: Sequence[tuple[int, int]]) -> np.ndarray:
    """Prefix sums of ``H*W``; the last entry is the total token count."""
    sizes = [int(h) * int(w) for h, w in level_shapes]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


_DENSE_DOT_LIMIT = 1 << 24


def deform_sample(value: Tensor, level_shapes: Sequence[tuple[int, int]], loc: Tensor,
                  attn: Tensor | None = None) -> Tensor:
    """Attention-weighted bilinear sampling from a flattened multi-level value map.

    value: ``[B, Sv, M, d]`` with levels concatenated row-major along ``Sv``.
    loc:   ``[B, Sq, M, L, K, 2]`` normalized ``(y, x)`` in ``[0, 1]``; pixel ``i``
           has its center at ``(i + 0.5) / H``. Points outside the map are
           clamped to the border (zero gradient w.r.t. the clamped coordinate).
    attn:  ``[B, Sq, M, L, K]`` mixing weights, or ``None`` for all ones.

    Returns ``[B, Sq, M, d]``. Gradients flow to value, loc and attn.
    """
    b, sv, m, d = value.shape
    if loc.ndim != 6 or loc.shape[-1] != 2:
        raise DimensionError(f"deform_sample: bad location shape {loc.shape}")
    b2, sq, m2, n_lvl, k, _ = loc.shape
    shapes = np.asarray(level_shapes, dtype=np.int64).reshape(-1, 2)
    if n_lvl != len(shapes):
        raise DimensionError(f"deform_sample: {n_lvl} location levels but {len(shapes)} value levels")
    if (shapes <= 0).any():
        raise DimensionError("deform_sample: empty level")
    starts = level_starts(shapes)
    if b2 != b or m2 != m or starts[-1] != sv:
        raise DimensionError(f"deform_sample: value {value.shape} inconsistent with locations {loc.shape}")
    if attn is not None and attn.shape != loc.shape[:-1]:
        raise DimensionError(f"deform_sample: attention weights {attn.shape} vs locations {loc.shape}")

    dt = value.dtype
    hs = shapes[:, 0].reshape(1, 1, 1, n_lvl, 1).astype(loc.dtype)
    ws = shapes[:, 1].reshape(1, 1, 1, n_lvl, 1).astype(loc.dtype)
    py = loc.data[..., 0] * hs - 0.5
    px = loc.data[..., 1] * ws - 0.5
    pyc = np.clip(py, 0, hs - 1)
    pxc = np.clip(px, 0, ws - 1)
    y0 = np.minimum(np.floor(pyc), np.maximum(hs - 2, 0))
    x0 = np.minimum(np.floor(pxc), np.maximum(ws - 2, 0))
    # [..., 2] interpolation weights of the lower/upper neighbour along each axis
    wy = np.stack([y0 + 1 - pyc, pyc - y0], axis=-1).astype(dt, copy=False)
    wx = np.stack([x0 + 1 - pxc, pxc - x0], axis=-1).astype(dt, copy=False)
    bw = (wy[..., :, None] * wx[..., None, :]).reshape(wy.shape[:-1] + (4,))

    itype = np.int32 if b * sv * m < 2**31 - 1 else np.int64
    hi, wi = shapes[:, 0].astype(itype), shapes[:, 1].astype(itype)
    step_y = np.where(hi > 1, wi, 0)
    step_x = np.where(wi > 1, 1, 0).astype(itype)
    # corner order (y0,x0), (y0,x1), (y1,x0), (y1,x1) as offsets from the (y0,x0) token
    corner = np.stack([np.zeros_like(step_y), step_x, step_y, step_y + step_x], axis=-1).reshape(1, 1, 1, n_lvl, 1, 4)
    base = starts[:-1].astype(itype).reshape(1, 1, 1, n_lvl, 1)
    tok00 = base + y0.astype(itype) * wi.reshape(1, 1, 1, n_lvl, 1) + x0.astype(itype)
    row_base = (np.arange(b, dtype=itype).reshape(b, 1, 1, 1, 1) * (sv * m)
                + np.arange(m, dtype=itype).reshape(1, 1, m, 1, 1))
    tok = tok00[..., None] + corner
    cols = tok * m + row_base[..., None]

    a = None if attn is None else attn.data
    wts = bw if a is None else bw * a[..., None]
    rows = b * sq * m
    per_row = n_lvl * k * 4
    cols = cols.reshape(rows, per_row)
    mat = sp.csr_matrix((wts.reshape(-1), cols.reshape(-1),
                         np.arange(0, rows * per_row + 1, per_row, dtype=itype)),
                        shape=(rows, b * sv * m))
    v2 = value.data.reshape(b * sv * m, d)
    out = np.asarray(mat @ v2, dtype=dt).reshape(b, sq, m, d)
    parents = (value, loc) if attn is None else (value, loc, attn)

    def backward(g):
        g2 = g.reshape(rows, d)
        if value.requires_grad:
            value._accumulate(np.asarray(mat.T @ g2, dtype=dt).reshape(value.shape))
        need_loc = loc.requires_grad
        need_attn = attn is not None and attn.requires_grad
        if not (need_loc or need_attn):
            return
        # dot of the upstream gradient with every gathered corner value
        if b * m * sq * sv <= _DENSE_DOT_LIMIT:
            # all query/value dot products per (batch, head), then pick the sampled ones
            prod = np.matmul(g.transpose(0, 2, 1, 3), value.data.transpose(0, 2, 3, 1))
            q_idx = np.arange(sq, dtype=np.int64).reshape(1, sq, 1, 1, 1, 1)
            bm = (np.arange(b).reshape(b, 1, 1, 1, 1, 1) * m + np.arange(m).reshape(1, 1, m, 1, 1, 1))
            dots = prod.reshape(-1)[(bm * sq + q_idx) * sv + tok]
        else:
            dots = np.einsum("rnd,rd->rn", v2[cols], g2).reshape(bw.shape)
        if need_attn:
            attn._accumulate((bw * dots).sum(axis=-1))
        if need_loc:
            dots = dots.reshape(wy.shape[:-1] + (2, 2))
            # d/dy: upper-row minus lower-row values, mixed by the x weights; symmetric for x
            gy = ((dots[..., 1, :] - dots[..., 0, :]) * wx).sum(axis=-1)
            gx = ((dots[..., :, 1] - dots[..., :, 0]) * wy).sum(axis=-1)
            if a is not None:
                gy *= a
                gx *= a
            gy *= ((py >= 0) & (py <= hs - 1)) * hs
            gx *= ((px >= 0) & (px <= ws - 1)) * ws
            loc._accumulate(np.stack([gy, gx], axis=-1).astype(loc.dtype, copy=False))

    return make_result(out, parents, backward, "deform_sample")


def bilinear_sample(featmap: Tensor, points: Tensor) -> Tensor:
    """Sample ``[B, C, H, W]`` at normalized ``(y, x)`` points ``[B, P, 2]``; returns ``[B, P, C]``."""
    if featmap.ndim != 4:
        raise DimensionError("bilinear_sample expects an NCHW feature map")
    b, c, h, w = featmap.shape
    if h == 0 or w == 0:
        raise DimensionError("bilinear_sample on an empty map")
    p = points.shape[1]
    value = reshape(transpose(featmap, (0, 2, 3, 1)), (b, h * w, 1, c))
    loc = reshape(points, (b, p, 1, 1, 1, 2))
    return reshape(deform_sample(value, [(h, w)], loc), (b, p, c))
