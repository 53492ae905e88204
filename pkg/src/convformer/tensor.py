"""Dense tensor with reverse-mode gradients, and the parameter store.

A ``Tensor`` wraps a numpy array. Operations in :mod:`convformer.ops` build a
graph by attaching a backward closure and the parent tensors to their output;
``Tensor.backward`` walks that graph in reverse topological order and
accumulates gradients into ``.grad`` of every tensor that requires one.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from collections.abc import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, NumericError, StateError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("_backward", "_parents", "data", "grad", "name", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this tensor; a scalar output defaults to d/dself = 1."""
        if not self.requires_grad:
            raise StateError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None],
                op: str) -> Tensor:
    """Wrap an op output, checking finiteness and wiring the backward closure."""
    if not np.isfinite(data).all():
        raise NumericError(f"{op}: non-finite values in output")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class Param:
    """A trainable tensor together with its AdamW moments."""

    __slots__ = ("m", "tensor", "v")

    def __init__(self, tensor: Tensor):
        self.tensor = tensor
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None


class ParameterStore:
    """Ordered, name-addressed collection of trainable tensors and state buffers.

    Parameter names are dot-separated paths that mirror module nesting. Buffers
    hold non-trainable state (batch-norm running statistics) that must travel
    with checkpoints but is excluded from parameter counts and the optimizer.
    """

    def __init__(self, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.params: OrderedDict[str, Param] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.training = True
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise StateError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = Param(t)
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise StateError(f"duplicate buffer name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self.buffers[name] = arr
        return arr

    def glorot(self, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return self.rng.uniform(-bound, bound, size=shape)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, p in self.params.items():
            yield name, p.tensor

    def tensors(self) -> list[Tensor]:
        return [p.tensor for p in self.params.values()]

    def num_parameters(self) -> int:
        return int(sum(p.tensor.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.grad = None

    def state_items(self) -> Iterator[tuple[str, np.ndarray]]:
        """Parameters then buffers, in construction order."""
        for name, p in self.params.items():
            yield name, p.tensor.data
        yield from self.buffers.items()

    def load_state(self, items: dict[str, np.ndarray]) -> None:
        expected = [n for n, _ in self.state_items()]
        missing = [n for n in expected if n not in items]
        extra = [n for n in items if n not in set(expected)]
        if missing or extra:
            raise StateError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in items.items():
            target = self.params[name].tensor.data if name in self.params else self.buffers[name]
            if target.shape != arr.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {target.shape}")
            target[...] = arr
