"""Dense-tensor numeric core with reverse-mode automatic differentiation.

Tensors hold contiguous float64 buffers.  Operations compute forward
values with numpy and, while a `Tape` is active on the current thread,
record a vector-Jacobian closure for every op whose inputs require
gradients.  `Tape.backward(root)` then walks the recorded ops in reverse
and accumulates gradients into every reachable `requires_grad` tensor.

Shapes are explicit: elementwise ops require identical shapes, with the
single exception that one operand may be a scalar (0-d).  Anything that
needs broadcasting goes through the explicit `broadcast_to`.  Shape
mismatches raise `ShapeError` naming the operation and both shapes.

A tape and the tensors it references are confined to one thread; several
independent tapes may run concurrently on different threads.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, ShapeError

LAYERNORM_EPS = 1e-5

Scalar = Union[int, float]


class Tensor:
    """A float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigurationError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def param(data) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.float64(x))
    raise ConfigurationError(f"expected Tensor or scalar, got {type(x).__name__}")


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.vjp = vjp  # grad_out -> tuple of grads aligned with inputs


_tls = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_tls, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of ops; use as a context manager around a forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_tls, "stack", None)
        if stack is None:
            stack = _tls.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tls.stack.pop()

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False

    def backward(self, root: Tensor) -> None:
        """Populate .grad for every requires_grad tensor reachable from root.

        root must be a scalar produced on this tape; calling backward a
        second time without reset() is rejected.
        """
        if self._consumed:
            raise ConfigurationError("backward() called twice on the same tape; reset() first")
        if root.data.shape != ():
            raise ConfigurationError(f"backward root must be a scalar, got shape {root.shape}")
        produced = {id(n.out) for n in self.nodes}
        if id(root) not in produced:
            raise ConfigurationError("backward root was not produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(root): np.ones(())}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            if node.out.requires_grad:
                _accumulate_tensor_grad(node.out, g_out)
            for inp, g_in in zip(node.inputs, node.vjp(g_out)):
                if g_in is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
        # whatever is left belongs to leaves (tensors not produced by any node)
        for node in self.nodes:
            for inp in node.inputs:
                g = grads.pop(id(inp), None)
                if g is not None and inp.requires_grad:
                    _accumulate_tensor_grad(inp, g)


def _accumulate_tensor_grad(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append(_Node(out, inputs, vjp))
    return out


def _result(value: np.ndarray, inputs: Sequence[Tensor]) -> Tensor:
    rg = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(value, dtype=np.float64)
    out.requires_grad = rg
    out.grad = None
    return out


# --------------------------------------------------------------------------
# Elementwise and scalar-compatible ops
# --------------------------------------------------------------------------

def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_for(operand: Tensor, g: np.ndarray) -> np.ndarray:
    return g.sum() if operand.shape == () and np.ndim(g) > 0 else g


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise("add", a, b)
    out = _result(a.data + b.data, (a, b))
    return _record(out, (a, b), lambda g: (_reduce_for(a, g), _reduce_for(b, g)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise("sub", a, b)
    out = _result(a.data - b.data, (a, b))
    return _record(out, (a, b), lambda g: (_reduce_for(a, g), _reduce_for(b, -g)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise("mul", a, b)
    out = _result(a.data * b.data, (a, b))
    return _record(
        out, (a, b),
        lambda g: (_reduce_for(a, g * b.data), _reduce_for(b, g * a.data)),
    )


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise("div", a, b)
    out = _result(a.data / b.data, (a, b))
    return _record(
        out, (a, b),
        lambda g: (
            _reduce_for(a, g / b.data),
            _reduce_for(b, -g * a.data / (b.data * b.data)),
        ),
    )


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0.0), (x,))
    return _record(out, (x,), lambda g: (g * (x.data > 0.0),))


def abs_(x: Tensor) -> Tensor:
    """Elementwise |x|; subgradient at 0 is 0."""
    out = _result(np.abs(x.data), (x,))
    return _record(out, (x,), lambda g: (g * np.sign(x.data),))


def log(x: Tensor) -> Tensor:
    out = _result(np.log(x.data), (x,))
    return _record(out, (x,), lambda g: (g / x.data,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient flows only where x > floor."""
    out = _result(np.maximum(x.data, floor), (x,))
    return _record(out, (x,), lambda g: (g * (x.data > floor),))


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for 2-d x 2-d, batched x 2-d, or equal-batch stacked operands."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.data.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ: {a.shape} and {b.shape}")
    out = _result(a.data @ b.data, (a, b))

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), vjp)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    out = _result(np.transpose(x.data, axes), (x,))
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = _result(x.data.reshape(shape), (x,))
    return _record(out, (x,), lambda g: (g.reshape(x.data.shape),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly tile x to `shape` (numpy broadcast rules, stated target)."""
    shape = tuple(int(s) for s in shape)
    try:
        value = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    out = _result(value, (x,))
    src = x.data.shape

    def vjp(g):
        extra = len(shape) - len(src)
        g = g.sum(axis=tuple(range(extra))) if extra else g
        keep = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g.reshape(src),)

    return _record(out, (x,), vjp)


# --------------------------------------------------------------------------
# Reductions
# --------------------------------------------------------------------------

def sum_(x: Tensor, axis: Optional[int] = None) -> Tensor:
    out = _result(x.data.sum(axis=axis), (x,))

    def vjp(g):
        if axis is None:
            return (np.full(x.data.shape, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _record(out, (x,), vjp)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.size if axis is None else x.data.shape[axis]
    out = _result(x.data.mean(axis=axis), (x,))

    def vjp(g):
        if axis is None:
            return (np.full(x.data.shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.data.shape).copy(),)

    return _record(out, (x,), vjp)


# --------------------------------------------------------------------------
# Shape surgery
# --------------------------------------------------------------------------

def concat_lastdim(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_lastdim: incompatible shapes {a.shape} and {b.shape}")
    out = _result(np.concatenate([a.data, b.data], axis=-1), (a, b))
    na = a.shape[-1]
    return _record(out, (a, b), lambda g: (g[..., :na], g[..., na:]))


def slice_lastdim(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[-1]):
        raise ShapeError(f"slice_lastdim: [{start}:{stop}] out of range for shape {x.shape}")
    out = _result(x.data[..., start:stop], (x,))

    def vjp(g):
        full = np.zeros(x.data.shape)
        full[..., start:stop] = g
        return (full,)

    return _record(out, (x,), vjp)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor; idx may have any shape.

    out[..., :] = x[idx[...], :].  The gradient scatter-adds back, so rows
    gathered twice receive twice the gradient.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-d input, got shape {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ConfigurationError(
            f"gather_rows: index out of range [0, {x.shape[0]}) "
            f"(min {idx.min()}, max {idx.max()})"
        )
    out = _result(x.data[idx], (x,))

    def vjp(g):
        full = np.zeros(x.data.shape)
        np.add.at(full, idx.ravel(), g.reshape(-1, x.data.shape[1]))
        return (full,)

    return _record(out, (x,), vjp)


def take_per_row(x: Tensor, cols: np.ndarray) -> Tensor:
    """out[i] = x[i, cols[i]] for a 2-d tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_per_row: expected 2-d input, got shape {x.shape}")
    cols = np.asarray(cols, dtype=np.int64)
    if cols.shape != (x.shape[0],):
        raise ShapeError(f"take_per_row: cols shape {cols.shape} vs rows {x.shape[0]}")
    if cols.size and (cols.min() < 0 or cols.max() >= x.shape[1]):
        raise ConfigurationError(f"take_per_row: column index out of range for shape {x.shape}")
    rows = np.arange(x.shape[0])
    out = _result(x.data[rows, cols], (x,))

    def vjp(g):
        full = np.zeros(x.data.shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _record(out, (x,), vjp)


# --------------------------------------------------------------------------
# Normalizations and pooling
# --------------------------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, (x,))

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), vjp)


def layernorm_lastdim(x: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    out = _result(y, (x,))

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return ((g - gm - y * gym) * inv,)

    return _record(out, (x,), vjp)


def avgpool2x2(x: Tensor) -> Tensor:
    """Parameter-free 2x2 average pooling over the trailing two axes of [n,c,h,w]."""
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool2x2: expected 4-d [n,c,h,w], got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x2: spatial dims must be even, got shape {x.shape}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = _result(blocks.mean(axis=(3, 5)), (x,))

    def vjp(g):
        spread = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (spread * 0.25,)

    return _record(out, (x,), vjp)


# --------------------------------------------------------------------------
# Composite helper
# --------------------------------------------------------------------------

def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias, with the bias explicitly broadcast."""
    y = matmul(x, weight)
    return add(y, broadcast_to(bias, y.shape))


# registry used by the gradient check suite
PRIMITIVES = (
    "add", "sub", "mul", "div", "relu", "abs_", "log", "clamp_min",
    "matmul", "transpose", "reshape", "broadcast_to", "sum_", "mean",
    "concat_lastdim", "slice_lastdim", "gather_rows", "take_per_row",
    "softmax_lastdim", "layernorm_lastdim", "avgpool2x2",
)
