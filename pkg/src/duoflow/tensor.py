"""Reverse-mode autodiff over numpy arrays, sized for this project's models.

Tape-based: every differentiable op records a backward closure on the
produced tensor. Gradients accumulate (never overwrite), so shared
subexpressions are handled correctly. The default dtype is a process-global
switch: float64 for gradient checking, float32 for training runs.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "MaskError",
    "set_default_dtype",
    "get_default_dtype",
    "no_grad",
    "is_grad_enabled",
    "concat",
    "matmul",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "silu",
    "LAYER_NORM_EPS",
]

LAYER_NORM_EPS = 1e-6

_DEFAULT_DTYPE = np.float64
# grad mode is per-thread so concurrent training runs cannot blind each other
_GRAD_MODE = threading.local()


class ShapeError(ValueError):
    """Operands have incompatible shapes; message names both."""


class MaskError(ValueError):
    """A softmax row has no valid column to normalize over."""


def set_default_dtype(dtype) -> None:
    """Set the process-wide float dtype (np.float32 or np.float64).

    Accepts 32/64 or "32"/"64" for convenience from CLI flags.
    """
    global _DEFAULT_DTYPE
    if dtype in (32, "32", np.float32):
        _DEFAULT_DTYPE = np.float32
    elif dtype in (64, "64", np.float64):
        _DEFAULT_DTYPE = np.float64
    else:
        raise ValueError(f"unsupported dtype {dtype!r}")


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / data prep)."""
    prev = is_grad_enabled()
    _GRAD_MODE.enabled = False
    try:
        yield
    finally:
        _GRAD_MODE.enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_GRAD_MODE, "enabled", True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """n-d float array with optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() on tensor of shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = track
        out.grad = None
        out._backward = backward if track else None
        out._parents = parents if track else ()
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse pass from this tensor, accumulating into .grad buffers."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient requires a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != output shape {self.data.shape}")

        # Iterative topological sort (construction order is deterministic).
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                # every tracked tensor ends the pass with a populated grad
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # -- arithmetic --------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype), dtype=self.data.dtype)

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        data = a.data + b.data

        def backward(g):
            return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

        return Tensor._make(data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def backward(g):
            return ((a, -g),)

        return Tensor._make(-a.data, (a,), backward)

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        data = a.data - b.data

        def backward(g):
            return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

        return Tensor._make(data, (a, b), backward)

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        data = a.data * b.data

        def backward(g):
            return (
                (a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape)),
            )

        return Tensor._make(data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return self * (1.0 / float(other))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        a = self
        data = a.data[idx]
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=a.data.dtype)

        def backward(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            return ((a, ga),)

        return Tensor._make(data, (a,), backward)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape

        def backward(g):
            return ((a, g.reshape(old)),)

        return Tensor._make(a.data.reshape(shape), (a,), backward)

    def swapaxes(self, ax0: int, ax1: int) -> "Tensor":
        a = self

        def backward(g):
            return ((a, g.swapaxes(ax0, ax1)),)

        return Tensor._make(a.data.swapaxes(ax0, ax1), (a,), backward)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=a.data.dtype)

        def backward(g):
            gg = g
            if not keepdims and axis is not None:
                axes = axis if isinstance(axis, tuple) else (axis,)
                axes = tuple(ax % a.data.ndim for ax in axes)
                shp = [1 if i in axes else n for i, n in enumerate(a.data.shape)]
                gg = g.reshape(shp)
            return ((a, np.broadcast_to(gg, a.data.shape).copy()),)

        return Tensor._make(data, (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        if axis is None:
            count = a.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for ax in axes:
                count *= a.data.shape[ax % a.data.ndim]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with leading batch-dim broadcasting.

    Raises ShapeError naming both shapes when inner dimensions disagree.
    """
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects Tensors")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ((a, ga), (b, gb))

    return Tensor._make(data, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an axis; gradient splits back to each input."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of no tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append((t, g[tuple(sl)]))
        return tuple(out)

    return Tensor._make(data, tuple(tensors), backward)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked columns come out exactly 0.

    `mask` is a boolean validity array broadcastable to x.shape. Every row
    must keep at least one valid column, otherwise MaskError is raised.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        valid = np.broadcast_to(mask, x.data.shape)
        if not valid.any(axis=-1).all():
            raise MaskError("softmax row with every column masked (attention over empty key set)")
        logits = np.where(valid, x.data, -np.inf)
    else:
        logits = x.data
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        # d logits = y * (g - sum(g*y)); masked columns have y == 0 exactly
        tmp = (g * out_data).sum(axis=-1, keepdims=True)
        return ((x, out_data * (g - tmp)),)

    return Tensor._make(out_data, (x,), backward)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Epsilon is fixed at LAYER_NORM_EPS (1e-6).
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    out_data = xhat * scale.data + shift.data

    def backward(g):
        n = x.data.shape[-1]
        gxhat = g * scale.data
        gscale = _unbroadcast(g * xhat, scale.data.shape)
        gshift = _unbroadcast(g, shift.data.shape)
        mean_g = gxhat.mean(axis=-1, keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - mean_g - xhat * mean_gx)
        del n
        return ((x, gx), (scale, gscale), (shift, gshift))

    return Tensor._make(out_data, (x, scale, shift), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)
    out_data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return ((x, g * dx),)

    return Tensor._make(out_data, (x,), backward)


def silu(x: Tensor) -> Tensor:
    """SiLU: x * sigmoid(x)."""
    s = 1.0 / (1.0 + np.exp(-x.data))
    out_data = x.data * s

    def backward(g):
        return ((x, g * (s * (1.0 + x.data * (1.0 - s)))),)

    return Tensor._make(out_data, (x,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack along a new axis (concat of expanded views)."""
    expanded = []
    for t in tensors:
        shp = list(t.data.shape)
        shp.insert(axis if axis >= 0 else axis + t.data.ndim + 1, 1)
        expanded.append(t.reshape(shp))
    return concat(expanded, axis=axis)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse operand shapes disagree: {a.data.shape} vs {b.data.shape}")
    d = a - b
    return (d * d).mean()


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
