"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations needed by the flow and its losses are provided. Arrays
are stored row-major (numpy default) in 64-bit precision unless a tensor is
created from a float32 array explicitly.

Broadcasting is limited to two documented cases: scalar-vs-tensor and a
trailing per-channel vector against a ``(..., C)`` activation. Both are
handled by the generic ``_unbroadcast`` reduction in the backward pass.

The graph is recorded eagerly while operations run. ``backward`` walks it in
reverse topological order, accumulates gradients into leaf tensors, and then
drops the graph so memory stays bounded between training steps.
"""

from __future__ import annotations

import contextlib
import threading
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import linalg as sla

from .exceptions import ContractError, DimensionError, DomainError, NumericError, SingularityError

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "finite_diff_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "tanh",
    "softplus",
    "square",
    "sqrt",
    "log_abs",
    "elementwise",
    "tsum",
    "reshape",
    "transpose",
    "concat",
    "slice_channels",
    "conv2d",
    "channel_matmul",
    "logabsdet",
]

# Matrices with |det| at or below this are treated as singular.
SINGULAR_DET = 1e-12

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode gradients."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float64, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __float__(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"cannot convert tensor of shape {self.shape} to float")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], grad_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    parents = tuple(parents)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), grad_fn, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = np.exp(a.data - out)
    return _result(out, (a,), lambda g: (g * sig,), "softplus")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    """Square root. The gradient at exactly 0 is taken to be 0."""
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)

    def grad_fn(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _result(out, (a,), grad_fn, "sqrt")


def log_abs(a) -> Tensor:
    """log|x|; zero entries raise :class:`SingularityError`."""
    a = as_tensor(a)
    if np.any(a.data == 0):
        raise SingularityError("log of zero")
    return _result(np.log(np.abs(a.data)), (a,), lambda g: (g / a.data,), "log_abs")


_UNARY = {"exp": exp, "tanh": tanh, "softplus": softplus, "square": square, "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch one of add, sub, mul, exp, tanh, softplus, square, sqrt by name."""
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ContractError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis))

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _result(out, (a,), grad_fn, "sum")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if _needs_add_at(idx) else full.__setitem__(idx, g)
        return (full,)

    return _result(np.array(out), (a,), grad_fn, "getitem")


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def slice_channels(a, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` along the last axis."""
    a = as_tensor(a)
    return _getitem(a, (Ellipsis, slice(start, stop)))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return _result(out, ts, grad_fn, "concat")


# ---------------------------------------------------------------------------
# convolution and channel mixing


def _as_batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected H×W×C or N×H×W×C input, got shape {x.shape}")


def conv2d(x, kernel, bias) -> Tensor:
    """Same-padded 2-D convolution (cross-correlation) over channels-last input.

    ``x`` is H×W×Cin or N×H×W×Cin, ``kernel`` is k×k×Cin×Cout with k odd and
    ``bias`` has Cout entries. Padding is zeros.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise DimensionError(f"kernel must be k×k×Cin×Cout with odd k, got {kernel.shape}")
    k, _, cin, cout = kernel.shape
    xb, unbatched = _as_batched(x.data)
    if xb.shape[-1] != cin:
        raise DimensionError(f"input has {xb.shape[-1]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"bias must have shape ({cout},), got {bias.shape}")
    n, h, w, _ = xb.shape
    p = k // 2
    xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0)))
    # N,H,W,C,k,k -> N,H,W,k,k,C
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * cin)
    kmat = kernel.data.reshape(k * k * cin, cout)
    out = (cols @ kmat + bias.data).reshape(n, h, w, cout)
    if unbatched:
        out = out[0]

    def grad_fn(g):
        g2 = g.reshape(n * h * w, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(n, h, w, k, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + h, j : j + w, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, p : p + h, p : p + w, :]
            if unbatched:
                gx = gx[0]
        return gx, gk, gb

    return _result(out, (x, kernel, bias), grad_fn, "conv2d")


def channel_matmul(x, weight) -> Tensor:
    """Left-multiply every pixel's channel vector by the C×C matrix ``weight``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or weight.shape[0] != weight.shape[1]:
        raise DimensionError(f"weight must be square, got {weight.shape}")
    c = weight.shape[0]
    if x.shape[-1] != c:
        raise DimensionError(f"input has {x.shape[-1]} channels, weight is {c}×{c}")
    out = x.data @ weight.data.T

    def grad_fn(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.reshape(-1, c).T @ x.data.reshape(-1, c) if weight.requires_grad else None
        return gx, gw

    return _result(out, (x, weight), grad_fn, "channel_matmul")


def logabsdet(weight) -> Tensor:
    """log|det W| from an LU factorisation with partial pivoting."""
    weight = as_tensor(weight)
    if weight.ndim != 2 or weight.shape[0] != weight.shape[1]:
        raise DimensionError(f"logabsdet needs a square matrix, got {weight.shape}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(weight.data, check_finite=True)
    diag = np.abs(np.diag(lu))
    if np.any(diag == 0):
        raise SingularityError("matrix is exactly singular")
    value = np.log(diag).sum()
    if value <= np.log(SINGULAR_DET):
        raise SingularityError(f"|det W| = {np.exp(value):.3e} is below {SINGULAR_DET}")

    def grad_fn(g):
        inv_t = sla.lu_solve((lu, piv), np.eye(weight.shape[0])).T
        return (g * inv_t,)

    return _result(np.asarray(value), (weight,), grad_fn, "logabsdet")


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor that contributed to ``loss``.

    Gradients accumulate into existing ``.grad`` arrays. The recorded graph is
    released afterwards.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise DomainError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(base))
        flat[i] = orig - eps
        fm = float(f(base))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(base.shape)
