"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure mapping the output
gradient to per-parent gradients. ``backward`` walks the graph in reverse
topological order, visiting each node once.
"""

from __future__ import annotations

import contextlib
import functools
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "backward",
    "topological_order",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "square",
    "relu",
    "sigmoid",
    "clip",
    "sum",
    "mean",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "concat_channels",
    "take",
    "pick",
    "conv1d",
    "conv1d_output_length",
    "batchnorm1d",
    "softmax_channels",
    "linear",
    "global_avg_pool",
    "linear_interp_resize",
    "interp_matrix",
    "l2_normalize_rows",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible.

    ``dim`` names the offending dimension so callers can report it.
    """

    def __init__(self, message: str, dim: str | None = None):
        super().__init__(message)
        self.dim = dim


class NonFiniteError(FloatingPointError):
    """A forward value became NaN or infinite."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- introspection ---------------------------------------------------
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
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def backward(self) -> None:
        backward(self)

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Differentiable nodes reachable from ``root``, inputs before outputs."""
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


def backward(loss: Tensor, parameters: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    When ``parameters`` is given, those that the loss does not reach get an
    explicit zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}", dim="loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
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
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if parameters is not None:
        for p in parameters:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
        "div",
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero wherever the bound is active."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# -- reductions ------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if a.size == 0:
        raise ShapeError("mean of an empty tensor", dim="size")
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- structural ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}", dim="rank")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}", dim="inner"
        )
    def grad_fn(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _node(a.data @ b.data, (a, b), grad_fn, "matmul")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}", dim="rank")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors", dim="count")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shapes disagree: {[t.shape for t in ts]}", dim="time") from exc
    return _node(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Stack C_i x T tensors into (sum C_i) x T."""
    return concat(tensors, axis=0)


def take(a, index, axis: int = 0) -> Tensor:
    """Select slices along ``axis`` by integer index (repeats allowed)."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return _node(np.take(a.data, index, axis=axis), (a,), grad_fn, "take")


def pick(a, rows, cols) -> Tensor:
    """Gather ``a[rows[i], cols[i]]`` into a 1-D tensor."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _node(a.data[rows, cols], (a,), grad_fn, "pick")


# -- convolution -------------------------------------------------------------


def conv1d_output_length(T: int, k: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (T + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv1d(x, weight, bias=None, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution of a C_in x T input with a C_out x C_in x k kernel.

    Zero padding on both ends. Implemented as an im2col gather followed by a
    single matmul.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2:
        raise ShapeError(f"conv1d input must be C_in x T, got {x.shape}", dim="input.rank")
    if weight.ndim != 3:
        raise ShapeError(f"conv1d weight must be C_out x C_in x k, got {weight.shape}", dim="weight.rank")
    c_in, T = x.shape
    c_out, w_in, k = weight.shape
    if w_in != c_in:
        raise ShapeError(f"conv1d channel mismatch: input has {c_in}, weight expects {w_in}", dim="C_in")
    if k < 1 or stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError(
            f"conv1d needs k>=1, stride>=1, dilation>=1, padding>=0 (got k={k}, stride={stride}, "
            f"dilation={dilation}, padding={padding})",
            dim="hyper",
        )
    if T < 1:
        raise ShapeError("conv1d on an empty sequence", dim="T")
    extent = dilation * (k - 1) + 1
    if extent > T + 2 * padding:
        raise ShapeError(
            f"conv1d kernel extent {extent} exceeds padded length {T + 2 * padding}", dim="T"
        )
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d bias must have shape ({c_out},), got {bias.shape}", dim="C_out")

    t_out = conv1d_output_length(T, k, stride, dilation, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    starts = np.arange(t_out) * stride
    idx = starts[None, :] + dilation * np.arange(k)[:, None]  # k x T'
    cols = xp[:, idx].reshape(c_in * k, t_out)
    w2 = weight.data.reshape(c_out, c_in * k)
    out = w2 @ cols
    if bias is not None:
        out = out + bias.data[:, None]

    def grad_fn(g):
        dw = (g @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (w2.T @ g).reshape(c_in, k, t_out)
            dxp = np.zeros_like(xp)
            for j in range(k):
                # positions within one tap are distinct, so plain fancy-index add is safe
                dxp[:, idx[j]] += dcols[:, j, :]
            dx = dxp[:, padding : padding + T] if padding else dxp
        db = g.sum(axis=1) if bias is not None else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, grad_fn, "conv1d")


# -- normalization and heads -------------------------------------------------


def batchnorm1d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of a C x N input over its N positions.

    In training mode the batch statistics are used and the running buffers
    are updated in place; otherwise the running buffers are used.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 2:
        raise ShapeError(f"batchnorm1d expects C x N, got {x.shape}", dim="rank")
    c, n = x.shape
    if n < 1:
        raise ShapeError("batchnorm1d on an empty tensor", dim="N")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm1d scale/shift must match channel count", dim="C")
    if training:
        mu = x.data.mean(axis=1)
        var = x.data.var(axis=1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.copy()
        var = running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[:, None]) * inv[:, None]
    out = gamma.data[:, None] * xhat + beta.data[:, None]

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=1)
        dbeta = g.sum(axis=1)
        dxhat = g * gamma.data[:, None]
        if training:
            dx = (
                inv[:, None]
                / n
                * (n * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
            )
        else:
            dx = dxhat * inv[:, None]
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), grad_fn, "batchnorm1d")


def softmax_channels(x) -> Tensor:
    """Softmax over the channel axis (axis 0) independently per time step."""
    x = _as_tensor(x)
    if x.size == 0:
        raise ShapeError("softmax of an empty tensor", dim="size")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=0, keepdims=True)
    return _node(
        out,
        (x,),
        lambda g: (out * (g - (g * out).sum(axis=0, keepdims=True)),),
        "softmax_channels",
    )


def linear(x, weight, bias=None) -> Tensor:
    """Row-wise affine map: N x C_in @ C_in x C_out (+ C_out)."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def global_avg_pool(x) -> Tensor:
    """C x T -> C x 1."""
    x = _as_tensor(x)
    if x.size == 0:
        raise ShapeError("global_avg_pool of an empty tensor", dim="T")
    return mean(x, axis=1, keepdims=True)


@functools.lru_cache(maxsize=256)
def interp_matrix(T: int, target_T: int) -> np.ndarray:
    """T x target_T matrix R such that x @ R resizes x linearly along time.

    Sample positions align the endpoints: output j reads input position
    j * (T - 1) / (target_T - 1).
    """
    if T < 1 or target_T < 1:
        raise ShapeError(f"cannot resize length {T} to {target_T}", dim="T")
    R = np.zeros((T, target_T))
    if T == 1:
        R[0, :] = 1.0
    elif target_T == 1:
        R[0, 0] = 1.0
    else:
        pos = np.arange(target_T) * (T - 1) / (target_T - 1)
        lo = np.minimum(np.floor(pos).astype(int), T - 2)
        frac = pos - lo
        cols = np.arange(target_T)
        R[lo, cols] += 1.0 - frac
        R[lo + 1, cols] += frac
    R.setflags(write=False)
    return R


def linear_interp_resize(x, target_T: int) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"linear_interp_resize expects a non-empty C x T tensor, got {x.shape}", dim="T")
    if target_T < 1:
        raise ShapeError(f"target length must be >= 1, got {target_T}", dim="target_T")
    if x.shape[1] == target_T:
        return x
    return matmul(x, interp_matrix(x.shape[1], int(target_T)))


def l2_normalize_rows(x) -> Tensor:
    """Scale each row to unit norm; all-zero rows stay zero."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    out = x.data / safe

    def grad_fn(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / safe,)

    return _node(out, (x,), grad_fn, "l2_normalize_rows")
