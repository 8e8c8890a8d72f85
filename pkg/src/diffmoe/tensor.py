"""Dense tensors with tape-based reverse-mode differentiation.

Every ``Tensor`` produced by an op remembers its parents and a closure that
maps the output gradient to parent gradients.  ``GradTape`` linearises that
graph (topological order) for a scalar output and replays it backwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

import contextlib

_dtype = np.dtype(np.float64)


def default_dtype() -> np.dtype:
    return _dtype


def set_default_dtype(dtype) -> None:
    global _dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("only float32 and float64 are supported")
    _dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are stored in."""
    old = _dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class NonFiniteError(ValueError):
    pass


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=dtype or _dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward = _backward
        self.op = op

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def parents(self) -> tuple[Tensor, ...]:
        return self._parents

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> dict[int, np.ndarray]:
        """Backpropagate from a scalar, accumulating ``.grad`` on leaves."""
        tape = GradTape(self)
        grads = tape.backward()
        for node in tape.leaves():
            if node.requires_grad:
                g = grads.get(id(node))
                node.grad = g if node.grad is None or g is None else node.grad + g
        return grads


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_dtype), requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_dtype))


def _needs_grad(*xs: Tensor) -> bool:
    return any(x.requires_grad for x in xs)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    parents = tuple(parents)
    if _needs_grad(*parents):
        return Tensor(data, True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, False, op=op)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class GradTape:
    """Topologically ordered record of the ops that produced ``output``.

    Only nodes carrying ``requires_grad`` are recorded; a stop-gradient node
    is recorded as a leaf without parents, so nothing upstream of it can
    appear on the tape.
    """

    output: Tensor
    nodes: list[Tensor] = field(init=False)

    def __post_init__(self):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self.output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes = order

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def depends_on(self, t: Tensor) -> bool:
        return any(n is t for n in self.nodes)

    def backward(self, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        out = self.output
        if seed is None:
            if out.size != 1:
                raise ValueError("backward needs a scalar output or an explicit seed gradient")
            seed = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(seed, dtype=out.data.dtype)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        return grads

    def gradient(self, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of the output w.r.t. ``sources`` (zeros when unreachable)."""
        grads = self.backward()
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def grad(output: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
    return GradTape(output).gradient(sources)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    return _make(a.data ** exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a) -> Tensor:
    a = _wrap(a)
    s = _sigmoid_np(a.data)
    return _make(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),), "silu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = _wrap(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        x2 = x * x
        d_inner = (_GELU_C * 3 * 0.044715) * x2
        d_inner += _GELU_C
        local = 1.0 - th * th
        local *= x
        local *= d_inner
        local += 1.0 + th
        local *= 0.5
        return (g * local,)

    return _make(out, (a,), backward, "gelu")


def stop_gradient(a) -> Tensor:
    """Forward identity; the result is a fresh leaf so no gradient flows back."""
    a = _wrap(a)
    return Tensor(a.data, False, op="stop_gradient")


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def take(a, index) -> Tensor:
    """Basic or advanced indexing; the backward pass scatter-adds."""
    a = _wrap(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        if _is_basic(index) or _is_unique_rows(index):
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "take")


def _is_unique_rows(index) -> bool:
    if not isinstance(index, np.ndarray) or index.ndim != 1 or index.dtype.kind not in "iu":
        return False
    return np.unique(index).size == index.size


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)


def scatter_add_rows(n_rows: int, index: np.ndarray, values: Tensor) -> Tensor:
    """Zeros of shape ``[n_rows, *values.shape[1:]]`` with ``values[j]`` added at row ``index[j]``."""
    values = _wrap(values)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise IndexError(f"row index out of range for {n_rows} rows")
    out = np.zeros((n_rows,) + values.shape[1:], dtype=values.data.dtype)
    if index.size:
        order = np.argsort(index, kind="stable")
        sorted_idx = index[order]
        starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
        out[sorted_idx[starts]] = np.add.reduceat(values.data[order], starts, axis=0)
    return _make(out, (values,), lambda g: (g[index],), "scatter_add")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                # fold leading batch dims into one GEMM instead of a batched product + sum
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# Composite-but-fused ops
# ---------------------------------------------------------------------------


def _check_finite(x: np.ndarray, what: str):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what}: non-finite input")


def softmax_axis(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    _check_finite(a.data, "softmax_axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, no affine parameters."""
    a = _wrap(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), backward, "layer_norm")


def bce_with_logits(targets, logits) -> Tensor:
    """Mean binary cross-entropy in the stable ``max(z,0) - z*y + log1p(exp(-|z|))`` form."""
    y = _as_array(targets)
    z = _wrap(logits)
    if y.shape != z.shape:
        raise ValueError(f"bce_with_logits shape mismatch: {y.shape} vs {z.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_with_logits targets must be 0 or 1")
    _check_finite(z.data, "bce_with_logits")
    zd = z.data
    loss = np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    n = zd.size

    def backward(g):
        return (g * (_sigmoid_np(zd) - y) / n,)

    return _make(np.asarray(loss.mean()), (z,), backward, "bce_with_logits")


def mse(pred, target) -> Tensor:
    diff = _wrap(pred) - _wrap(target)
    return mean(diff * diff)


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------


def topk_desc(values, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the ``k`` largest entries, largest first, ties to the lower index."""
    v = np.asarray(values.data if isinstance(values, Tensor) else values)
    if v.ndim != 1:
        raise ValueError("topk_desc expects a 1-D input")
    if not 1 <= k <= v.shape[0]:
        raise ValueError(f"k={k} out of range for length {v.shape[0]}")
    idx = np.argsort(-v, kind="stable")[:k]
    return idx, v[idx]


# ---------------------------------------------------------------------------
# Finite-difference validation
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, coords=None) -> float:
    """Max over coordinates of ``|g_tape - g_fd| / max(1, |g_fd|)`` using central differences.

    ``coords`` optionally restricts the check to a subset of flat indices.
    """
    if _dtype != np.float64:
        raise ValueError("grad_check runs in float64 only")
    base = np.array(_as_array(x), dtype=np.float64)
    _check_finite(base, "grad_check")
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    _check_finite(out.data, "grad_check")
    (g_tape,) = grad(out, [xt])
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp = f(Tensor(xp.reshape(base.shape))).item()
        fm = f(Tensor(xm.reshape(base.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("grad_check: non-finite function value")
        g_fd = (fp - fm) / (2 * h)
        err = abs(g_tape.reshape(-1)[i] - g_fd) / max(1.0, abs(g_fd))
        worst = max(worst, err)
    return worst
