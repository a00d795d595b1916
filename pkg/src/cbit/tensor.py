"""Dense float64 tensors with reverse-mode automatic differentiation.

A small, self-contained engine covering exactly the operations the encoder
and the training objectives are built from: matrix products, row softmax,
layer normalisation, GeLU, inverted dropout, embedding lookups, flat
gathers and the scalar reductions the losses reduce to.  Every op records
a backward closure; calling :meth:`Tensor.backward` on a scalar loss walks
the tape in reverse topological order and accumulates gradients on every
tensor created with ``requires_grad=True``.

All data is 64-bit float and every op checks that its output is finite; a
NaN or Inf anywhere raises :class:`NumericError` instead of propagating
silently through a training run.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError

__all__ = [
    "Tensor",
    "gather_rows",
    "stack",
    "concat",
    "cosine_sim",
    "grad_check",
    "no_grad",
    "flop_count",
    "reset_flop_count",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True
_flops = 0


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def flop_count() -> int:
    """Floating-point operations executed by matrix products so far."""
    return _flops


def reset_flop_count() -> None:
    global _flops
    _flops = 0


def _check_finite(arr: np.ndarray) -> np.ndarray:
    # sum() folds NaN/Inf into one scalar, much cheaper than a full
    # isfinite() scan on the hot path; the scan only confirms real failures
    if arr.size and not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericError("non-finite value produced by a tensor operation")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _sigmoid(arr: np.ndarray) -> np.ndarray:
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    e = np.exp(arr[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Tensor:
    """A dense float64 array plus the autodiff bookkeeping around it."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _check_finite(np.asarray(data, dtype=np.float64))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[], None] | None = None
        self._parents: tuple["Tensor", ...] = ()

    # ------------------------------------------------------------------
    # introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # ------------------------------------------------------------------
    # autograd core
    # ------------------------------------------------------------------
    def _acc(self, grad) -> None:
        if self.grad is None:
            self.grad = np.zeros(self.data.shape)
        self.grad += grad

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) on every requires_grad ancestor.

        Only scalar (single-element) nodes may seed a backward pass.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss node")
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones(self.data.shape)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            def bw():
                g = out.grad
                if self.requires_grad:
                    self._acc(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._acc(_unbroadcast(g, other.data.shape))
            out = _node(self.data + other.data, (self, other), bw)
            return out

        def bw():
            if self.requires_grad:
                self._acc(_unbroadcast(out.grad, self.data.shape))
        out = _node(self.data + other, (self,), bw)
        return out

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            def bw():
                g = out.grad
                if self.requires_grad:
                    self._acc(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._acc(-_unbroadcast(g, other.data.shape))
            out = _node(self.data - other.data, (self, other), bw)
            return out

        def bw():
            if self.requires_grad:
                self._acc(_unbroadcast(out.grad, self.data.shape))
        out = _node(self.data - other, (self,), bw)
        return out

    def __rsub__(self, other) -> "Tensor":
        def bw():
            if self.requires_grad:
                self._acc(-_unbroadcast(out.grad, self.data.shape))
        out = _node(other - self.data, (self,), bw)
        return out

    def __neg__(self) -> "Tensor":
        def bw():
            if self.requires_grad:
                self._acc(-out.grad)
        out = _node(-self.data, (self,), bw)
        return out

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            def bw():
                g = out.grad
                if self.requires_grad:
                    self._acc(_unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    other._acc(_unbroadcast(g * self.data, other.data.shape))
            out = _node(self.data * other.data, (self, other), bw)
            return out

        def bw():
            if self.requires_grad:
                self._acc(_unbroadcast(out.grad * other, self.data.shape))
        out = _node(self.data * other, (self,), bw)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            def bw():
                g = out.grad
                if self.requires_grad:
                    self._acc(_unbroadcast(g / other.data, self.data.shape))
                if other.requires_grad:
                    other._acc(_unbroadcast(-g * out.data / other.data,
                                            other.data.shape))
            out = _node(self.data / other.data, (self, other), bw)
            return out

        def bw():
            if self.requires_grad:
                self._acc(_unbroadcast(out.grad / other, self.data.shape))
        out = _node(self.data / other, (self,), bw)
        return out

    def __rtruediv__(self, other) -> "Tensor":
        def bw():
            if self.requires_grad:
                self._acc(_unbroadcast(-out.grad * out.data / self.data,
                                       self.data.shape))
        out = _node(other / self.data, (self,), bw)
        return out

    def __pow__(self, exponent) -> "Tensor":
        p = float(exponent)

        def bw():
            if self.requires_grad:
                self._acc(out.grad * p * self.data ** (p - 1.0))
        out = _node(self.data ** p, (self,), bw)
        return out

    def __matmul__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            other = Tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands must have at least 2 dimensions")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(
                f"matmul dimension mismatch: {a.shape} @ {b.shape}")
        result = a @ b
        global _flops
        _flops += 2 * result.size * a.shape[-1]

        def bw():
            g = out.grad
            if self.requires_grad:
                self._acc(_unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape))
            if other.requires_grad:
                other._acc(_unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape))
        out = _node(result, (self, other), bw)
        return out

    # ------------------------------------------------------------------
    # elementwise functions
    # ------------------------------------------------------------------
    def exp(self) -> "Tensor":
        def bw():
            if self.requires_grad:
                self._acc(out.grad * out.data)
        out = _node(np.exp(self.data), (self,), bw)
        return out

    def log(self) -> "Tensor":
        def bw():
            if self.requires_grad:
                self._acc(out.grad / self.data)
        with np.errstate(invalid="ignore", divide="ignore"):
            value = np.log(self.data)
        out = _node(value, (self,), bw)
        return out

    def sqrt(self) -> "Tensor":
        def bw():
            if self.requires_grad:
                self._acc(out.grad * 0.5 / out.data)
        out = _node(np.sqrt(self.data), (self,), bw)
        return out

    def sigmoid(self) -> "Tensor":
        def bw():
            if self.requires_grad:
                self._acc(out.grad * out.data * (1.0 - out.data))
        out = _node(_sigmoid(self.data), (self,), bw)
        return out

    def log_sigmoid(self) -> "Tensor":
        """log(sigmoid(x)), computed without overflow for large |x|."""
        x = self.data
        value = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))),
                         x - np.log1p(np.exp(-np.abs(x))))

        def bw():
            if self.requires_grad:
                self._acc(out.grad * _sigmoid(-x))
        out = _node(value, (self,), bw)
        return out

    def gelu(self) -> "Tensor":
        """Gaussian error linear unit in its exact erf form."""
        x = self.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

        def bw():
            if self.requires_grad:
                pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
                self._acc(out.grad * (cdf + x * pdf))
        out = _node(x * cdf, (self,), bw)
        return out

    # ------------------------------------------------------------------
    # reductions and reshaping
    # ------------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        def bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            if self.requires_grad:
                self._acc(np.broadcast_to(g, self.data.shape))
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for a in axes:
                count *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def bw():
            if self.requires_grad:
                self._acc(out.grad.reshape(self.data.shape))
        out = _node(self.data.reshape(shape), (self,), bw)
        return out

    @property
    def mT(self) -> "Tensor":
        """Transpose of the trailing two axes (batched matrix transpose)."""
        if self.data.ndim < 2:
            raise ValueError("mT requires at least 2 dimensions")

        def bw():
            if self.requires_grad:
                self._acc(np.swapaxes(out.grad, -1, -2))
        out = _node(np.swapaxes(self.data, -1, -2), (self,), bw)
        return out

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ValueError("T is defined for 2-D tensors; use mT for batches")
        return self.mT

    def take(self, indices) -> "Tensor":
        """Gather elements by flat (row-major) index; backward scatters."""
        idx = np.asarray(indices, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= self.data.size):
            raise IndexError("take index out of range")
        values = self.data.reshape(-1)[idx]

        def bw():
            if self.requires_grad:
                if self.grad is None:
                    self.grad = np.zeros(self.data.shape)
                np.add.at(self.grad.reshape(-1), idx.reshape(-1),
                          out.grad.reshape(-1))
        out = _node(values, (self,), bw)
        return out

    def logsumexp(self) -> "Tensor":
        """log(sum(exp(x))) along the last axis, max-stabilised."""
        m = self.data.max(axis=-1, keepdims=True)
        e = np.exp(self.data - m)
        s = e.sum(axis=-1, keepdims=True)
        value = np.squeeze(m + np.log(s), axis=-1)

        def bw():
            if self.requires_grad:
                self._acc(np.expand_dims(out.grad, -1) * (e / s))
        out = _node(value, (self,), bw)
        return out

    # ------------------------------------------------------------------
    # neural-net primitives
    # ------------------------------------------------------------------
    def softmax_rows(self, scale: float = 1.0) -> "Tensor":
        """Softmax of x/scale along the last axis, max-stabilised per row."""
        if scale <= 0:
            raise ConfigError("softmax scale must be positive")
        z = self.data / scale
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)

        def bw():
            g = out.grad
            if self.requires_grad:
                dot = (g * y).sum(axis=-1, keepdims=True)
                self._acc((g - dot) * y / scale)
        out = _node(y, (self,), bw)
        return out

    def layer_norm(self, gain: "Tensor", bias: "Tensor",
                   eps: float = 1e-12) -> "Tensor":
        """Normalise the last axis to zero mean / unit variance, then affine."""
        d = self.data.shape[-1]
        if gain.data.shape != (d,) or bias.data.shape != (d,):
            raise ValueError("layer_norm gain/bias must have shape (d,)")
        mu = self.data.mean(axis=-1, keepdims=True)
        centered = self.data - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std

        def bw():
            g = out.grad
            if gain.requires_grad:
                gain._acc((g * xhat).reshape(-1, d).sum(axis=0))
            if bias.requires_grad:
                bias._acc(g.reshape(-1, d).sum(axis=0))
            if self.requires_grad:
                gx = g * gain.data
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                self._acc((gx - m1 - xhat * m2) * inv_std)
        out = _node(xhat * gain.data + bias.data, (self, gain, bias), bw)
        return out

    def dropout(self, ratio: float, rng: np.random.Generator | None,
                training: bool = True) -> "Tensor":
        """Inverted dropout: zero with probability ratio, scale survivors.

        Eval mode (training=False) and ratio 0 are exact identities.
        """
        if not 0.0 <= ratio < 1.0:
            raise ConfigError(f"dropout ratio must be in [0, 1), got {ratio}")
        if not training or ratio == 0.0:
            return self
        if rng is None:
            raise ConfigError("dropout in training mode needs a generator")
        mask = (rng.random(self.data.shape) >= ratio) / (1.0 - ratio)

        def bw():
            if self.requires_grad:
                self._acc(out.grad * mask)
        out = _node(self.data * mask, (self,), bw)
        return out


def _node(data, parents: tuple[Tensor, ...],
          backward: Callable[[], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(np.asarray(data, dtype=np.float64))
    out.grad = None
    live = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = live
    out._parents = parents if live else ()
    out._backward = backward if live else None
    return out


# ----------------------------------------------------------------------
# module-level operations
# ----------------------------------------------------------------------
def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup into a 2-D table; repeated ids accumulate gradient."""
    if table.ndim != 2:
        raise ValueError("gather_rows expects a 2-D table")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"row id out of range for table with {table.shape[0]} rows")

    def bw():
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros(table.data.shape)
            np.add.at(table.grad, idx, out.grad)
    out = _node(table.data[idx], (table,), bw)
    return out


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    ts = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    if not ts:
        raise ValueError("stack needs at least one tensor")
    if any(t.data.shape != ts[0].data.shape for t in ts):
        raise ValueError("stack requires equal shapes")

    def bw():
        g = out.grad
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._acc(g[i])
    out = _node(np.stack([t.data for t in ts]), tuple(ts), bw)
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate tensors along an existing axis."""
    ts = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat needs at least one tensor")
    widths = [t.data.shape[axis] for t in ts]
    cuts = np.cumsum(widths)[:-1]

    def bw():
        pieces = np.split(out.grad, cuts, axis=axis)
        for t, piece in zip(ts, pieces):
            if t.requires_grad:
                t._acc(piece)
    out = _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)
    return out


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable cosine similarity of two flattened tensors."""
    af = a.reshape(-1)
    bf = b.reshape(-1)
    if af.size != bf.size:
        raise ValueError("cosine_sim operands must have equal size")
    if not np.any(af.data) or not np.any(bf.data):
        raise NumericError("cosine similarity of a zero-norm operand")
    dot = (af * bf).sum()
    na = (af * af).sum().sqrt()
    nb = (bf * bf).sum().sqrt()
    return dot / (na * nb)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor],
               eps: float = 1e-5, sample_limit: int = 200,
               sample_threshold: int = 10_000, seed: int = 0) -> float:
    """Compare analytic gradients of f() against central differences.

    ``f`` must be deterministic (dropout off or seed-pinned) and rebuild
    its graph from ``params`` on every call.  Tensors above
    ``sample_threshold`` elements are checked on ``sample_limit`` uniformly
    sampled coordinates; smaller tensors are checked exhaustively.
    Returns the worst per-coordinate relative error.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros(p.data.shape)
                for p in params]
    for p in params:
        p.grad = None

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat_grad = ga.reshape(-1)
            n = p.data.size
            if n > sample_threshold:
                coords = rng.choice(n, size=min(sample_limit, n), replace=False)
            else:
                coords = np.arange(n)
            for i in coords:
                multi = np.unravel_index(i, p.data.shape)
                original = p.data[multi]
                p.data[multi] = original + eps
                f_plus = float(f().data)
                p.data[multi] = original - eps
                f_minus = float(f().data)
                p.data[multi] = original
                numeric = (f_plus - f_minus) / (2.0 * eps)
                denom = max(abs(flat_grad[i]), abs(numeric), 1e-6)
                worst = max(worst, abs(flat_grad[i] - numeric) / denom)
    return worst
