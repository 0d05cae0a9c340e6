"""Dense-array numerics with reverse-mode differentiation.

Everything in this library computes on `Tensor` objects: thin wrappers around
numpy arrays of rank <= 3 that record the operations producing them, so that
`backward()` on a scalar loss fills `grad` on every tensor that asked for it.
Training runs in float32; tests build float64 graphs through the same ops.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, benchmarks)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A rank <= 3 real array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind not in "fiu":
            raise ShapeError(f"tensor data must be numeric, got dtype {arr.dtype}")
        if arr.dtype.kind in "iu":
            arr = arr.astype(np.float32)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} > 3 not supported (shape {arr.shape})")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        # adopt the buffer on first touch and reassign (never mutate in place)
        # on later touches: closures may hand one buffer to several parents
        if self.grad is None:
            self.grad = g if g.dtype == self.data.dtype else g.astype(self.data.dtype)
        else:
            self.grad = self.grad + g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        backward(self)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor], bwd: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED:
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = bwd
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo numpy broadcasting: reduce g back down to `shape`."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar; fills grad on tensors requiring it."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward requires a scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- primitive operations ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched over a leading axis when either operand is rank 3."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_sum_to_shape(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_sum_to_shape(gb, b.shape))

    return _make(out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_sum_to_shape(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_sum_to_shape(g, b.shape))

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_sum_to_shape(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_sum_to_shape(-g, b.shape))

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_sum_to_shape(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_sum_to_shape(g * a.data, b.shape))

    return _make(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * np.asarray(c, dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.asarray(c, dtype=a.dtype))

    return _make(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _make(out, (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    """Swap the trailing two axes (batch axis, if any, stays put)."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got shape {a.shape}")
    out = np.swapaxes(a.data, -1, -2)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.swapaxes(g, -1, -2))

    return _make(out, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _make(out, (a,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, with per-row max subtraction for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    out = z / z.sum(axis=-1, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            x.accumulate_grad(out * (g - dot))

    return _make(out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize each row of the last axis to mean 0 / variance 1, then affine."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs last dimension >= 2, got shape {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad(_sum_to_shape(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta.accumulate_grad(_sum_to_shape(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gx - m1 - xhat * m2))

    return _make(out, (x, gamma, beta), bwd)


def row_l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit L2 norm; rows with norm <= eps get 1/eps."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, np.asarray(eps, dtype=x.dtype))
    out = x.data / denom
    big = norm > eps

    def bwd(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            gx = np.where(big, (g - out * dot) / denom, g / denom)
            x.accumulate_grad(gx)

    return _make(out, (x,), bwd)


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[..., lo:hi])

    return _make(out, tuple(parts), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice along the last axis."""
    out = x.data[..., start:stop]

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[..., start:stop] = g
            x.accumulate_grad(gx)

    return _make(np.ascontiguousarray(out), (x,), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice along the second-to-last axis."""
    out = x.data[..., start:stop, :]

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[..., start:stop, :] = g
            x.accumulate_grad(gx)

    return _make(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum()

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g, x.shape).astype(x.dtype))

    return _make(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = x.data.mean()

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g / n, x.shape).astype(x.dtype))

    return _make(out, (x,), bwd)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]. Grad scatter-adds into the table."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            table.accumulate_grad(gt)

    return _make(out, (table,), bwd)


def gather_rows_batched(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch row gather: out[b, j, :] = x[b, idx[b, j], :] for rank-3 x."""
    idx = np.asarray(idx)
    if x.ndim != 3 or idx.ndim != 2:
        raise ShapeError(f"gather_rows_batched wants rank-3 x and rank-2 idx, got {x.shape}, {idx.shape}")
    bix = np.arange(x.shape[0])[:, None]
    out = x.data[bix, idx]

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (bix, idx), g)
            x.accumulate_grad(gx)

    return _make(out, (x,), bwd)


def cross_entropy_rows(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of rows of logits against integer labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy_rows wants (N,V) logits and (N,) labels, got {logits.shape}, {labels.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    sm = e / e.sum(axis=-1, keepdims=True)
    n = labels.shape[0]
    logp = z[np.arange(n), labels] - np.log(e.sum(axis=-1))
    out = -logp.mean()

    def bwd(g):
        if logits.requires_grad:
            gl = sm.copy()
            gl[np.arange(n), labels] -= 1.0
            logits.accumulate_grad(gl * (g / n))

    return _make(out, (logits,), bwd)
