"""Position-wise feed-forward network and the residual add-norm wrapper.

The standard form is relu(x W1 + b1) W2 + b2 with W1: (d, d_f), W2: (d_f, d).
The factorized form replaces each big matrix by a product of two thin ones
(d x d_r and d_r x d_f, with d_r << d) and evaluates left-to-right, so a
(d, d_f)-sized product is never materialized during the forward pass. Biases
stay un-factorized.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

LAYER_NORM_EPS = 1e-12


@dataclass
class StandardFfn:
    w1: Tensor  # (d, d_f)
    b1: Tensor  # (d_f,)
    w2: Tensor  # (d_f, d)
    b2: Tensor  # (d,)

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class FactorizedFfn:
    w1a: Tensor  # (d, d_r)
    w1b: Tensor  # (d_r, d_f)
    w2a: Tensor  # (d_f, d_r)
    w2b: Tensor  # (d_r, d)
    b1: Tensor   # (d_f,)
    b2: Tensor   # (d,)

    def tensors(self) -> list[Tensor]:
        return [self.w1a, self.w1b, self.w2a, self.w2b, self.b1, self.b2]


FfnParams = StandardFfn | FactorizedFfn


def ffn_forward(x: Tensor, p: FfnParams) -> Tensor:
    if isinstance(p, StandardFfn):
        if x.shape[-1] != p.w1.shape[0]:
            raise ShapeError(f"ffn input width {x.shape[-1]} != {p.w1.shape[0]}")
        hid = T.relu(T.add(T.matmul(x, p.w1), p.b1))
        return T.add(T.matmul(hid, p.w2), p.b2)
    if x.shape[-1] != p.w1a.shape[0]:
        raise ShapeError(f"ffn input width {x.shape[-1]} != {p.w1a.shape[0]}")
    hid = T.relu(T.add(T.matmul(T.matmul(x, p.w1a), p.w1b), p.b1))
    return T.add(T.matmul(T.matmul(hid, p.w2a), p.w2b), p.b2)


def ffn_param_count(d: int, d_f: int, d_r: int | None = None) -> int:
    """Closed-form parameter count for one FFN sub-layer."""
    if d_r is None:
        return 2 * d * d_f + d_f + d
    return d_r * (2 * d + 2 * d_f) + d_f + d


def add_norm(x: Tensor, sublayer_out: Tensor, gamma: Tensor, beta: Tensor,
             eps: float = LAYER_NORM_EPS) -> Tensor:
    """Residual connection followed by layer normalization."""
    if x.shape != sublayer_out.shape:
        raise ShapeError(f"add_norm shapes disagree: {x.shape} vs {sublayer_out.shape}")
    return T.layer_norm(T.add(x, sublayer_out), gamma, beta, eps)
