"""Multi-head self-attention, standard and anchored-fast variants.

The standard path materializes the full n x n query-key similarity matrix.
The fast path samples m << n anchor rows from the normalized query matrix and
composes two thin stochastic matrices instead: an n x m query-anchor
similarity and an m x n anchor-key similarity, multiplied in the cheap
association order so the n x n matrix never exists.

All similarity matrices here are row-stochastic. Padding positions get an
additive -1e9 on their key columns before every softmax over keys, and
anchors are only sampled from non-pad positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, ShapeError
from .tensor import Tensor

NEG_INF = -1e9

# incremented on every fast-path forward; lets tests assert that baseline
# (full-mode) training never touches the relaxed machinery
_fast_path_calls = 0


def fast_path_call_count() -> int:
    return _fast_path_calls

def reset_fast_path_count():
    global _fast_path_calls
    _fast_path_calls = 0


def _bump_fast_path():
    global _fast_path_calls
    _fast_path_calls += 1


@dataclass
class AttentionParams:
    """Per-head query/key/value projections plus the shared output projection.

    wq, wk, wv are lists of h matrices of shape (d, d/h); wo is (d, d) and is
    also addressable as h row slices of shape (d/h, d).
    """

    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor

    def __post_init__(self):
        h = len(self.wq)
        if not (len(self.wk) == len(self.wv) == h):
            raise ConfigError("wq/wk/wv head counts disagree")
        d = self.wo.shape[0]
        if d % h != 0:
            raise ConfigError(f"hidden size {d} not divisible by head count {h}")
        dk = d // h
        for name, mats in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv)):
            for i, w in enumerate(mats):
                if w.shape != (d, dk):
                    raise ConfigError(f"{name}[{i}] has shape {w.shape}, expected {(d, dk)}")
        if self.wo.shape != (d, d):
            raise ConfigError(f"wo has shape {self.wo.shape}, expected {(d, d)}")

    @property
    def h(self) -> int:
        return len(self.wq)

    @property
    def d(self) -> int:
        return self.wo.shape[0]

    @property
    def dk(self) -> int:
        return self.d // self.h

    def wo_slice(self, i: int) -> Tensor:
        return T.slice_rows(self.wo, i * self.dk, (i + 1) * self.dk)

    def tensors(self) -> list[Tensor]:
        return list(self.wq) + list(self.wk) + list(self.wv) + [self.wo]


@dataclass
class AnchorSet:
    """m distinct sequence positions and the normalized query rows at them."""

    indices: np.ndarray  # (m,), distinct positions
    vectors: Tensor      # (m, dk), rows of row_l2_normalize(Q)


def _key_mask_term(pad_mask, batched: bool):
    """Additive mask over key columns: 0 where valid, -1e9 where pad."""
    if pad_mask is None:
        return None
    pm = np.asarray(pad_mask)
    if (pm > 0).all():
        return None
    add = np.where(pm > 0, 0.0, NEG_INF).astype(np.float32)
    if batched:
        add = add[:, None, :]  # broadcast over query rows
    return Tensor(add)


def _masked_softmax(scores: Tensor, mask_term: Tensor | None) -> Tensor:
    if mask_term is not None:
        scores = T.add(scores, Tensor(mask_term.data.astype(scores.dtype)))
    return T.softmax_rows(scores)


def _project_heads(X: Tensor, weights: list[Tensor]) -> list[Tensor]:
    """Per-head projections [X @ w for w in weights] via one merged matmul.

    Equivalent up to float reassociation, but a single (d, h*dk) product is
    much kinder to single-threaded BLAS than h narrow ones.
    """
    if len(weights) == 1:
        return [T.matmul(X, weights[0])]
    dk = weights[0].shape[1]
    merged = T.matmul(X, T.concat_cols(weights))
    return [T.slice_cols(merged, i * dk, (i + 1) * dk) for i in range(len(weights))]


def query_key_similarity(Q: Tensor, K: Tensor, pad_mask=None) -> Tensor:
    """Row-stochastic softmax(Q K^T / sqrt(dk)); the exact similarity matrix."""
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"query/key widths disagree: {Q.shape} vs {K.shape}")
    dk = Q.shape[-1]
    scores = T.scale(T.matmul(Q, T.transpose(K)), 1.0 / math.sqrt(dk))
    return _masked_softmax(scores, _key_mask_term(pad_mask, Q.ndim == 3))


def standard_attention(Q: Tensor, K: Tensor, V: Tensor, pad_mask=None) -> Tensor:
    """Exact attention: similarity-weighted average of the value rows."""
    return T.matmul(query_key_similarity(Q, K, pad_mask), V)


def multi_head_attention(X: Tensor, params: AttentionParams, pad_mask=None) -> Tensor:
    """Concat of per-head exact attention, then the shared output projection."""
    if X.shape[-1] != params.d:
        raise ShapeError(f"input width {X.shape[-1]} != model width {params.d}")
    qs = _project_heads(X, params.wq)
    ks = _project_heads(X, params.wk)
    vs = _project_heads(X, params.wv)
    heads = [standard_attention(q, k, v, pad_mask) for q, k, v in zip(qs, ks, vs)]
    return T.matmul(T.concat_cols(heads), params.wo)


def select_anchors(Q: Tensor, m: int, rng: np.random.Generator, pad_mask=None) -> AnchorSet:
    """Sample m distinct non-pad positions uniformly; vectors come from the
    unit-normalized query matrix. m is clamped to the number of valid positions."""
    if m < 1:
        raise InputError(f"anchor count must be >= 1, got {m}")
    n = Q.shape[0]
    if pad_mask is None:
        valid = np.arange(n)
    else:
        valid = np.flatnonzero(np.asarray(pad_mask) > 0)
    if valid.size == 0:
        raise InputError("no non-pad positions to sample anchors from")
    m_eff = min(m, valid.size)
    indices = valid[rng.choice(valid.size, size=m_eff, replace=False)]
    qn = T.row_l2_normalize(Q)
    return AnchorSet(indices=indices, vectors=T.gather_rows(qn, indices))


def query_anchor_similarity(Qn: Tensor, A: Tensor) -> Tensor:
    """softmax(Qn A^T * sqrt(dk)): how much each (normalized) query leans on
    each anchor. The scale multiplies because unit-length dot products are small."""
    dk = Qn.shape[-1]
    return T.softmax_rows(T.scale(T.matmul(Qn, T.transpose(A)), math.sqrt(dk)))


def anchor_key_similarity(A: Tensor, K: Tensor, pad_mask=None) -> Tensor:
    """softmax(A K^T): each anchor's attention over the raw (unnormalized) keys."""
    scores = T.matmul(A, T.transpose(K))
    return _masked_softmax(scores, _key_mask_term(pad_mask, K.ndim == 3))


def approx_similarity(S1: Tensor, S2: Tensor) -> Tensor:
    """The n x n similarity approximation S1 S2; stochastic since both factors are."""
    return T.matmul(S1, S2)


def fast_attention(Q: Tensor, K: Tensor, V: Tensor, anchors: AnchorSet, pad_mask=None) -> Tensor:
    """Anchored attention, computed as S1 (S2 V) so no n x n product is formed."""
    _bump_fast_path()
    qn = T.row_l2_normalize(Q)
    s1 = query_anchor_similarity(qn, anchors.vectors)
    s2 = anchor_key_similarity(anchors.vectors, K, pad_mask)
    return T.matmul(s1, T.matmul(s2, V))


def fast_multi_head_attention(
    X: Tensor,
    params: AttentionParams,
    m: int,
    rng: np.random.Generator,
    pad_mask=None,
    anchor_sets: list[AnchorSet] | None = None,
) -> Tensor:
    """Merged anchored multi-head attention: sum_i S1_i (S2_i V_i Wo_i).

    Each head samples its own anchors from its own query matrix (pass
    anchor_sets to pin them, e.g. for equivalence tests). The inner products
    are taken right-to-left so neither the n x n similarity nor the
    concat-then-project step is ever materialized.
    """
    _bump_fast_path()
    if X.shape[-1] != params.d:
        raise ShapeError(f"input width {X.shape[-1]} != model width {params.d}")
    if anchor_sets is None:
        head_rngs = rng.spawn(params.h)
    qs = _project_heads(X, params.wq)
    ks = _project_heads(X, params.wk)
    vs = _project_heads(X, params.wv)
    out = None
    for i in range(params.h):
        q, k, v = qs[i], ks[i], vs[i]
        qn = T.row_l2_normalize(q)
        if anchor_sets is not None:
            a = anchor_sets[i]
        else:
            a = select_anchors(q, m, head_rngs[i], pad_mask)
        s1 = query_anchor_similarity(qn, a.vectors)
        s2 = anchor_key_similarity(a.vectors, k, pad_mask)
        u = T.matmul(s2, v)                     # (m, dk)
        phi = T.matmul(u, params.wo_slice(i))   # (m, d)
        term = T.matmul(s1, phi)
        out = term if out is None else T.add(out, term)
    return out


def fast_multi_head_attention_batched(
    X: Tensor,
    params: AttentionParams,
    m: int,
    rng: np.random.Generator,
    pad_mask=None,
) -> Tensor:
    """Batched (B, n, d) version of the merged fast path.

    Anchor positions are sampled independently per sequence and per head from
    that sequence's non-pad positions; m is clamped to the shortest valid
    length in the batch so the index array stays rectangular.
    """
    _bump_fast_path()
    if X.ndim != 3:
        raise ShapeError(f"batched fast attention wants rank-3 input, got {X.shape}")
    B, n, d = X.shape
    if d != params.d:
        raise ShapeError(f"input width {d} != model width {params.d}")
    if pad_mask is None:
        valid_rows = [np.arange(n)] * B
    else:
        pm = np.asarray(pad_mask)
        valid_rows = [np.flatnonzero(pm[b] > 0) for b in range(B)]
        if any(v.size == 0 for v in valid_rows):
            raise InputError("a sequence in the batch has no non-pad positions")
    m_eff = min(m, min(v.size for v in valid_rows))
    if m_eff < 1:
        raise InputError(f"anchor count must be >= 1, got {m}")
    mask_term = _key_mask_term(pad_mask, batched=True)
    head_rngs = rng.spawn(params.h)
    qs = _project_heads(X, params.wq)
    ks = _project_heads(X, params.wk)
    vs = _project_heads(X, params.wv)
    out = None
    for i in range(params.h):
        q, k, v = qs[i], ks[i], vs[i]
        qn = T.row_l2_normalize(q)
        idx = np.stack([
            vr[head_rngs[i].choice(vr.size, size=m_eff, replace=False)]
            for vr in valid_rows
        ])
        a = T.gather_rows_batched(qn, idx)     # (B, m, dk)
        s1 = T.softmax_rows(T.scale(T.matmul(qn, T.transpose(a)), math.sqrt(params.dk)))
        s2 = _masked_softmax(T.matmul(a, T.transpose(k)), mask_term)
        u = T.matmul(s2, v)                    # (B, m, dk)
        phi = T.matmul(u, params.wo_slice(i))  # (B, m, d)
        term = T.matmul(s1, phi)
        out = term if out is None else T.add(out, term)
    return out
