"""Encoder model assembly: embeddings, encoder layers, MLM classifier.

Two modes share one topology. "relaxed" runs anchored fast attention and
factorized feed-forward sub-layers; "full" runs exact attention and standard
feed-forward. `recover_full` converts a trained relaxed model into a full one
by copying every shared weight verbatim and multiplying the feed-forward
factors back into big matrices, so the recovered network computes the same
function as the relaxed one did (up to the attention path, which reverts to
the exact computation).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import attention as att
from . import feedforward as ffn
from . import tensor as T
from .errors import ConfigError, ContractError, InputError
from .tensor import Tensor

INIT_STD = 0.02
IGNORE_LABEL = -1

MODE_RELAXED = "relaxed"
MODE_FULL = "full"


@dataclass
class ModelConfig:
    L: int = 4
    d: int = 128
    h: int = 4
    d_f: int | None = None   # defaults to 4*d
    d_r: int = 16
    m: int = 8
    n_max: int = 128
    vocab: int = 8000
    mode: str = MODE_RELAXED
    seed: int = 0

    def __post_init__(self):
        if self.d_f is None:
            self.d_f = 4 * self.d
        self.validate()

    def validate(self):
        if self.L < 1:
            raise ConfigError(f"layer count must be >= 1, got L={self.L}")
        if self.h < 1 or self.d < 1:
            raise ConfigError(f"need h >= 1 and d >= 1, got h={self.h}, d={self.d}")
        if self.d % self.h != 0:
            raise ConfigError(f"hidden size d={self.d} not divisible by head count h={self.h}")
        if self.mode not in (MODE_RELAXED, MODE_FULL):
            raise ConfigError(f"mode must be '{MODE_RELAXED}' or '{MODE_FULL}', got {self.mode!r}")
        if self.mode == MODE_RELAXED:
            if self.d_r < 1:
                raise ConfigError(f"relaxed mode needs d_r >= 1, got d_r={self.d_r}")
            if self.m < 1:
                raise ConfigError(f"relaxed mode needs m >= 1, got m={self.m}")
        if self.vocab < 6:
            raise ConfigError(f"vocab must cover the reserved ids, got {self.vocab}")
        if self.n_max < 1:
            raise ConfigError(f"n_max must be >= 1, got {self.n_max}")


@dataclass
class EncoderLayer:
    attn: att.AttentionParams
    ffn: ffn.FfnParams
    norm1_gamma: Tensor
    norm1_beta: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor


@dataclass
class ModelState:
    token_emb: Tensor          # (vocab, d)
    pos_emb: Tensor            # (n_max, d)
    layers: list[EncoderLayer]
    mlm_w: Tensor              # (d, vocab)
    mlm_b: Tensor              # (vocab,)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("token_emb", self.token_emb), ("pos_emb", self.pos_emb)]
        for li, layer in enumerate(self.layers):
            p = f"layers.{li}"
            for i, w in enumerate(layer.attn.wq):
                out.append((f"{p}.attn.wq.{i}", w))
            for i, w in enumerate(layer.attn.wk):
                out.append((f"{p}.attn.wk.{i}", w))
            for i, w in enumerate(layer.attn.wv):
                out.append((f"{p}.attn.wv.{i}", w))
            out.append((f"{p}.attn.wo", layer.attn.wo))
            f = layer.ffn
            if isinstance(f, ffn.StandardFfn):
                out += [(f"{p}.ffn.w1", f.w1), (f"{p}.ffn.b1", f.b1),
                        (f"{p}.ffn.w2", f.w2), (f"{p}.ffn.b2", f.b2)]
            else:
                out += [(f"{p}.ffn.w1a", f.w1a), (f"{p}.ffn.w1b", f.w1b),
                        (f"{p}.ffn.w2a", f.w2a), (f"{p}.ffn.w2b", f.w2b),
                        (f"{p}.ffn.b1", f.b1), (f"{p}.ffn.b2", f.b2)]
            out += [(f"{p}.norm1.gamma", layer.norm1_gamma), (f"{p}.norm1.beta", layer.norm1_beta),
                    (f"{p}.norm2.gamma", layer.norm2_gamma), (f"{p}.norm2.beta", layer.norm2_beta)]
        out += [("mlm_head.w", self.mlm_w), ("mlm_head.b", self.mlm_b)]
        return out

    def parameter_count(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters())

    def zero_grads(self):
        for _, t in self.named_parameters():
            t.grad = None


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) with redraws outside +-2 std."""
    x = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(x) > 2 * std
        if not bad.any():
            return x.astype(np.float32)
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))


def _param(rng, shape) -> Tensor:
    return Tensor(_trunc_normal(rng, shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> ModelState:
    """Fresh model: weights ~ truncated normal (std 0.02), zero biases,
    identity layer norms. Deterministic given the generator state."""
    cfg.validate()
    d, h, dk = cfg.d, cfg.h, cfg.d // cfg.h
    token_emb = _param(rng, (cfg.vocab, d))
    pos_emb = _param(rng, (cfg.n_max, d))
    layers = []
    for _ in range(cfg.L):
        attn = att.AttentionParams(
            wq=[_param(rng, (d, dk)) for _ in range(h)],
            wk=[_param(rng, (d, dk)) for _ in range(h)],
            wv=[_param(rng, (d, dk)) for _ in range(h)],
            wo=_param(rng, (d, d)),
        )
        if cfg.mode == MODE_RELAXED:
            f = ffn.FactorizedFfn(
                w1a=_param(rng, (d, cfg.d_r)), w1b=_param(rng, (cfg.d_r, cfg.d_f)),
                w2a=_param(rng, (cfg.d_f, cfg.d_r)), w2b=_param(rng, (cfg.d_r, d)),
                b1=_zeros((cfg.d_f,)), b2=_zeros((d,)),
            )
        else:
            f = ffn.StandardFfn(
                w1=_param(rng, (d, cfg.d_f)), b1=_zeros((cfg.d_f,)),
                w2=_param(rng, (cfg.d_f, d)), b2=_zeros((d,)),
            )
        layers.append(EncoderLayer(
            attn=attn, ffn=f,
            norm1_gamma=_ones((d,)), norm1_beta=_zeros((d,)),
            norm2_gamma=_ones((d,)), norm2_beta=_zeros((d,)),
        ))
    mlm_w = _param(rng, (d, cfg.vocab))
    mlm_b = _zeros((cfg.vocab,))
    return ModelState(token_emb, pos_emb, layers, mlm_w, mlm_b)


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter count for a config; must match the state exactly."""
    d, df = cfg.d, cfg.d_f
    per_attn = 3 * d * d + d * d          # q/k/v head slices sum to d*d each, plus wo
    if cfg.mode == MODE_RELAXED:
        per_ffn = ffn.ffn_param_count(d, df, cfg.d_r)
    else:
        per_ffn = ffn.ffn_param_count(d, df)
    per_norms = 4 * d
    return (cfg.vocab * d + cfg.n_max * d
            + cfg.L * (per_attn + per_ffn + per_norms)
            + d * cfg.vocab + cfg.vocab)


def _check_inputs(cfg: ModelConfig, token_ids: np.ndarray):
    token_ids = np.asarray(token_ids)
    if token_ids.ndim != 2:
        raise InputError(f"token_ids must be (batch, seq), got shape {token_ids.shape}")
    if token_ids.shape[1] > cfg.n_max:
        raise InputError(f"sequence length {token_ids.shape[1]} exceeds n_max={cfg.n_max}")
    if token_ids.max() >= cfg.vocab or token_ids.min() < 0:
        raise InputError(f"token id out of range [0, {cfg.vocab})")
    return token_ids


def forward_hidden(state: ModelState, cfg: ModelConfig, token_ids, pad_mask=None,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Run embeddings and all encoder layers; returns hidden states (B, n, d)."""
    token_ids = _check_inputs(cfg, token_ids)
    n = token_ids.shape[1]
    if cfg.mode == MODE_RELAXED and rng is None:
        raise ContractError("relaxed mode needs an rng for anchor sampling")
    x = T.add(T.gather_rows(state.token_emb, token_ids),
              T.slice_rows(state.pos_emb, 0, n))
    layer_rngs = rng.spawn(cfg.L) if rng is not None else [None] * cfg.L
    for layer, lrng in zip(state.layers, layer_rngs):
        if cfg.mode == MODE_RELAXED:
            a = att.fast_multi_head_attention_batched(x, layer.attn, cfg.m, lrng, pad_mask)
        else:
            a = att.multi_head_attention(x, layer.attn, pad_mask)
        x = ffn.add_norm(x, a, layer.norm1_gamma, layer.norm1_beta)
        f = ffn.ffn_forward(x, layer.ffn)
        x = ffn.add_norm(x, f, layer.norm2_gamma, layer.norm2_beta)
    return x


def forward(state: ModelState, cfg: ModelConfig, token_ids, pad_mask=None,
            rng: np.random.Generator | None = None) -> Tensor:
    """Full forward pass; returns MLM logits of shape (B, n, vocab)."""
    hidden = forward_hidden(state, cfg, token_ids, pad_mask, rng)
    B, n, d = hidden.shape
    flat = T.reshape(hidden, (B * n, d))
    logits = T.add(T.matmul(flat, state.mlm_w), state.mlm_b)
    return T.reshape(logits, (B, n, cfg.vocab))


def mlm_loss(logits: Tensor, labels, mask_positions=None) -> Tensor:
    """Mean cross-entropy over masked positions only.

    labels is (B, n) with the original token id at corrupted positions and
    IGNORE_LABEL elsewhere; mask_positions (optional boolean (B, n)) overrides
    the positions derived from the labels.
    """
    labels = np.asarray(labels)
    if mask_positions is None:
        mask_positions = labels != IGNORE_LABEL
    mask_positions = np.asarray(mask_positions, dtype=bool)
    flat_pos = np.flatnonzero(mask_positions.reshape(-1))
    if flat_pos.size == 0:
        raise InputError("no masked positions to score")
    B, n, V = logits.shape
    flat = T.reshape(logits, (B * n, V))
    picked = T.gather_rows(flat, flat_pos)
    return T.cross_entropy_rows(picked, labels.reshape(-1)[flat_pos])


def mlm_loss_from_hidden(state: ModelState, hidden: Tensor, labels) -> Tensor:
    """Loss without materializing logits at unmasked positions.

    Projects only the masked rows through the MLM head; same value as
    mlm_loss(forward(...), labels) up to float reassociation.
    """
    labels = np.asarray(labels)
    flat_pos = np.flatnonzero((labels != IGNORE_LABEL).reshape(-1))
    if flat_pos.size == 0:
        raise InputError("no masked positions to score")
    B, n, d = hidden.shape
    flat = T.reshape(hidden, (B * n, d))
    rows = T.gather_rows(flat, flat_pos)
    logits = T.add(T.matmul(rows, state.mlm_w), state.mlm_b)
    return T.cross_entropy_rows(logits, labels.reshape(-1)[flat_pos])


def recover_full(relaxed: ModelState, cfg: ModelConfig) -> tuple[ModelState, ModelConfig]:
    """One-time transformation of a trained relaxed model into a full one.

    Embeddings, classifier, attention weights and add-norm parameters are
    copied verbatim; each feed-forward sub-layer's big matrices are recovered
    as the products of its factors, so the recovered FFN computes the same
    function. The returned config switches the attention path to exact.
    """
    if cfg.mode != MODE_RELAXED:
        raise ContractError(f"recover_full needs a relaxed model, got mode={cfg.mode!r}")

    def carry(t: Tensor) -> Tensor:
        return Tensor(t.data.copy(), requires_grad=True)

    layers = []
    for layer in relaxed.layers:
        f = layer.ffn
        if not isinstance(f, ffn.FactorizedFfn):
            raise ContractError("relaxed model carries a non-factorized FFN sub-layer")
        new_ffn = ffn.StandardFfn(
            w1=Tensor(f.w1a.data @ f.w1b.data, requires_grad=True),
            b1=carry(f.b1),
            w2=Tensor(f.w2a.data @ f.w2b.data, requires_grad=True),
            b2=carry(f.b2),
        )
        layers.append(EncoderLayer(
            attn=att.AttentionParams(
                wq=[carry(w) for w in layer.attn.wq],
                wk=[carry(w) for w in layer.attn.wk],
                wv=[carry(w) for w in layer.attn.wv],
                wo=carry(layer.attn.wo),
            ),
            ffn=new_ffn,
            norm1_gamma=carry(layer.norm1_gamma), norm1_beta=carry(layer.norm1_beta),
            norm2_gamma=carry(layer.norm2_gamma), norm2_beta=carry(layer.norm2_beta),
        ))
    full = ModelState(
        token_emb=carry(relaxed.token_emb), pos_emb=carry(relaxed.pos_emb),
        layers=layers, mlm_w=carry(relaxed.mlm_w), mlm_b=carry(relaxed.mlm_b),
    )
    return full, replace(cfg, mode=MODE_FULL)
