"""Fusion stage: guided cross-attention between clinical and image tokens,
self-attention over the fused sequence, attention pooling, and the two-layer
prediction head.

All attention here is single-head scaled dot-product with shared embedding
width d. A thread-local counter tracks attention-score multiply-accumulates
so the quadratic cost of attending over long vs. short sequences can be
measured rather than argued about.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

PROVENANCES = ("image", "clinical", "fused")


@dataclass
class TokenSequence:
    """A T×d stack of token row-vectors plus where they came from."""

    tokens: Tensor
    provenance: str = "fused"

    def __post_init__(self):
        if self.tokens.data.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"token sequence must be T×d with T >= 1, got {self.tokens.shape}")
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class CrossAttentionParams:
    """Learnable projections for one attention layer: W_q, W_k, W_v, all d×d."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    def __post_init__(self):
        d = self.w_q.shape[0] if self.w_q.data.ndim == 2 else -1
        for name in ("w_q", "w_k", "w_v"):
            w = getattr(self, name)
            if w.data.ndim != 2 or w.shape != (d, d):
                raise ShapeError(f"{name} must be square d×d matching w_q, got {w.shape}")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "w_q": self.w_q, prefix + "w_k": self.w_k, prefix + "w_v": self.w_v}


@dataclass
class HeadParams:
    """Two fully connected layers: d -> d//2 (smooth nonlinearity) -> 1 logit."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "w1": self.w1, prefix + "b1": self.b1, prefix + "w2": self.w2, prefix + "b2": self.b2}


@dataclass
class FusionParams:
    """Everything after the encoders: cross-attention, self-attention, pooling query, head."""

    cross: CrossAttentionParams
    self_attn: CrossAttentionParams
    pool_query: Tensor  # 1×d
    head: HeadParams

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.cross.named_parameters(prefix + "cross."))
        out.update(self.self_attn.named_parameters(prefix + "self_attn."))
        out[prefix + "pool_query"] = self.pool_query
        out.update(self.head.named_parameters(prefix + "head."))
        return out


# ------------------------------------------------- score-MAC accounting

class _MacCell(threading.local):
    def __init__(self):
        self.total = 0


_MACS = _MacCell()


def reset_score_macs() -> None:
    _MACS.total = 0


def score_macs() -> int:
    """Multiply-accumulates spent forming attention score matrices (this thread)."""
    return _MACS.total


def _count(tq: int, tk: int, d: int) -> None:
    _MACS.total += tq * tk * d


# ------------------------------------------------------------- attention

def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q kᵀ / √d) v. Returns (output, attention weights)."""
    d = q.shape[1]
    if k.shape[1] != d or v.shape[0] != k.shape[0]:
        raise ShapeError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
    _count(q.shape[0], k.shape[0], d)
    attn = T.softmax_rows(scores)
    return T.matmul(attn, v), attn


def guided_cross_attention(
    e_c: TokenSequence, e_i: TokenSequence, params: CrossAttentionParams
) -> TokenSequence:
    """Clinical tokens query the image tokens; output keeps the M clinical rows.

    Queries come from e_c, keys and values from e_i, so the result has one
    row per clinical token, each a convex combination of projected image
    tokens.
    """
    d = params.d
    if e_c.dim != d or e_i.dim != d:
        raise ShapeError(f"embedding width mismatch: e_c {e_c.tokens.shape}, e_i {e_i.tokens.shape}, params d={d}")
    q = T.matmul(e_c.tokens, params.w_q)
    k = T.matmul(e_i.tokens, params.w_k)
    v = T.matmul(e_i.tokens, params.w_v)
    out, _ = scaled_dot_attention(q, k, v)
    return TokenSequence(out, provenance="fused")


def self_attention(x: TokenSequence, params: CrossAttentionParams) -> TokenSequence:
    """Single-head self-attention; output shape equals input shape."""
    if x.dim != params.d:
        raise ShapeError(f"embedding width mismatch: tokens {x.tokens.shape}, params d={params.d}")
    q = T.matmul(x.tokens, params.w_q)
    k = T.matmul(x.tokens, params.w_k)
    v = T.matmul(x.tokens, params.w_v)
    out, _ = scaled_dot_attention(q, k, v)
    return TokenSequence(out, provenance=x.provenance)


def attention_pooling(x: TokenSequence, query: Tensor) -> Tensor:
    """Collapse T tokens to one d-vector (returned as a 1×d row).

    Weights are softmax over ⟨query, token_t⟩ / √d; the output is the
    weighted sum of tokens, so identical tokens pool to themselves.
    """
    d = x.dim
    if query.data.size != d:
        raise ShapeError(f"pooling query must have {d} entries, got shape {query.shape}")
    q_row = query if query.shape == (1, d) else T.reshape(query, (1, d))
    scores = T.scale(T.matmul(q_row, T.transpose(x.tokens)), 1.0 / math.sqrt(d))  # 1×T
    weights = T.softmax_rows(scores)
    return T.matmul(weights, x.tokens)  # 1×d


def classify(z: Tensor, head: HeadParams) -> Tensor:
    """Pooled vector -> probability of true progression, as a 1×1 tensor."""
    if not np.isfinite(z.data).all():
        raise ContractError("classify: non-finite input vector")
    row = z if z.data.ndim == 2 else T.reshape(z, (1, z.data.size))
    hidden = T.gelu(T.add(T.matmul(row, head.w1), head.b1))
    logit = T.add(T.matmul(hidden, head.w2), head.b2)
    return T.sigmoid(logit)


def fusion_forward(e_i: TokenSequence, e_c: TokenSequence, params: FusionParams) -> Tensor:
    """Full fusion pass: cross-attend, concatenate, self-attend, pool, classify.

    Shape trace for M clinical and N image tokens:
    (N×d, M×d) -> M×d -> 2M×d -> 2M×d -> 1×d -> 1×1 probability.
    """
    fused = guided_cross_attention(e_c, e_i, params.cross)
    stacked = TokenSequence(T.concat_rows(fused.tokens, e_c.tokens), provenance="fused")
    mixed = self_attention(stacked, params.self_attn)
    pooled = attention_pooling(mixed, params.pool_query)
    return classify(pooled, params.head)


# ------------------------------------------------------------------ init

def init_cross_attention(d: int, rng: np.random.Generator, dtype=np.float64) -> CrossAttentionParams:
    std = 1.0 / math.sqrt(d)
    mk = lambda: Tensor((rng.standard_normal((d, d)) * std).astype(dtype), requires_grad=True)
    return CrossAttentionParams(mk(), mk(), mk())


def init_head(d: int, rng: np.random.Generator, dtype=np.float64) -> HeadParams:
    h = max(d // 2, 1)
    return HeadParams(
        w1=Tensor((rng.standard_normal((d, h)) / math.sqrt(d)).astype(dtype), requires_grad=True),
        b1=Tensor(np.zeros((1, h), dtype=dtype), requires_grad=True),
        w2=Tensor((rng.standard_normal((h, 1)) / math.sqrt(h)).astype(dtype), requires_grad=True),
        b2=Tensor(np.zeros((1, 1), dtype=dtype), requires_grad=True),
    )


def init_fusion(d: int, rng: np.random.Generator, dtype=np.float64) -> FusionParams:
    return FusionParams(
        cross=init_cross_attention(d, rng, dtype),
        self_attn=init_cross_attention(d, rng, dtype),
        pool_query=Tensor((rng.standard_normal((1, d)) / math.sqrt(d)).astype(dtype), requires_grad=True),
        head=init_head(d, rng, dtype),
    )
