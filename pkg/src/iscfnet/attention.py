"""Standard (quadratic) and efficient (linear-in-tokens) self-attention.

The efficient variant normalizes queries per token row and keys per token
column, then multiplies key-context first: out = rho_q(Q) @ (rho_k(K)^T @ V).
No n-by-n buffer is ever formed; the normalized key map doubles as the
per-stage tap consumed by the inter-scale fusion module.

All functions accept a trailing (n, d) token matrix with optional leading
batch/head axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from .autodiff import (
    ShapeMismatch,
    Tensor,
    linear,
    matmul,
    permute,
    reshape,
    scale,
    softmax,
    transpose_last,
)


@dataclass
class AttentionConfig:
    """Channel widths for one attention layer.

    Defaults follow the typical setting d_k = d_model/2, d_v = d_model.
    """

    d_model: int
    d_k: Optional[int] = None
    d_v: Optional[int] = None
    heads: int = 1

    def __post_init__(self):
        if self.d_k is None:
            if self.d_model % 2:
                raise ValueError(f"d_model {self.d_model} must be even for d_k = d_model/2")
            self.d_k = self.d_model // 2
        if self.d_v is None:
            self.d_v = self.d_model
        if self.heads < 1 or self.d_k % self.heads or self.d_v % self.heads:
            raise ValueError(
                f"heads {self.heads} must divide d_k {self.d_k} and d_v {self.d_v}"
            )


@dataclass
class AttentionTap:
    """Per-stage normalized key map rho_k(K), shaped [..., tokens, d_k].

    Every column of the map sums to 1 over the token axis; stage indexes the
    encoder level the map came from.
    """

    stage: int
    key_map: Tensor
    token_count: int


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ShapeMismatch("attention operands need >=2 dims (tokens, channels)")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"q/k channel extents differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"k/v token extents differ: {k.shape} vs {v.shape}")
    if q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise ShapeMismatch("attention leading axes must match")


def standard_attention(q: Tensor, k: Tensor, v: Tensor, scale_factor: Optional[float] = None) -> Tensor:
    """softmax(q k^T * scale) v. Quadratic in tokens; oracle and baseline only.

    The scale is applied to q before the product (same logits, but an n x d
    pass instead of an n x n one).
    """
    _check_qkv(q, k, v)
    if scale_factor is None:
        scale_factor = 1.0 / math.sqrt(q.shape[-1])
    logits = matmul(scale(q, scale_factor), transpose_last(k))
    return matmul(softmax(logits, axis=-1), v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., n, d] -> [..., heads, n, d/heads]."""
    *lead, n, d = x.shape
    split = reshape(x, (*lead, n, heads, d // heads))
    order = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return permute(split, order)


def _merge_heads(x: Tensor) -> Tensor:
    """[..., heads, n, dh] -> [..., n, heads*dh]."""
    *lead, h, n, dh = x.shape
    order = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return reshape(permute(x, order), (*lead, n, h * dh))


def efficient_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    cfg: Optional[AttentionConfig] = None,
    stage: int = 0,
) -> tuple[Tensor, AttentionTap]:
    """rho_q(Q) @ (rho_k(K)^T @ V) with the d_k x d_v context formed first.

    rho_q is a softmax over each token's channels; rho_k a softmax over the
    token axis per channel. No scaling factor is applied: the two softmaxes
    carry the normalization. With several heads, each head runs on its slice
    and the outputs are concatenated (the caller owns any output projection).
    Returns the attention output and the rho_k(K) tap.
    """
    _check_qkv(q, k, v)
    heads = cfg.heads if cfg is not None else 1
    n = q.shape[-2]
    if heads == 1:
        rq = softmax(q, axis=-1)
        rk = softmax(k, axis=-2)
        context = matmul(transpose_last(rk), v)
        out = matmul(rq, context)
        return out, AttentionTap(stage=stage, key_map=rk, token_count=n)
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    rq = softmax(qh, axis=-1)
    rk = softmax(kh, axis=-2)
    context = matmul(transpose_last(rk), vh)
    out = _merge_heads(matmul(rq, context))
    return out, AttentionTap(stage=stage, key_map=_merge_heads(rk), token_count=n)


def explicit_context_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Same normalizations as the efficient path but multiplied in the
    (rho_q rho_k^T) V order, materializing the n-by-n product. Oracle: the two
    orders agree by matrix associativity."""
    _check_qkv(q, k, v)
    rq = softmax(q, axis=-1)
    rk = softmax(k, axis=-2)
    pairwise = matmul(rq, transpose_last(rk))
    return matmul(pairwise, v)


def make_qkv(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Bias-free learned projections of the token matrix into Q, K, V."""
    return linear(x, wq), linear(x, wk), linear(x, wv)
