"""Hierarchical patch operations and the efficient transformer block.

Token grids are row-major: a token matrix [b, n, c] with grid (h, w) stores
token (y, x) at index y*w + x. Patch merging gathers each 2x2 neighborhood in
the order top-left, top-right, bottom-left, bottom-right; expanding inverts
that convention.

Parameters are addressed as "<prefix>.<local name>" in a flat mapping; the
``*_specs`` functions enumerate (init kind, shape) pairs for the builder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .attention import AttentionTap, efficient_attention, make_qkv
from .autodiff import (
    ShapeMismatch,
    Tensor,
    add,
    conv2d,
    gelu,
    layer_norm,
    linear,
    permute,
    reshape,
)


class BadInputExtent(ValueError):
    """Image extents are incompatible with the patch hierarchy."""


class OddGrid(ValueError):
    """Patch merging needs even grid extents."""


class OddChannels(ValueError):
    """Patch expanding needs an even channel count."""


@dataclass
class StageConfig:
    """Geometry of one encoder/decoder stage."""

    d_model: int
    grid: tuple[int, int]
    blocks_per_stage: int = 2
    ffn_expansion: int = 4
    heads: int = 1
    pre_norm: bool = False
    stage: int = 0

    def __post_init__(self):
        if self.grid[0] <= 0 or self.grid[1] <= 0:
            raise ValueError(f"grid extents must be positive, got {self.grid}")
        if self.d_model % 2:
            raise ValueError(f"d_model must be even (d_k = d_model/2), got {self.d_model}")

    @property
    def d_k(self) -> int:
        return self.d_model // 2

    @property
    def d_v(self) -> int:
        return self.d_model


Params = Mapping[str, Tensor]
Specs = dict[str, tuple[str, tuple]]


# ---------------------------------------------------------------------------
# patch embedding


def patch_embed_specs(d1: int, prefix: str, norm: bool = True) -> Specs:
    specs: Specs = {
        f"{prefix}.conv.weight": ("trunc", (d1, 3, 7, 7)),
        f"{prefix}.conv.bias": ("zeros", (d1,)),
    }
    if norm:
        specs[f"{prefix}.norm.gamma"] = ("ones", (d1,))
        specs[f"{prefix}.norm.beta"] = ("zeros", (d1,))
    return specs


def patch_embed(img: Tensor, p: Params, prefix: str, norm: bool = True):
    """Overlapping 4x4 tokenization: 7x7 convolution at stride 4.

    Padding is 3 on the top/left only; with extents divisible by 4 that
    reproduces the floor-division output grid (h/4, w/4) without trailing
    pad columns. Returns (tokens [b, hw/16, d1], grid).
    """
    b, c, h, w = img.shape
    if h % 32 or w % 32:
        raise BadInputExtent(f"input {h}x{w} must be divisible by 32")
    y = conv2d(
        img,
        p[f"{prefix}.conv.weight"],
        p[f"{prefix}.conv.bias"],
        stride=4,
        pad=(3, 0, 3, 0),
    )
    gh, gw = h // 4, w // 4
    tokens = reshape(permute(y, (0, 2, 3, 1)), (b, gh * gw, -1))
    if norm:
        tokens = layer_norm(tokens, p[f"{prefix}.norm.gamma"], p[f"{prefix}.norm.beta"])
    return tokens, (gh, gw)


# ---------------------------------------------------------------------------
# patch merging / expanding


def patch_merge_specs(c: int, prefix: str) -> Specs:
    return {
        f"{prefix}.norm.gamma": ("ones", (4 * c,)),
        f"{prefix}.norm.beta": ("zeros", (4 * c,)),
        f"{prefix}.reduce.weight": ("trunc", (4 * c, 2 * c)),
    }


def patch_merge(x: Tensor, grid: tuple[int, int], p: Params, prefix: str) -> Tensor:
    """2x2 token neighborhoods -> one token with doubled channels."""
    b, n, c = x.shape
    gh, gw = grid
    if gh % 2 or gw % 2:
        raise OddGrid(f"patch_merge grid {grid} must have even extents")
    if n != gh * gw:
        raise ShapeMismatch(f"token count {n} != grid {gh}x{gw}")
    t = reshape(x, (b, gh // 2, 2, gw // 2, 2, c))
    t = permute(t, (0, 1, 3, 2, 4, 5))
    t = reshape(t, (b, n // 4, 4 * c))
    t = layer_norm(t, p[f"{prefix}.norm.gamma"], p[f"{prefix}.norm.beta"])
    return linear(t, p[f"{prefix}.reduce.weight"])


def patch_expand_specs(c: int, prefix: str) -> Specs:
    return {f"{prefix}.expand.weight": ("trunc", (c, 2 * c))}


def patch_expand(x: Tensor, grid: tuple[int, int], p: Params, prefix: str) -> Tensor:
    """One token -> 2x2 neighborhood with halved channels (merge inverse)."""
    b, n, c = x.shape
    if c % 2:
        raise OddChannels(f"patch_expand needs even channels, got {c}")
    gh, gw = grid
    if n != gh * gw:
        raise ShapeMismatch(f"token count {n} != grid {gh}x{gw}")
    t = linear(x, p[f"{prefix}.expand.weight"])
    t = reshape(t, (b, gh, gw, 2, 2, c // 2))
    t = permute(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (b, 4 * n, c // 2))


def final_expand4_specs(c: int, prefix: str) -> Specs:
    return {f"{prefix}.expand.weight": ("trunc", (c, 16 * c))}


def final_expand4(x: Tensor, grid: tuple[int, int], p: Params, prefix: str) -> Tensor:
    """One token -> 4x4 neighborhood, channels preserved (recovers input res)."""
    b, n, c = x.shape
    gh, gw = grid
    if n != gh * gw:
        raise ShapeMismatch(f"token count {n} != grid {gh}x{gw}")
    t = linear(x, p[f"{prefix}.expand.weight"])
    t = reshape(t, (b, gh, gw, 4, 4, c))
    t = permute(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (b, 16 * n, c))


# ---------------------------------------------------------------------------
# Mix-FFN and the transformer block


def mix_ffn_specs(c: int, expansion: int, prefix: str) -> Specs:
    r = c * expansion
    return {
        f"{prefix}.lin1.weight": ("trunc", (c, r)),
        f"{prefix}.lin1.bias": ("zeros", (r,)),
        f"{prefix}.dw.weight": ("trunc", (r, 1, 3, 3)),
        f"{prefix}.dw.bias": ("zeros", (r,)),
        f"{prefix}.lin2.weight": ("trunc", (r, c)),
        f"{prefix}.lin2.bias": ("zeros", (c,)),
    }


def mix_ffn(x: Tensor, grid: tuple[int, int], p: Params, prefix: str) -> Tensor:
    """Expand, depthwise 3x3 over the token grid, GELU, project back.

    The depthwise convolution ties each token to its grid neighbors and acts
    as the positional signal: outputs are not token-permutation invariant.
    """
    b, n, c = x.shape
    gh, gw = grid
    if n != gh * gw:
        raise ShapeMismatch(f"token count {n} != grid {gh}x{gw}")
    h = linear(x, p[f"{prefix}.lin1.weight"], p[f"{prefix}.lin1.bias"])
    r = h.shape[-1]
    hg = permute(reshape(h, (b, gh, gw, r)), (0, 3, 1, 2))
    hg = conv2d(hg, p[f"{prefix}.dw.weight"], p[f"{prefix}.dw.bias"], stride=1, pad=1, groups=r)
    hg = gelu(hg)
    h = reshape(permute(hg, (0, 2, 3, 1)), (b, n, r))
    return linear(h, p[f"{prefix}.lin2.weight"], p[f"{prefix}.lin2.bias"])


def transformer_block_specs(cfg: StageConfig, prefix: str) -> Specs:
    c = cfg.d_model
    specs: Specs = {}
    if cfg.pre_norm:
        specs[f"{prefix}.norm0.gamma"] = ("ones", (c,))
        specs[f"{prefix}.norm0.beta"] = ("zeros", (c,))
    specs[f"{prefix}.attn.wq"] = ("trunc", (c, cfg.d_k))
    specs[f"{prefix}.attn.wk"] = ("trunc", (c, cfg.d_k))
    specs[f"{prefix}.attn.wv"] = ("trunc", (c, cfg.d_v))
    if cfg.heads > 1:
        specs[f"{prefix}.attn.wo"] = ("trunc", (cfg.d_v, c))
    specs[f"{prefix}.norm1.gamma"] = ("ones", (c,))
    specs[f"{prefix}.norm1.beta"] = ("zeros", (c,))
    specs.update(mix_ffn_specs(c, cfg.ffn_expansion, f"{prefix}.ffn"))
    return specs


def transformer_block(
    x: Tensor, grid: tuple[int, int], cfg: StageConfig, p: Params, prefix: str
) -> tuple[Tensor, AttentionTap]:
    """x1 = attention(x) + x; y = mix_ffn(norm(x1)) + x1.

    Attention acts on x directly (post-norm form); set ``pre_norm`` to
    normalize the attention input instead. With every learned weight at zero
    both branches vanish and the block is the identity.
    """
    xa = x
    if cfg.pre_norm:
        xa = layer_norm(x, p[f"{prefix}.norm0.gamma"], p[f"{prefix}.norm0.beta"])
    q, k, v = make_qkv(xa, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.wk"], p[f"{prefix}.attn.wv"])
    attn, tap = efficient_attention(q, k, v, cfg=None if cfg.heads == 1 else _attn_cfg(cfg), stage=cfg.stage)
    if cfg.heads > 1:
        attn = linear(attn, p[f"{prefix}.attn.wo"])
    x1 = add(attn, x)
    normed = layer_norm(x1, p[f"{prefix}.norm1.gamma"], p[f"{prefix}.norm1.beta"])
    return add(mix_ffn(normed, grid, p, f"{prefix}.ffn"), x1), tap


def _attn_cfg(cfg: StageConfig):
    from .attention import AttentionConfig

    return AttentionConfig(d_model=cfg.d_model, heads=cfg.heads)
