"""Inter-scale context fusion over the encoders' attention maps.

The three stages' normalized key maps are remapped to the last stage's
extents, pooled to one scalar each, re-weighted through a small gating FFN,
fused by a 1x1 convolution across the stage axis, and redistributed as
additive corrections to the skip connections. The fusion convolution starts
at zero, so a freshly built module is exactly the identity on the skips.

Stage geometry is a sequence of (tokens, key_dim, width) triples for stages
1..3; the reference extents are stage 3's (tokens, key_dim). Parameters
exist only for enabled stages, and the gating FFN is sized to the enabled
count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .attention import AttentionTap
from .autodiff import (
    ShapeMismatch,
    Tensor,
    add,
    concat,
    conv2d,
    gelu,
    linear,
    mul,
    reduce_mean,
    reshape,
    sigmoid,
    transpose_last,
)

Params = Mapping[str, Tensor]
Specs = dict[str, tuple[str, tuple]]
StageGeometry = Sequence[tuple[int, int, int]]  # (n_s, d_s, c_s) for s = 1..3


@dataclass
class ScaleMapSet:
    """One attention tap per encoder stage plus the reference extents."""

    maps: tuple[AttentionTap, AttentionTap, AttentionTap]
    reference: tuple[int, int]  # (n_ref, d_ref) = stage 3 extents

    def __post_init__(self):
        stages = tuple(m.stage for m in self.maps)
        if stages != (1, 2, 3):
            raise ValueError(f"expected taps for stages (1, 2, 3), got {stages}")
        tail = self.maps[2].key_map.shape[-2:]
        if tail != tuple(self.reference):
            raise ShapeMismatch(f"stage-3 map {tail} != reference {self.reference}")


@dataclass
class FusionWeights:
    """Per-stage scaling factors in (0, 1), shaped [..., enabled stages]."""

    values: Tensor


def _token_linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Learned map over the token axis: [..., n, d] -> [..., m, d]."""
    return transpose_last(linear(transpose_last(x), w, b))


def remap_to_reference(tap: AttentionTap, reference: tuple[int, int], p: Params, prefix: str) -> Tensor:
    """Resize a stage's key map to the reference extents.

    Stages 1 and 2 use a learned linear over the token axis followed by one
    over the channel axis; stage 3 already matches and passes through.
    """
    if tap.stage == 3:
        return tap.key_map
    t = _token_linear(tap.key_map, p[f"{prefix}.tok.weight"], p[f"{prefix}.tok.bias"])
    return linear(t, p[f"{prefix}.chan.weight"], p[f"{prefix}.chan.bias"])


def global_descriptor(maps: Sequence[Tensor]) -> Tensor:
    """Mean of every element per map, concatenated: [..., len(maps)]."""
    pooled = []
    for m in maps:
        g = reduce_mean(m, axes=(-2, -1))
        pooled.append(reshape(g, (*g.shape, 1)))
    return concat(pooled, axis=-1)


def fusion_weights(desc: Tensor, p: Params, prefix: str) -> FusionWeights:
    """Gating FFN k -> 4k -> k with GELU, squashed to (0, 1) by a sigmoid."""
    h = gelu(linear(desc, p[f"{prefix}.lin1.weight"], p[f"{prefix}.lin1.bias"]))
    h = linear(h, p[f"{prefix}.lin2.weight"], p[f"{prefix}.lin2.bias"])
    return FusionWeights(values=sigmoid(h))


def fuse(maps: Sequence[Tensor], weights: FusionWeights, p: Params, prefix: str) -> Tensor:
    """Scale each map by its factor, stack along a stage axis, 1x1-convolve.

    The convolution has len(maps) input channels and a single output channel
    (kernel 1x1 over the map extents); zero weights make the result zero.
    """
    k = len(maps)
    lead = maps[0].shape[:-2]
    n_ref, d_ref = maps[0].shape[-2:]
    stacked = concat([reshape(m, (*lead, 1, n_ref, d_ref)) for m in maps], axis=-3)
    w = reshape(weights.values, (*weights.values.shape, 1, 1))
    scaled = mul(stacked, w)
    flat = reshape(scaled, (-1, k, n_ref, d_ref))
    fused = conv2d(flat, p[f"{prefix}.conv.weight"], p[f"{prefix}.conv.bias"])
    return reshape(fused, (*lead, n_ref, d_ref))


def redistribute(fused: Tensor, stage: int, target: tuple[int, int], p: Params, prefix: str) -> Tensor:
    """Project the fused context back to one stage's skip extents (n_s, c_s).

    The token axis is remapped by a learned linear (identity-size for stage 3,
    so it is omitted there); channels are projected from the reference key
    dim to the stage's full width.
    """
    t = fused
    if stage != 3:
        t = _token_linear(t, p[f"{prefix}.tok.weight"], p[f"{prefix}.tok.bias"])
    t = linear(t, p[f"{prefix}.chan.weight"], p[f"{prefix}.chan.bias"])
    if t.shape[-2:] != tuple(target):
        raise ShapeMismatch(f"redistribute produced {t.shape[-2:]}, expected {target}")
    return t


def iscf_forward(
    taps: ScaleMapSet,
    skips: Sequence[Tensor],
    enabled_stages: Sequence[int],
    p: Params,
    prefix: str = "iscf",
) -> tuple[Tensor, Tensor, Tensor]:
    """Enrich the enabled stages' skips with the fused inter-scale context.

    Disabled stages pass through untouched (the same tensors, bit for bit).
    """
    enabled = tuple(sorted(set(enabled_stages)))
    if len(skips) != 3:
        raise ShapeMismatch(f"expected 3 skip tensors, got {len(skips)}")
    if not enabled:
        return tuple(skips)
    if any(s not in (1, 2, 3) for s in enabled):
        raise ValueError(f"enabled stages {enabled} must be within {{1, 2, 3}}")
    remapped = [
        remap_to_reference(taps.maps[s - 1], taps.reference, p, f"{prefix}.remap{s}")
        for s in enabled
    ]
    desc = global_descriptor(remapped)
    weights = fusion_weights(desc, p, f"{prefix}.ffn")
    fused = fuse(remapped, weights, p, f"{prefix}.fuse")
    out = []
    for s in (1, 2, 3):
        skip = skips[s - 1]
        if s in enabled:
            correction = redistribute(
                fused, s, skip.shape[-2:], p, f"{prefix}.redist{s}"
            )
            skip = add(skip, correction)
        out.append(skip)
    return tuple(out)


# ---------------------------------------------------------------------------
# parameter accounting


def iscf_specs(geometry: StageGeometry, enabled_stages: Sequence[int], prefix: str = "iscf") -> Specs:
    enabled = tuple(sorted(set(enabled_stages)))
    if not enabled:
        return {}
    n_ref, d_ref, _ = geometry[2]
    k = len(enabled)
    specs: Specs = {}
    for s in enabled:
        n_s, d_s, _ = geometry[s - 1]
        if s != 3:
            specs[f"{prefix}.remap{s}.tok.weight"] = ("trunc", (n_s, n_ref))
            specs[f"{prefix}.remap{s}.tok.bias"] = ("zeros", (n_ref,))
            specs[f"{prefix}.remap{s}.chan.weight"] = ("trunc", (d_s, d_ref))
            specs[f"{prefix}.remap{s}.chan.bias"] = ("zeros", (d_ref,))
    specs[f"{prefix}.ffn.lin1.weight"] = ("trunc", (k, 4 * k))
    specs[f"{prefix}.ffn.lin1.bias"] = ("zeros", (4 * k,))
    specs[f"{prefix}.ffn.lin2.weight"] = ("trunc", (4 * k, k))
    specs[f"{prefix}.ffn.lin2.bias"] = ("zeros", (k,))
    specs[f"{prefix}.fuse.conv.weight"] = ("zeros", (1, k, 1, 1))
    specs[f"{prefix}.fuse.conv.bias"] = ("zeros", (1,))
    for s in enabled:
        n_s, _, c_s = geometry[s - 1]
        if s != 3:
            specs[f"{prefix}.redist{s}.tok.weight"] = ("trunc", (n_ref, n_s))
            specs[f"{prefix}.redist{s}.tok.bias"] = ("zeros", (n_s,))
        specs[f"{prefix}.redist{s}.chan.weight"] = ("trunc", (d_ref, c_s))
        specs[f"{prefix}.redist{s}.chan.bias"] = ("zeros", (c_s,))
    return specs


def iscf_param_count(geometry: StageGeometry, enabled_stages: Sequence[int]) -> int:
    """Closed-form element count of the fusion module's parameters."""
    enabled = tuple(sorted(set(enabled_stages)))
    if not enabled:
        return 0
    n_ref, d_ref, _ = geometry[2]
    k = len(enabled)
    total = 0
    for s in enabled:
        n_s, d_s, c_s = geometry[s - 1]
        if s != 3:
            total += n_s * n_ref + n_ref  # remap token linear
            total += d_s * d_ref + d_ref  # remap channel linear
            total += n_ref * n_s + n_s  # redistribute token linear
        total += d_ref * c_s + c_s  # redistribute channel linear
    total += k * 4 * k + 4 * k + 4 * k * k + k  # gating FFN
    total += k + 1  # fusion convolution
    return total
