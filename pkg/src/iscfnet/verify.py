"""Finite-difference verification suites behind the gradcheck command.

Scopes: ``primitives`` (every autodiff op), ``blocks`` (patch ops and the
transformer block), ``iscf`` (the fusion pipeline), ``model`` (tiny
end-to-end network, sampled coordinates). Each check reports its max
relative error against central differences; thresholds are 1e-4 for the
first three scopes and 1e-3 for the full model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import blocks, iscf, model
from .attention import AttentionTap, efficient_attention, make_qkv
from .autodiff import Tensor, grad_check, tensor
from .autodiff import ops
from .blocks import StageConfig
from .iscf import ScaleMapSet

SCOPE_THRESHOLDS = {
    "primitives": 1e-4,
    "blocks": 1e-4,
    "iscf": 1e-4,
    "model": 1e-3,
}


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    """Random projection to a scalar so no gradient direction cancels."""
    return ops.reduce_sum(ops.mul(out, tensor(weights)))


def _params_for(specs: dict, rng: np.random.Generator) -> tuple[list[str], list[np.ndarray]]:
    names = list(specs)
    arrays = [rng.normal(0.0, 0.5, size=specs[n][1]) for n in names]
    return names, arrays


# ---------------------------------------------------------------------------
# primitives


def _primitive_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list]]:
    r = lambda *shape: rng.standard_normal(shape)
    cases: list[tuple[str, Callable, list]] = []

    w1 = r(3, 5)
    cases.append(("matmul", lambda a, b: _scalarize(ops.matmul(a, b), w1), [r(3, 4), r(4, 5)]))
    w2 = r(2, 3, 5)
    cases.append(
        ("matmul_batched", lambda a, b: _scalarize(ops.matmul(a, b), w2), [r(2, 3, 4), r(4, 5)])
    )
    w3 = r(3, 5)
    cases.append(("softmax", lambda x: _scalarize(ops.softmax(x, -1), w3), [r(3, 5)]))
    w4 = r(4, 3)
    cases.append(("softmax_axis0", lambda x: _scalarize(ops.softmax(x, 0), w4), [r(4, 3)]))
    w5 = r(2, 6)
    cases.append(
        (
            "layer_norm",
            lambda x, g, b: _scalarize(ops.layer_norm(x, g, b), w5),
            [r(2, 6), 1.0 + 0.3 * r(6), 0.3 * r(6)],
        )
    )
    w6 = r(2, 4, 5, 5)
    cases.append(
        (
            "conv2d",
            lambda x, w, b: _scalarize(ops.conv2d(x, w, b, stride=1, pad=1), w6),
            [r(2, 3, 5, 5), r(4, 3, 3, 3), r(4)],
        )
    )
    w7 = r(1, 3, 3, 3)
    cases.append(
        (
            "conv2d_strided",
            lambda x, w: _scalarize(ops.conv2d(x, w, stride=2, pad=0), w7),
            [r(1, 2, 7, 7), r(3, 2, 3, 3)],
        )
    )
    w8 = r(1, 4, 5, 5)
    cases.append(
        (
            "conv2d_depthwise",
            lambda x, w, b: _scalarize(ops.conv2d(x, w, b, stride=1, pad=1, groups=4), w8),
            [r(1, 4, 5, 5), r(4, 1, 3, 3), r(4)],
        )
    )
    w9 = r(3, 2)
    cases.append(
        ("linear", lambda x, w, b: _scalarize(ops.linear(x, w, b), w9), [r(3, 4), r(4, 2), r(2)])
    )
    w10 = r(2, 3)
    cases.append(("add_broadcast", lambda a, b: _scalarize(ops.add(a, b), w10), [r(2, 3), r(3)]))
    cases.append(("mul", lambda a, b: _scalarize(ops.mul(a, b), w10), [r(2, 3), r(2, 3)]))
    w11 = r(2, 3, 4)
    cases.append(
        ("mul_broadcast", lambda a, b: _scalarize(ops.mul(a, b), w11), [r(2, 3, 4), r(2, 1, 1)])
    )
    w12 = r(7)
    cases.append(("scale", lambda x: _scalarize(ops.scale(x, -1.7), w12), [r(7)]))
    cases.append(("gelu", lambda x: _scalarize(ops.gelu(x), w12), [r(7)]))
    cases.append(("sigmoid", lambda x: _scalarize(ops.sigmoid(x), w12), [r(7)]))
    w13 = r(4)
    cases.append(("reduce_mean", lambda x: _scalarize(ops.reduce_mean(x, (0, 2)), w13), [r(3, 4, 5)]))
    cases.append(("reduce_sum", lambda x: ops.reduce_sum(x), [r(3, 4)]))
    w14 = r(6, 2)
    cases.append(("reshape", lambda x: _scalarize(ops.reshape(x, (6, 2)), w14), [r(3, 4)]))
    w15 = r(4, 2, 3)
    cases.append(("permute", lambda x: _scalarize(ops.permute(x, (2, 0, 1)), w15), [r(2, 3, 4)]))
    w16 = r(2, 7)
    cases.append(
        (
            "concat",
            lambda a, b, c: _scalarize(ops.concat([a, b, c], axis=1), w16),
            [r(2, 3), r(2, 1), r(2, 3)],
        )
    )
    target = (rng.random((2, 3, 4)) > 0.5).astype(float)
    cases.append(
        ("bce_with_logits", lambda z, t: ops.bce_with_logits(z, t), [2.0 * r(2, 3, 4), target])
    )
    w17 = r(5, 6)
    cases.append(
        (
            "efficient_attention",
            lambda q, k, v: _scalarize(efficient_attention(q, k, v)[0], w17),
            [r(5, 4), r(5, 4), r(5, 6)],
        )
    )
    return cases


def check_primitives(seeds: Sequence[int] = tuple(range(10)), eps: float = 1e-5) -> list[CheckResult]:
    threshold = SCOPE_THRESHOLDS["primitives"]
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, f, inputs in _primitive_cases(np.random.default_rng(seed)):
            err = grad_check(f, inputs, eps=eps)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(name, err, threshold) for name, err in worst.items()]


# ---------------------------------------------------------------------------
# blocks


def _check_with_params(name, forward, x_shapes, specs, rng, threshold, sample=8, eps=1e-5):
    names, arrays = _params_for(specs, rng)
    xs = [rng.standard_normal(s) for s in x_shapes]

    def f(*args):
        data = args[: len(xs)]
        p = dict(zip(names, args[len(xs) :]))
        return forward(data, p)

    err = grad_check(f, [*xs, *arrays], eps=eps, sample=sample, rng=rng)
    return CheckResult(name, err, threshold)


def check_blocks(seeds: Sequence[int] = (0, 1, 2), sample: int = 8) -> list[CheckResult]:
    threshold = SCOPE_THRESHOLDS["blocks"]
    merged: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(100 + seed)
        grid = (4, 4)
        cfg = StageConfig(d_model=8, grid=grid, stage=1)
        w_embed = rng.standard_normal((1, 8 * 8, 6))
        w_tok = rng.standard_normal((1, 16, 8))
        w_merge = rng.standard_normal((1, 4, 16))
        w_expand = rng.standard_normal((1, 64, 4))
        w_final = rng.standard_normal((1, 256, 8))
        results = [
            _check_with_params(
                "patch_embed",
                lambda data, p, w=w_embed: _scalarize(
                    blocks.patch_embed(data[0], p, "pe", norm=True)[0], w
                ),
                [(1, 3, 32, 32)],
                blocks.patch_embed_specs(6, "pe"),
                rng,
                threshold,
                sample=sample,
            ),
            _check_with_params(
                "patch_merge",
                lambda data, p, w=w_merge: _scalarize(blocks.patch_merge(data[0], grid, p, "pm"), w),
                [(1, 16, 8)],
                blocks.patch_merge_specs(8, "pm"),
                rng,
                threshold,
                sample=sample,
            ),
            _check_with_params(
                "patch_expand",
                lambda data, p, w=w_expand: _scalarize(blocks.patch_expand(data[0], grid, p, "px"), w),
                [(1, 16, 8)],
                blocks.patch_expand_specs(8, "px"),
                rng,
                threshold,
                sample=sample,
            ),
            _check_with_params(
                "final_expand4",
                lambda data, p, w=w_final: _scalarize(blocks.final_expand4(data[0], grid, p, "fx"), w),
                [(1, 16, 8)],
                blocks.final_expand4_specs(8, "fx"),
                rng,
                threshold,
                sample=sample,
            ),
            _check_with_params(
                "mix_ffn",
                lambda data, p, w=w_tok: _scalarize(blocks.mix_ffn(data[0], grid, p, "mf"), w),
                [(1, 16, 8)],
                blocks.mix_ffn_specs(8, 2, "mf"),
                rng,
                threshold,
                sample=sample,
            ),
            _check_with_params(
                "transformer_block",
                lambda data, p, w=w_tok: _scalarize(
                    blocks.transformer_block(data[0], grid, cfg, p, "tb")[0], w
                ),
                [(1, 16, 8)],
                blocks.transformer_block_specs(cfg, "tb"),
                rng,
                threshold,
                sample=sample,
            ),
            _check_with_params(
                "make_qkv_attention",
                lambda data, p, w=w_tok: _scalarize(
                    efficient_attention(*make_qkv(data[0], p["wq"], p["wk"], p["wv"]))[0], w
                ),
                [(1, 16, 8)],
                {"wq": ("trunc", (8, 4)), "wk": ("trunc", (8, 4)), "wv": ("trunc", (8, 8))},
                rng,
                threshold,
                sample=sample,
            ),
        ]
        for res in results:
            merged[res.name] = max(merged.get(res.name, 0.0), res.max_rel_err)
    return [CheckResult(name, err, threshold) for name, err in merged.items()]


# ---------------------------------------------------------------------------
# iscf


def _geometry():
    # Stage (tokens, key_dim, width) triples of a 32x32, d1=8 network.
    return ((64, 4, 8), (16, 8, 16), (4, 16, 32))


def check_iscf(seeds: Sequence[int] = (0, 1, 2), sample: int = 8) -> list[CheckResult]:
    threshold = SCOPE_THRESHOLDS["iscf"]
    geometry = _geometry()
    enabled = (1, 2, 3)
    merged: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(200 + seed)
        specs = iscf.iscf_specs(geometry, enabled)
        names, arrays = _params_for(specs, rng)
        tap_shapes = [(1, n, d) for n, d, _ in geometry]
        skip_shapes = [(1, n, c) for n, _, c in geometry]
        w_out = [rng.standard_normal(s) for s in skip_shapes]

        def f(*args):
            taps_data = args[:3]
            skips = args[3:6]
            p = dict(zip(names, args[6:]))
            taps = ScaleMapSet(
                maps=tuple(
                    AttentionTap(stage=s, key_map=taps_data[s - 1], token_count=geometry[s - 1][0])
                    for s in (1, 2, 3)
                ),
                reference=(geometry[2][0], geometry[2][1]),
            )
            outs = iscf.iscf_forward(taps, skips, enabled, p)
            total = _scalarize(outs[0], w_out[0])
            for o, w in zip(outs[1:], w_out[1:]):
                total = ops.add(total, _scalarize(o, w))
            return total

        inputs = [rng.standard_normal(s) for s in tap_shapes]
        inputs += [rng.standard_normal(s) for s in skip_shapes]
        inputs += arrays
        err = grad_check(f, inputs, eps=1e-5, sample=sample, rng=rng)
        merged["iscf_forward"] = max(merged.get("iscf_forward", 0.0), err)

        # Isolated fusion-path pieces.
        w_ref = rng.standard_normal((1, 4, 16))
        remap_specs = {
            "rm.tok.weight": ("trunc", (64, 4)),
            "rm.tok.bias": ("zeros", (4,)),
            "rm.chan.weight": ("trunc", (4, 16)),
            "rm.chan.bias": ("zeros", (16,)),
        }
        res = _check_with_params(
            "remap_to_reference",
            lambda data, p, w=w_ref: _scalarize(
                iscf.remap_to_reference(
                    AttentionTap(stage=1, key_map=data[0], token_count=64), (4, 16), p, "rm"
                ),
                w,
            ),
            [(1, 64, 4)],
            remap_specs,
            rng,
            threshold,
            sample=sample,
        )
        merged[res.name] = max(merged.get(res.name, 0.0), res.max_rel_err)

        ffn_specs = {
            "fw.lin1.weight": ("trunc", (3, 12)),
            "fw.lin1.bias": ("zeros", (12,)),
            "fw.lin2.weight": ("trunc", (12, 3)),
            "fw.lin2.bias": ("zeros", (3,)),
        }
        w_fw = rng.standard_normal((1, 3))
        res = _check_with_params(
            "fusion_weights",
            lambda data, p, w=w_fw: _scalarize(iscf.fusion_weights(data[0], p, "fw").values, w),
            [(1, 3)],
            ffn_specs,
            rng,
            threshold,
            sample=sample,
        )
        merged[res.name] = max(merged.get(res.name, 0.0), res.max_rel_err)

        fuse_specs = {
            "fz.conv.weight": ("trunc", (1, 3, 1, 1)),
            "fz.conv.bias": ("zeros", (1,)),
        }
        w_fz = rng.standard_normal((1, 4, 16))

        def f_fuse(data, p, w=w_fz):
            from .iscf import FusionWeights

            maps = list(data[:3])
            weights = FusionWeights(values=ops.sigmoid(data[3]))
            return _scalarize(iscf.fuse(maps, weights, p, "fz"), w)

        res = _check_with_params(
            "fuse",
            f_fuse,
            [(1, 4, 16), (1, 4, 16), (1, 4, 16), (1, 3)],
            fuse_specs,
            rng,
            threshold,
            sample=sample,
        )
        merged[res.name] = max(merged.get(res.name, 0.0), res.max_rel_err)

        redist_specs = {
            "rd.tok.weight": ("trunc", (4, 64)),
            "rd.tok.bias": ("zeros", (64,)),
            "rd.chan.weight": ("trunc", (16, 8)),
            "rd.chan.bias": ("zeros", (8,)),
        }
        w_rd = rng.standard_normal((1, 64, 8))
        res = _check_with_params(
            "redistribute",
            lambda data, p, w=w_rd: _scalarize(iscf.redistribute(data[0], 1, (64, 8), p, "rd"), w),
            [(1, 4, 16)],
            redist_specs,
            rng,
            threshold,
            sample=sample,
        )
        merged[res.name] = max(merged.get(res.name, 0.0), res.max_rel_err)
    return [CheckResult(name, err, threshold) for name, err in merged.items()]


# ---------------------------------------------------------------------------
# full model


def check_model(sample: int = 5, seed: int = 0) -> list[CheckResult]:
    """End-to-end check on a 32x32, d1=8 network against the BCE loss,
    sampling a few coordinates per parameter tensor."""
    threshold = SCOPE_THRESHOLDS["model"]
    cfg = model.ModelConfig(input_hw=(32, 32), base_width=8, seed=seed)
    rng = np.random.default_rng(300 + seed)
    specs = model.param_specs(cfg)
    names = list(specs)
    base = model.build(cfg)
    # Perturb every parameter away from its init so no branch is gated shut
    # (the fusion convolution starts at zero and would block its upstream).
    arrays = [base[n].value.data + rng.normal(0.0, 0.05, size=specs[n][1]) for n in names]
    image = rng.random((1, 3, 32, 32))
    target = (rng.random((1, 1, 32, 32)) > 0.5).astype(float)

    def f(*args):
        p = dict(zip(names, args))
        artifacts = model.forward(tensor(image), p, cfg)
        return ops.bce_with_logits(artifacts.logits, tensor(target))

    err = grad_check(f, arrays, eps=1e-4, sample=sample, rng=rng)
    return [CheckResult("model_bce", err, threshold)]


SCOPES: dict[str, Callable[[], list[CheckResult]]] = {
    "primitives": check_primitives,
    "blocks": check_blocks,
    "iscf": check_iscf,
    "model": check_model,
}


def run_scope(scope: str) -> list[CheckResult]:
    if scope == "all":
        results = []
        for name in ("primitives", "blocks", "iscf", "model"):
            results.extend(SCOPES[name]())
        return results
    return SCOPES[scope]()
