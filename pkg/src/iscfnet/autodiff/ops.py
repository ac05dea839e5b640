"""Differentiable primitives: exactly the operations the network needs.

Each function validates shapes, computes forward with numpy (float64 unless
the operands are float32), and registers a backward closure on the active
tape when any operand is tracked. Gradients accumulate by addition in the
tape's slots; values are never mutated in place.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import (
    CountMismatch,
    InvalidPermutation,
    NonIntegralOutputExtent,
    ShapeMismatch,
    Tensor,
    active_tape,
    tensor,
)

# Constants of the tanh-form GELU: 0.5*x*(1 + tanh(c0*(x + c1*x^3))).
GELU_C0 = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_C1 = 0.044715


@dataclass
class AllocationStats:
    """Byte counts of op result buffers produced while tracking was active."""

    total_bytes: int = 0
    peak_block_bytes: int = 0
    blocks: int = 0

    def note(self, nbytes: int) -> None:
        self.total_bytes += nbytes
        self.blocks += 1
        if nbytes > self.peak_block_bytes:
            self.peak_block_bytes = nbytes


_ALLOC_STACK: list[AllocationStats] = []


@contextmanager
def track_allocations():
    """Count op result buffers (views included at their logical size)."""
    stats = AllocationStats()
    _ALLOC_STACK.append(stats)
    try:
        yield stats
    finally:
        _ALLOC_STACK.pop()


def _finish(kind: str, out: np.ndarray, inputs: tuple, backward) -> Tensor:
    if _ALLOC_STACK:
        nbytes = out.nbytes
        for stats in _ALLOC_STACK:
            stats.note(nbytes)
    tape = active_tape()
    if tape is None:
        return Tensor._wrap(out)
    ids = tuple(t.node_id if t.tape is tape else None for t in inputs)
    if all(i is None for i in ids):
        return Tensor._wrap(out)
    nid = tape._record(kind, ids, backward)
    return Tensor._wrap(out, node_id=nid, tape=tape)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(sa: tuple, sb: tuple, op: str) -> None:
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {sa} and {sb} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "add")
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "mul")
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish("mul", out, (a, b), bwd)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = x.data * factor

    def bwd(g):
        return (g * factor,)

    return _finish("scale", out, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    inner = GELU_C0 * (xd + GELU_C1 * xd * xd * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bwd(g):
        d_inner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * xd * xd)
        deriv = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner
        return (g * deriv,)

    return _finish("gelu", out, (x,), bwd)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_stable(x.data)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _finish("sigmoid", s, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2], "matmul leading axes")
    out = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ _swap_last(b.data), a.shape)
        gb = _unbroadcast(_swap_last(a.data) @ g, b.shape)
        return ga, gb

    return _finish("matmul", out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if w.ndim != 2:
        raise ShapeMismatch(f"linear weight must be 2-d, got {w.shape}")
    d_in, d_out = w.shape
    if x.shape[-1] != d_in:
        raise ShapeMismatch(f"linear: input extent {x.shape[-1]} != weight rows {d_in}")
    if bias is not None and bias.shape != (d_out,):
        raise ShapeMismatch(f"linear: bias shape {bias.shape} != ({d_out},)")
    out = x.data @ w.data
    if bias is not None:
        out = out + bias.data
    operands = (x, w) if bias is None else (x, w, bias)

    def bwd(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, d_in).T @ g.reshape(-1, d_out)
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, d_out).sum(axis=0)

    return _finish("linear", out, operands, bwd)


def softmax(x: Tensor, axis: int) -> Tensor:
    axis = _normalize_axis(axis, x.ndim, "softmax")
    # One scratch buffer: subtract the max, exponentiate, normalize in place.
    s = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", s, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} != ({d},)"
        )
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _finish("layer_norm", out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# convolution


def _pad4(pad) -> tuple:
    if isinstance(pad, int):
        return (pad, pad, pad, pad)
    pt, pb, pl, pr = pad
    return (int(pt), int(pb), int(pl), int(pr))


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad=0,
    groups: int = 1,
) -> Tensor:
    """Direct cross-correlation: per-offset strided slices, no im2col buffer.

    ``pad`` is an int (symmetric) or (top, bottom, left, right).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d operands, got {x.shape} and {w.shape}")
    b, c_in, h, wd = x.shape
    c_out, c_in_g, kh, kw = w.shape
    if c_in % groups or c_out % groups:
        raise ShapeMismatch(f"conv2d: channels {c_in}->{c_out} not divisible by groups {groups}")
    if c_in_g != c_in // groups:
        raise ShapeMismatch(
            f"conv2d: weight expects {c_in_g} channels/group, input has {c_in // groups}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    pt, pb, pl, pr = _pad4(pad)
    s = int(stride)
    if (h + pt + pb - kh) % s or (wd + pl + pr - kw) % s:
        raise NonIntegralOutputExtent(
            f"conv2d: input {h}x{wd}, kernel {kh}x{kw}, stride {s}, pad {(pt, pb, pl, pr)}"
        )
    ho = (h + pt + pb - kh) // s + 1
    wo = (wd + pl + pr - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise NonIntegralOutputExtent(f"conv2d: empty output {ho}x{wo}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cig, cog = c_in // groups, c_out // groups
    xg = xp.reshape(b, groups, cig, h + pt + pb, wd + pl + pr)
    wg = w.data.reshape(groups, cog, cig, kh, kw)
    depthwise = groups == c_in and c_out == c_in

    out = np.zeros((b, c_out, ho, wo), dtype=xp.dtype)
    og = out.reshape(b, groups, cog, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xs = xg[:, :, :, i : i + s * ho : s, j : j + s * wo : s]
            if depthwise:
                out += xs.reshape(b, c_in, ho, wo) * wg[:, 0, 0, i, j][None, :, None, None]
            elif groups == 1:
                og[:, 0] += np.einsum("bihw,oi->bohw", xs[:, 0], wg[0, :, :, i, j])
            else:
                og += np.einsum("bgihw,goi->bgohw", xs, wg[:, :, :, i, j])
    if bias is not None:
        out += bias.data[None, :, None, None]
    operands = (x, w) if bias is None else (x, w, bias)

    def bwd(g):
        gg = g.reshape(b, groups, cog, ho, wo)
        gw = np.zeros_like(w.data).reshape(groups, cog, cig, kh, kw)
        gxp = np.zeros_like(xp)
        gxg = gxp.reshape(b, groups, cig, *xp.shape[-2:])
        for i in range(kh):
            for j in range(kw):
                xs = xg[:, :, :, i : i + s * ho : s, j : j + s * wo : s]
                dst = gxg[:, :, :, i : i + s * ho : s, j : j + s * wo : s]
                if depthwise:
                    gw[:, 0, 0, i, j] = np.einsum("bghw,bghw->g", gg[:, :, 0], xs[:, :, 0])
                    dst += gg * wg[:, 0, 0, i, j][None, :, None, None, None]
                elif groups == 1:
                    gw[0, :, :, i, j] = np.einsum("bohw,bihw->oi", gg[:, 0], xs[:, 0])
                    dst[:, 0] += np.einsum("bohw,oi->bihw", gg[:, 0], wg[0, :, :, i, j])
                else:
                    gw[:, :, :, i, j] = np.einsum("bgohw,bgihw->goi", gg, xs)
                    dst += np.einsum("bgohw,goi->bgihw", gg, wg[:, :, :, i, j])
        gx = gxp[:, :, pt : pt + h, pl : pl + wd]
        if bias is None:
            return gx, gw.reshape(w.shape)
        return gx, gw.reshape(w.shape), g.sum(axis=(0, 2, 3))

    return _finish("conv2d", out, operands, bwd)


# ---------------------------------------------------------------------------
# reductions and layout


def _normalize_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"{op}: axis {axis} out of bounds for {ndim}-d tensor")
    return axis % ndim


def _normalize_axes(axes, ndim: int, op: str) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = tuple(_normalize_axis(a, ndim, op) for a in axes)
    if len(set(norm)) != len(norm):
        raise ValueError(f"{op}: repeated axes {axes}")
    return norm


def _reduce(kind: str, x: Tensor, axes) -> Tensor:
    ax = _normalize_axes(axes, x.ndim, kind)
    count = 1
    for a in ax:
        count *= x.shape[a]
    out = x.data.sum(axis=ax)
    if kind == "mean":
        out = out / count
    kept = [1 if i in ax else e for i, e in enumerate(x.shape)]

    def bwd(g):
        expanded = np.broadcast_to(g.reshape(kept), x.shape)
        return ((expanded / count) if kind == "mean" else expanded,)

    return _finish(kind, out, (x,), bwd)


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    return _reduce("sum", x, axes)


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    return _reduce("mean", x, axes)


def reshape(x: Tensor, new_shape) -> Tensor:
    shape = tuple(int(e) for e in new_shape)
    if any(e == -1 for e in shape):
        known = 1
        for e in shape:
            if e != -1:
                known *= e
        if shape.count(-1) != 1 or known == 0 or x.size % known:
            raise CountMismatch(f"reshape {x.shape} -> {new_shape}")
        shape = tuple(x.size // known if e == -1 else e for e in shape)
    count = 1
    for e in shape:
        count *= e
    if count != x.size:
        raise CountMismatch(f"reshape {x.shape} -> {shape}: {x.size} != {count} elements")
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _finish("reshape", out, (x,), bwd)


def permute(x: Tensor, order) -> Tensor:
    order = tuple(int(a) for a in order)
    if sorted(order) != list(range(x.ndim)):
        raise InvalidPermutation(f"permute order {order} invalid for {x.ndim}-d tensor")
    out = np.transpose(x.data, order)
    inverse = np.argsort(order)

    def bwd(g):
        return (np.transpose(g, inverse),)

    return _finish("permute", out, (x,), bwd)


def transpose_last(x: Tensor) -> Tensor:
    """Swap the trailing two axes."""
    order = list(range(x.ndim))
    order[-1], order[-2] = order[-2], order[-1]
    return permute(x, order)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeMismatch("concat of zero tensors")
    ndim = tensors[0].ndim
    axis = _normalize_axis(axis, ndim, "concat")
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            i != axis and t.shape[i] != tensors[0].shape[i] for i in range(ndim)
        ):
            raise ShapeMismatch(
                f"concat along axis {axis}: {t.shape} vs {tensors[0].shape}"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _finish("concat", out, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# loss


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy from logits, in overflow-safe form.

    Uses max(z,0) - z*t + log(1 + exp(-|z|)) so saturated logits never
    overflow; the backward rule is the exact (sigmoid(z) - t) / count.
    """
    if logits.shape != target.shape:
        raise ShapeMismatch(f"bce: logits {logits.shape} vs target {target.shape}")
    z, t = logits.data, target.data
    out = np.asarray(np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))))
    count = z.size

    def bwd(g):
        gz = g * (_sigmoid_stable(z) - t) / count
        gt = g * (-z) / count
        return gz, gt

    return _finish("bce_with_logits", out, (logits, target), bwd)
