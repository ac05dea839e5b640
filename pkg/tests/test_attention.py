"""Attention oracles: loop evaluation, multiplication-order equality, taps."""

import numpy as np
import pytest

from iscfnet.attention import (
    AttentionConfig,
    efficient_attention,
    explicit_context_attention,
    make_qkv,
    standard_attention,
)
from iscfnet.autodiff import (
    ShapeMismatch,
    grad_check,
    mul,
    reduce_sum,
    tensor,
    track_allocations,
)


def rnd(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12))


# ---------------------------------------------------------------------------
# standard attention


def test_standard_single_token_returns_v():
    q, k = rnd(1, 4, seed=1), rnd(1, 4, seed=2)
    v = rnd(1, 6, seed=3)
    out = standard_attention(tensor(q), tensor(k), tensor(v))
    np.testing.assert_allclose(out.data, v, rtol=1e-12)


def test_standard_uniform_weights_give_column_mean():
    # q orthogonal to every key row -> all logits equal -> uniform weights.
    k = np.zeros((5, 3))
    k[:, 0] = rnd(5, seed=4)
    q = np.zeros((2, 3))
    q[:, 1] = 1.0
    v = rnd(5, 4, seed=5)
    out = standard_attention(tensor(q), tensor(k), tensor(v))
    np.testing.assert_allclose(out.data, np.broadcast_to(v.mean(axis=0), (2, 4)), rtol=1e-12)


def test_standard_matches_double_loop_oracle():
    n, dk, dv = 4, 3, 5
    q, k, v = rnd(n, dk, seed=6), rnd(n, dk, seed=7), rnd(n, dv, seed=8)
    s = 1.0 / np.sqrt(dk)
    expected = np.zeros((n, dv))
    for i in range(n):
        logits = np.array([s * sum(q[i, a] * k[j, a] for a in range(dk)) for j in range(n)])
        weights = np.exp(logits - logits.max())
        weights /= weights.sum()
        for j in range(n):
            expected[i] += weights[j] * v[j]
    out = standard_attention(tensor(q), tensor(k), tensor(v))
    assert rel_err(out.data, expected) < 1e-12


def test_standard_invariant_to_global_key_shift():
    # k -> k + c shifts every row of logits by a per-row constant.
    q, k, v = rnd(6, 4, seed=9), rnd(6, 4, seed=10), rnd(6, 5, seed=11)
    base = standard_attention(tensor(q), tensor(k), tensor(v))
    shifted = standard_attention(tensor(q), tensor(k + 3.7), tensor(v))
    np.testing.assert_allclose(shifted.data, base.data, atol=1e-12)


# ---------------------------------------------------------------------------
# efficient attention


@pytest.mark.parametrize("seed", range(5))
def test_two_path_equality(seed):
    q, k, v = (tensor(rnd(16, 8, seed=100 + seed + 10 * i)) for i in range(3))
    fast, _ = efficient_attention(q, k, v)
    slow = explicit_context_attention(q, k, v)
    assert rel_err(fast.data, slow.data) < 1e-9


def test_efficient_single_token_degeneracy():
    q, k = rnd(1, 4, seed=12), rnd(1, 4, seed=13)
    v = rnd(1, 6, seed=14)
    out, tap = efficient_attention(tensor(q), tensor(k), tensor(v))
    np.testing.assert_allclose(tap.key_map.data, np.ones((1, 4)))
    np.testing.assert_allclose(out.data, v, rtol=1e-12)


def test_tap_columns_and_query_rows_sum_to_one():
    q, k, v = (tensor(rnd(12, 6, seed=15 + i)) for i in range(3))
    out, tap = efficient_attention(q, k, v)
    np.testing.assert_allclose(tap.key_map.data.sum(axis=0), np.ones(6), atol=1e-9)
    from iscfnet.autodiff import softmax

    rq = softmax(q, axis=-1)
    np.testing.assert_allclose(rq.data.sum(axis=-1), np.ones(12), atol=1e-9)
    assert tap.token_count == 12


def test_efficient_invariant_to_per_column_key_shift():
    q, k, v = rnd(8, 4, seed=20), rnd(8, 4, seed=21), rnd(8, 5, seed=22)
    shift = np.array([1.0, -2.0, 0.5, 10.0])  # one constant per key column
    base_out, base_tap = efficient_attention(tensor(q), tensor(k), tensor(v))
    out, tap = efficient_attention(tensor(q), tensor(k + shift), tensor(v))
    np.testing.assert_allclose(tap.key_map.data, base_tap.key_map.data, atol=1e-12)
    np.testing.assert_allclose(out.data, base_out.data, atol=1e-12)


def test_efficient_token_permutation_equivariance():
    q, k, v = rnd(10, 4, seed=23), rnd(10, 4, seed=24), rnd(10, 6, seed=25)
    perm = np.random.default_rng(26).permutation(10)
    base, _ = efficient_attention(tensor(q), tensor(k), tensor(v))
    permuted, _ = efficient_attention(tensor(q[perm]), tensor(k[perm]), tensor(v[perm]))
    np.testing.assert_allclose(permuted.data, base.data[perm], atol=1e-12)


def test_efficient_batched_matches_per_item():
    q, k, v = rnd(3, 9, 4, seed=27), rnd(3, 9, 4, seed=28), rnd(3, 9, 6, seed=29)
    out, tap = efficient_attention(tensor(q), tensor(k), tensor(v))
    for i in range(3):
        single, stap = efficient_attention(tensor(q[i]), tensor(k[i]), tensor(v[i]))
        np.testing.assert_allclose(out.data[i], single.data, rtol=1e-12)
        np.testing.assert_allclose(tap.key_map.data[i], stap.key_map.data, rtol=1e-12)


def test_multi_head_shapes_and_agreement():
    cfg = AttentionConfig(d_model=8, heads=2)
    q, k = rnd(6, 4, seed=30), rnd(6, 4, seed=31)
    v = rnd(6, 8, seed=32)
    out, tap = efficient_attention(tensor(q), tensor(k), tensor(v), cfg=cfg)
    assert out.shape == (6, 8)
    assert tap.key_map.shape == (6, 4)
    # Per-head softmax normalizes each head's column slice.
    np.testing.assert_allclose(tap.key_map.data.sum(axis=0), np.ones(4), atol=1e-9)
    # Manual per-head computation.
    for h, (sl_k, sl_v) in enumerate(((slice(0, 2), slice(0, 4)), (slice(2, 4), slice(4, 8)))):
        single, _ = efficient_attention(tensor(q[:, sl_k]), tensor(k[:, sl_k]), tensor(v[:, sl_v]))
        np.testing.assert_allclose(out.data[:, sl_v], single.data, rtol=1e-12)


def test_attention_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        standard_attention(tensor(rnd(4, 3)), tensor(rnd(4, 2)), tensor(rnd(4, 5)))
    with pytest.raises(ShapeMismatch):
        efficient_attention(tensor(rnd(4, 3)), tensor(rnd(5, 3)), tensor(rnd(4, 5)))


# ---------------------------------------------------------------------------
# make_qkv


def test_make_qkv_identity_projection():
    x = rnd(5, 4, seed=33)
    eye = tensor(np.eye(4))
    q, k, v = make_qkv(tensor(x), eye, eye, eye)
    for t in (q, k, v):
        np.testing.assert_array_equal(t.data, x)


def test_make_qkv_zero_projection():
    x = rnd(5, 4, seed=34)
    zero = tensor(np.zeros((4, 2)))
    q, k, v = make_qkv(tensor(x), zero, zero, zero)
    for t in (q, k, v):
        assert not t.data.any()


def test_make_qkv_attention_grad():
    x = rnd(6, 4, seed=35)
    wq, wk = rnd(4, 2, seed=36), rnd(4, 2, seed=37)
    wv = rnd(4, 4, seed=38)
    r = rnd(6, 4, seed=39)

    def f(tx, twq, twk, twv):
        out, _ = efficient_attention(*make_qkv(tx, twq, twk, twv))
        return reduce_sum(mul(out, tensor(r)))

    assert grad_check(f, [x, wq, wk, wv]) < 1e-4


# ---------------------------------------------------------------------------
# allocation behavior


def test_efficient_path_never_materializes_n_squared():
    n, d = 2048, 16
    cfg = AttentionConfig(d_model=d)
    q, k = tensor(rnd(n, cfg.d_k, seed=40)), tensor(rnd(n, cfg.d_k, seed=41))
    v = tensor(rnd(n, cfg.d_v, seed=42))
    with track_allocations() as eff:
        efficient_attention(q, k, v)
    n_sq = n * n * 8
    assert eff.peak_block_bytes < n_sq
    # Budget: a handful of [n, d] buffers plus the d_k x d_v context.
    assert eff.total_bytes <= 64 * (n * d + d * d) * 8
    with track_allocations() as std:
        standard_attention(q, k, v)
    assert std.peak_block_bytes >= n_sq
