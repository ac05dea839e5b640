"""Model assembly: determinism, shapes, identity start, checkpoints."""

import dataclasses

import numpy as np
import pytest

from iscfnet.autodiff import ShapeMismatch, Tape, backward, tensor
from iscfnet.model import (
    FormatError,
    InvalidConfig,
    ModelConfig,
    ModelParams,
    build,
    forward,
    iscf_overhead,
    load_checkpoint,
    param_count,
    param_specs,
    save_checkpoint,
)

TINY = ModelConfig(input_hw=(32, 32), base_width=8, seed=7)


def rnd(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# ---------------------------------------------------------------------------
# config and build


def test_invalid_configs_rejected():
    with pytest.raises(InvalidConfig):
        ModelConfig(input_hw=(48, 48))
    with pytest.raises(InvalidConfig):
        ModelConfig(base_width=7)
    with pytest.raises(InvalidConfig):
        ModelConfig(iscf_stages=(0, 1))
    with pytest.raises(InvalidConfig):
        ModelConfig(blocks_per_stage=0)


def test_build_is_seed_deterministic():
    a, b = build(TINY), build(TINY)
    assert a.names() == b.names()
    for name in a.names():
        assert np.array_equal(a[name].value.data, b[name].value.data), name


def test_build_differs_across_seeds():
    a = build(TINY)
    b = build(dataclasses.replace(TINY, seed=8))
    assert any(
        not np.array_equal(a[n].value.data, b[n].value.data)
        for n in a.names()
        if a[n].value.data.any()
    )


def test_iscf_on_has_more_params_and_matches_closed_form():
    on = build(TINY)
    off = build(dataclasses.replace(TINY, iscf_stages=()))
    assert param_count(on) > param_count(off)
    assert param_count(on) - param_count(off) == iscf_overhead(TINY)


def test_param_count_examples():
    store = ModelParams()
    assert param_count(store) == 0
    store.add("w", np.zeros((3, 4)))
    store.add("b", np.zeros(4))
    assert param_count(store) == 16


def test_desk_param_count_matches_spec_table():
    cfg = ModelConfig(input_hw=(64, 64), base_width=16, seed=0)
    store = build(cfg)
    expected = sum(int(np.prod(shape)) for _, shape in param_specs(cfg).values())
    assert param_count(store) == expected


def test_duplicate_parameter_rejected():
    store = ModelParams()
    store.add("w", np.zeros(3))
    with pytest.raises(ValueError):
        store.add("w", np.zeros(3))


def test_init_is_insertion_order_independent():
    # Values derive from (seed, name): shared names agree across configs.
    on = build(TINY)
    off = build(dataclasses.replace(TINY, iscf_stages=()))
    for name in off.names():
        assert np.array_equal(on[name].value.data, off[name].value.data), name


def test_trunc_normal_is_bounded():
    params = build(TINY)
    w = params["embed.conv.weight"].value.data
    assert np.abs(w).max() <= 2 * 0.02 + 1e-12
    assert w.std() > 0.005


# ---------------------------------------------------------------------------
# forward


def test_forward_shapes_desk():
    cfg = ModelConfig(input_hw=(64, 64), base_width=16, seed=1)
    params = build(cfg)
    art = forward(tensor(np.random.default_rng(0).random((2, 3, 64, 64))), params.tensors(), cfg)
    assert art.logits.shape == (2, 1, 64, 64)
    assert art.stage_token_counts == (256, 64, 16)
    assert art.bottleneck_tokens == 4
    for skip, post in zip(art.skips_pre, art.skips_post):
        assert skip.shape == post.shape


def test_forward_is_deterministic():
    params = build(TINY)
    img = tensor(np.random.default_rng(1).random((1, 3, 32, 32)))
    a = forward(img, params.tensors(), TINY).logits.data
    b = forward(img, params.tensors(), TINY).logits.data
    assert np.array_equal(a, b)


def test_forward_rejects_wrong_extent():
    params = build(TINY)
    with pytest.raises(ShapeMismatch):
        forward(tensor(np.zeros((1, 3, 64, 64))), params.tensors(), TINY)


def test_identity_start_iscf_on_equals_off():
    cfg_on = dataclasses.replace(TINY, iscf_stages=(1, 2, 3))
    cfg_off = dataclasses.replace(TINY, iscf_stages=())
    p_on, p_off = build(cfg_on), build(cfg_off)
    rng = np.random.default_rng(2)
    for _ in range(3):
        img = tensor(rng.random((1, 3, 32, 32)))
        on = forward(img, p_on.tensors(), cfg_on).logits.data
        off = forward(img, p_off.tensors(), cfg_off).logits.data
        assert np.array_equal(on, off)


def test_every_parameter_reaches_the_loss():
    # Connectivity check: with all parameters perturbed off their init
    # (the fusion conv starts at zero and gates its upstream), every
    # trainable tensor must collect a nonzero gradient. Needs a bottleneck
    # of more than one token: a single-token key softmax is constant, which
    # makes that block's key projection legitimately gradient-free.
    from iscfnet.autodiff import bce_with_logits

    cfg = ModelConfig(input_hw=(64, 64), base_width=8, seed=7)
    params = build(cfg)
    rng = np.random.default_rng(3)
    for name in params.names():
        jitter = rng.normal(0.0, 0.05, size=params[name].value.shape)
        params.set_value(name, params[name].value.data + jitter)
    img = tensor(rng.random((2, 3, 64, 64)))
    target = tensor((rng.random((2, 1, 64, 64)) > 0.5).astype(float))
    with Tape() as tape:
        tracked = params.watched(tape)
        art = forward(img, tracked, cfg)
        grads = backward(bce_with_logits(art.logits, target))
    dead = [n for n, t in tracked.items() if not np.any(grads.wrt(t))]
    assert dead == []


# ---------------------------------------------------------------------------
# checkpointing


def test_checkpoint_round_trip_bitwise(tmp_path):
    params = build(TINY)
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_checkpoint(params, TINY, first)
    loaded, cfg = load_checkpoint(first)
    assert cfg == TINY
    save_checkpoint(loaded, cfg, second)
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_truncated_raises(tmp_path):
    path = tmp_path / "trunc.ckpt"
    save_checkpoint(build(TINY), TINY, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 50])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    save_checkpoint(build(TINY), TINY, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_header_garbage(tmp_path):
    path = tmp_path / "garbage.ckpt"
    path.write_bytes(b"ISCF" + b"\x01\x00\x00\x00" + (10).to_bytes(8, "little") + b"not json!!")
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_config_mismatch_names_parameter(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build(TINY), TINY, path)
    other = dataclasses.replace(TINY, base_width=16)
    with pytest.raises(ShapeMismatch) as exc:
        load_checkpoint(path, expect_cfg=other)
    assert "embed.conv.weight" in str(exc.value)


def test_checkpoint_values_are_float32_exact(tmp_path):
    params = build(TINY)
    path = tmp_path / "f32.ckpt"
    save_checkpoint(params, TINY, path)
    loaded, _ = load_checkpoint(path)
    for name in params.names():
        original = params[name].value.data.astype(np.float32)
        assert np.array_equal(loaded[name].value.data, original.astype(np.float64))
