"""NetPBM handling, synthetic generation, and contour overlays."""

import numpy as np
import pytest

from iscfnet.data_io import (
    ExtentMismatch,
    MalformedPnm,
    MissingMask,
    Sample,
    SynthSpec,
    InvalidSpec,
    load_dataset,
    mask_contour,
    overlay_contours,
    rasterize_ellipses,
    read_pnm,
    resize_bilinear,
    resize_nearest,
    sample_recipe,
    save_sample,
    synth_dataset,
    write_pnm,
)


# ---------------------------------------------------------------------------
# NetPBM


def test_pnm_round_trip_gray(tmp_path):
    arr = np.arange(12, dtype=np.uint8).reshape(3, 4)
    path = tmp_path / "g.pgm"
    write_pnm(path, arr)
    assert np.array_equal(read_pnm(path), arr)


def test_pnm_round_trip_color(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 4, 3)
    path = tmp_path / "c.ppm"
    write_pnm(path, arr)
    assert np.array_equal(read_pnm(path), arr)


def test_pnm_comments_in_header(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 2\n# another\n255\n" + bytes([0, 64, 128, 255]))
    assert np.array_equal(read_pnm(path), np.array([[0, 64], [128, 255]], dtype=np.uint8))


def test_pnm_bad_magic(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(MalformedPnm):
        read_pnm(path)


def test_pnm_bad_maxval(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(MalformedPnm):
        read_pnm(path)


def test_pnm_truncated_raster(tmp_path):
    path = tmp_path / "short.pgm"
    path.write_bytes(b"P5\n4 4\n255\n" + bytes(7))
    with pytest.raises(MalformedPnm):
        read_pnm(path)


# ---------------------------------------------------------------------------
# resizing


def test_resize_bilinear_identity():
    arr = np.random.default_rng(0).random((5, 7))
    assert np.array_equal(resize_bilinear(arr, (5, 7)), arr)


def test_resize_bilinear_constant_preserved():
    out = resize_bilinear(np.full((10, 10), 3.25), (4, 6))
    np.testing.assert_allclose(out, 3.25)


def test_resize_extents_from_isic_geometry():
    arr = np.zeros((576, 767, 3))
    assert resize_bilinear(arr, (224, 224)).shape == (224, 224, 3)


def test_resize_nearest_stays_binary():
    rng = np.random.default_rng(1)
    mask = (rng.random((50, 70)) > 0.5).astype(np.uint8) * 255
    out = resize_nearest(mask, (32, 32))
    assert set(np.unique(out)) <= {0, 255}


# ---------------------------------------------------------------------------
# dataset loading


def test_load_empty_directory(tmp_path):
    assert load_dataset(tmp_path, (32, 32)) == []


def test_load_missing_mask(tmp_path):
    write_pnm(tmp_path / "a.ppm", np.zeros((4, 4, 3), dtype=np.uint8))
    with pytest.raises(MissingMask):
        load_dataset(tmp_path, (32, 32))


def test_mask_binarized_at_128(tmp_path):
    write_pnm(tmp_path / "a.ppm", np.zeros((2, 2, 3), dtype=np.uint8))
    write_pnm(tmp_path / "a_mask.pgm", np.array([[0, 127], [128, 255]], dtype=np.uint8))
    (sample,) = load_dataset(tmp_path, (2, 2))
    # hw == source extents: nearest resize is the identity here
    np.testing.assert_array_equal(sample.mask.data[0], [[0.0, 0.0], [1.0, 1.0]])
    assert set(np.unique(sample.mask.data)) <= {0.0, 1.0}


def test_load_extent_mismatch(tmp_path):
    write_pnm(tmp_path / "a.ppm", np.zeros((4, 4, 3), dtype=np.uint8))
    write_pnm(tmp_path / "a_mask.pgm", np.zeros((5, 4), dtype=np.uint8))
    with pytest.raises(ExtentMismatch):
        load_dataset(tmp_path, (4, 4))


def test_load_orders_lexicographically(tmp_path):
    for name in ("b", "a", "c"):
        write_pnm(tmp_path / f"{name}.ppm", np.zeros((4, 4, 3), dtype=np.uint8))
        write_pnm(tmp_path / f"{name}_mask.pgm", np.zeros((4, 4), dtype=np.uint8))
    samples = load_dataset(tmp_path, (32, 32))
    assert [s.id for s in samples] == ["a", "b", "c"]


def test_save_load_round_trip(tmp_path):
    spec = SynthSpec(count=1, hw=(32, 32), seed=3)
    (sample,) = synth_dataset(spec)
    save_sample(tmp_path, sample)
    (loaded,) = load_dataset(tmp_path, (32, 32))
    assert np.array_equal(loaded.mask.data, sample.mask.data)
    assert np.max(np.abs(loaded.image.data - sample.image.data)) <= 1.0 / 255.0 + 1e-12


# ---------------------------------------------------------------------------
# synthetic generation


def test_synth_deterministic():
    spec = SynthSpec(count=3, hw=(32, 32), seed=9)
    a = synth_dataset(spec)
    b = synth_dataset(spec)
    for s, t in zip(a, b):
        assert s.id == t.id
        assert np.array_equal(s.image.data, t.image.data)
        assert np.array_equal(s.mask.data, t.mask.data)


def test_synth_mask_fraction_band():
    spec = SynthSpec(count=25, hw=(64, 64), seed=10)
    for s in synth_dataset(spec):
        frac = s.mask.data.mean()
        assert spec.mask_frac[0] <= frac <= spec.mask_frac[1], s.id


def test_synth_masks_re_rasterize_from_recipe():
    spec = SynthSpec(count=10, hw=(64, 64), seed=11)
    samples = synth_dataset(spec)
    for i, s in enumerate(samples):
        recipe = sample_recipe(spec, i)
        oracle = rasterize_ellipses(recipe.ellipses, spec.hw)
        assert np.array_equal(s.mask.data[0], oracle), s.id


def test_synth_values_in_range():
    for s in synth_dataset(SynthSpec(count=5, hw=(32, 32), seed=12)):
        assert s.image.data.min() >= 0.0 and s.image.data.max() <= 1.0
        assert set(np.unique(s.mask.data)) <= {0.0, 1.0}


def test_synth_invalid_spec():
    with pytest.raises(InvalidSpec):
        SynthSpec(count=2, hw=(40, 40))
    with pytest.raises(InvalidSpec):
        SynthSpec(count=2, mask_frac=(0.5, 0.1))


# ---------------------------------------------------------------------------
# contours and overlays


def test_contour_of_interior_block_is_whole_block():
    mask = np.zeros((4, 4))
    mask[1:3, 1:3] = 1.0
    contour = mask_contour(mask)
    assert np.array_equal(contour, mask.astype(bool))


def test_contour_excludes_interior_pixels():
    mask = np.zeros((6, 6))
    mask[1:5, 1:5] = 1.0
    contour = mask_contour(mask)
    assert not contour[2:4, 2:4].any()
    assert contour.sum() == 12


def test_contour_counts_border_as_background():
    mask = np.ones((3, 3))
    contour = mask_contour(mask)
    assert contour.sum() == 8  # edge ring: out-of-image neighbors are background
    assert not contour[1, 1]


def test_overlay_empty_masks_returns_input(tmp_path):
    rng = np.random.default_rng(13)
    image = rng.random((3, 8, 8))
    path = tmp_path / "o.ppm"
    overlay_contours(image, np.zeros((8, 8)), np.zeros((8, 8)), path)
    expected = np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    assert np.array_equal(read_pnm(path), expected)


def test_overlay_prediction_paints_over_truth(tmp_path):
    image = np.zeros((3, 4, 4))
    mask = np.zeros((4, 4))
    mask[1:3, 1:3] = 1.0
    path = tmp_path / "o.ppm"
    overlay_contours(image, mask, mask, path)
    out = read_pnm(path)
    contour = mask_contour(mask)
    assert np.array_equal(out[contour], np.tile([0, 0, 255], (4, 1)))  # blue wins
    assert not (out == [0, 255, 0]).all(axis=-1).any()  # no green left


def test_overlay_distinct_contours(tmp_path):
    image = np.zeros((3, 6, 6))
    gt = np.zeros((6, 6))
    gt[1:3, 1:3] = 1.0
    pred = np.zeros((6, 6))
    pred[3:5, 3:5] = 1.0
    path = tmp_path / "o.ppm"
    overlay_contours(image, gt, pred, path)
    out = read_pnm(path)
    assert (out == [0, 255, 0]).all(axis=-1).sum() == 4
    assert (out == [0, 0, 255]).all(axis=-1).sum() == 4


def test_overlay_extent_mismatch(tmp_path):
    with pytest.raises(ExtentMismatch):
        overlay_contours(np.zeros((3, 4, 4)), np.zeros((5, 5)), np.zeros((4, 4)), tmp_path / "x.ppm")
