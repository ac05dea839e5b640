"""Dataset ingestion, synthetic lesion generation, and contour overlays.

Only binary NetPBM rasters are handled (P6 images, P5 masks, maxval 255);
pairs follow the <id>.ppm / <id>_mask.pgm convention and load in
lexicographic id order. Images are resized bilinearly, masks with nearest
neighbor and then binarized at 128 so they stay strictly {0, 1}.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, tensor


class MissingMask(FileNotFoundError):
    """An image file has no matching <id>_mask.pgm."""


class MalformedPnm(ValueError):
    """Bad NetPBM magic, extents, maxval, or truncated raster."""


class ExtentMismatch(ValueError):
    """Image and mask extents disagree."""


class InvalidSpec(ValueError):
    """Synthetic dataset specification is out of range."""


@dataclass
class Sample:
    """One image/mask pair; image in [0, 1], mask strictly {0, 1}."""

    image: Tensor  # [3, H, W]
    mask: Tensor  # [1, H, W]
    id: str


# ---------------------------------------------------------------------------
# NetPBM


def _read_pnm_tokens(blob: bytes, path, count: int) -> tuple[list[int], int]:
    """Parse `count` whitespace/comment-separated header ints after the magic."""
    tokens: list[int] = []
    pos = 2
    while len(tokens) < count:
        if pos >= len(blob):
            raise MalformedPnm(f"{path}: truncated header")
        ch = blob[pos : pos + 1]
        if ch == b"#":
            nl = blob.find(b"\n", pos)
            if nl < 0:
                raise MalformedPnm(f"{path}: unterminated comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end : end + 1].isspace():
                end += 1
            try:
                tokens.append(int(blob[pos:end]))
            except ValueError:
                raise MalformedPnm(f"{path}: bad header token {blob[pos:end]!r}") from None
            pos = end
    return tokens, pos + 1  # single whitespace byte ends the header


def read_pnm(path) -> np.ndarray:
    """Read P5 -> uint8 [H, W] or P6 -> uint8 [H, W, 3]."""
    blob = Path(path).read_bytes()
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise MalformedPnm(f"{path}: bad magic {magic!r}")
    (width, height, maxval), data_start = _read_pnm_tokens(blob, path, 3)
    if width <= 0 or height <= 0:
        raise MalformedPnm(f"{path}: bad extents {width}x{height}")
    if maxval != 255:
        raise MalformedPnm(f"{path}: unsupported maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    raster = blob[data_start : data_start + need]
    if len(raster) != need:
        raise MalformedPnm(f"{path}: raster has {len(raster)} bytes, expected {need}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, 3).copy()


def write_pnm(path, arr: np.ndarray) -> None:
    """Write uint8 [H, W] as P5 or [H, W, 3] as P6 (maxval 255)."""
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if arr.ndim == 2:
        magic = b"P5"
        h, w = arr.shape
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
        h, w = arr.shape[:2]
    else:
        raise ValueError(f"write_pnm: unsupported shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# resizing (half-pixel centers)


def resize_bilinear(arr: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of [H, W] or [H, W, C] float data."""
    src_h, src_w = arr.shape[:2]
    dst_h, dst_w = hw
    if (src_h, src_w) == (dst_h, dst_w):
        return arr.astype(np.float64, copy=True)
    ys = (np.arange(dst_h) + 0.5) * (src_h / dst_h) - 0.5
    xs = (np.arange(dst_w) + 0.5) * (src_w / dst_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, src_h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, src_w - 1).astype(int)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    a = arr.astype(np.float64)
    if a.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bottom = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def resize_nearest(arr: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resample (masks stay binary)."""
    src_h, src_w = arr.shape[:2]
    dst_h, dst_w = hw
    ys = np.clip(((np.arange(dst_h) + 0.5) * (src_h / dst_h)).astype(int), 0, src_h - 1)
    xs = np.clip(((np.arange(dst_w) + 0.5) * (src_w / dst_w)).astype(int), 0, src_w - 1)
    return arr[ys][:, xs].copy()


# ---------------------------------------------------------------------------
# dataset loading


def load_dataset(directory, hw: tuple[int, int]) -> list[Sample]:
    """Load every <id>.ppm / <id>_mask.pgm pair under ``directory``.

    Images are scaled to [0, 1] after bilinear resizing; masks are
    nearest-resized and binarized at 128. Pairs are ordered by id.
    """
    directory = Path(directory)
    samples = []
    for img_path in sorted(directory.glob("*.ppm")):
        sample_id = img_path.stem
        mask_path = directory / f"{sample_id}_mask.pgm"
        if not mask_path.exists():
            raise MissingMask(f"{img_path}: no mask at {mask_path}")
        img = read_pnm(img_path)
        if img.ndim != 3:
            raise MalformedPnm(f"{img_path}: expected a P6 color image")
        mask = read_pnm(mask_path)
        if mask.ndim != 2:
            raise MalformedPnm(f"{mask_path}: expected a P5 grayscale mask")
        if img.shape[:2] != mask.shape:
            raise ExtentMismatch(f"{sample_id}: image {img.shape[:2]} vs mask {mask.shape}")
        image = resize_bilinear(img, hw) / 255.0
        binary = (resize_nearest(mask, hw) >= 128).astype(np.float64)
        samples.append(
            Sample(
                image=tensor(image.transpose(2, 0, 1)),
                mask=tensor(binary[None]),
                id=sample_id,
            )
        )
    return samples


def save_sample(directory, sample: Sample) -> None:
    """Write a sample back as its <id>.ppm / <id>_mask.pgm pair."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.rint(sample.image.data.transpose(1, 2, 0) * 255.0), 0, 255)
    write_pnm(directory / f"{sample.id}.ppm", img)
    write_pnm(directory / f"{sample.id}_mask.pgm", sample.mask.data[0] * 255.0)


# ---------------------------------------------------------------------------
# synthetic lesions


@dataclass
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    theta: float


@dataclass
class SynthSpec:
    """Desk-scale stand-in for a dermoscopy set: tinted ellipses on texture."""

    count: int
    hw: tuple[int, int] = (64, 64)
    ellipse_range: tuple[int, int] = (1, 3)
    mask_frac: tuple[float, float] = (0.05, 0.60)
    tint: float = 0.25
    noise: float = 0.02
    texture: float = 0.06
    seed: int = 0

    def __post_init__(self):
        h, w = self.hw
        if self.count < 0:
            raise InvalidSpec(f"count {self.count} must be nonnegative")
        if h % 32 or w % 32 or h <= 0 or w <= 0:
            raise InvalidSpec(f"hw {self.hw} must be positive multiples of 32")
        lo, hi = self.ellipse_range
        if lo < 1 or hi < lo:
            raise InvalidSpec(f"ellipse_range {self.ellipse_range} invalid")
        flo, fhi = self.mask_frac
        if not 0.0 < flo < fhi < 1.0:
            raise InvalidSpec(f"mask_frac {self.mask_frac} invalid")


@dataclass
class SampleRecipe:
    """Everything the generator drew for one sample; the oracle re-renders
    the mask from ``ellipses`` alone."""

    ellipses: list
    base_color: np.ndarray
    texture_field: np.ndarray
    tint_scale: float
    noise_seed: int


def rasterize_ellipses(ellipses: Sequence[Ellipse], hw: tuple[int, int]) -> np.ndarray:
    """Union of filled rotated ellipses as a {0, 1} float [H, W] raster."""
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    for e in ellipses:
        dy = yy - e.cy
        dx = xx - e.cx
        cos_t, sin_t = np.cos(e.theta), np.sin(e.theta)
        u = dx * cos_t + dy * sin_t
        v = -dx * sin_t + dy * cos_t
        mask |= (u / e.rx) ** 2 + (v / e.ry) ** 2 <= 1.0
    return mask.astype(np.float64)


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:synth:{index}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def sample_recipe(spec: SynthSpec, index: int) -> SampleRecipe:
    """Deterministically draw one sample's parameters (pure in (spec, index))."""
    rng = _sample_rng(spec.seed, index)
    h, w = spec.hw
    base = 0.30 + 0.15 * rng.random() + 0.04 * rng.random(3)
    coarse = rng.normal(0.0, 1.0, size=(8, 8))
    texture_field = spec.texture * resize_bilinear(coarse, spec.hw)
    tint_scale = 0.8 + 0.4 * rng.random()
    lo, hi = spec.mask_frac
    ellipses: list[Ellipse] = []
    for _ in range(64):
        count = int(rng.integers(spec.ellipse_range[0], spec.ellipse_range[1] + 1))
        candidate = [
            Ellipse(
                cy=(0.25 + 0.5 * rng.random()) * h,
                cx=(0.25 + 0.5 * rng.random()) * w,
                ry=(0.10 + 0.18 * rng.random()) * h,
                rx=(0.10 + 0.18 * rng.random()) * w,
                theta=rng.random() * np.pi,
            )
            for _ in range(count)
        ]
        frac = rasterize_ellipses(candidate, spec.hw).mean()
        if lo <= frac <= hi:
            ellipses = candidate
            break
    if not ellipses:
        # In-band by construction: a centered axis-aligned ellipse covers pi/16.
        ellipses = [Ellipse(cy=h / 2, cx=w / 2, ry=0.25 * h, rx=0.25 * w, theta=0.0)]
    noise_seed = int(rng.integers(0, 2**31))
    return SampleRecipe(
        ellipses=ellipses,
        base_color=base,
        texture_field=texture_field,
        tint_scale=tint_scale,
        noise_seed=noise_seed,
    )


# Lesions read reddish-brown against the grayish background.
_TINT_RGB = np.array([1.0, 0.45, 0.25])


def render_sample(spec: SynthSpec, index: int) -> Sample:
    recipe = sample_recipe(spec, index)
    h, w = spec.hw
    mask = rasterize_ellipses(recipe.ellipses, spec.hw)
    image = recipe.base_color[:, None, None] + recipe.texture_field[None]
    tint = spec.tint * recipe.tint_scale * _TINT_RGB
    image = image + tint[:, None, None] * mask[None]
    noise_rng = np.random.default_rng(recipe.noise_seed)
    image = image + noise_rng.normal(0.0, spec.noise, size=(3, h, w))
    image = np.clip(image, 0.0, 1.0)
    return Sample(image=tensor(image), mask=tensor(mask[None]), id=f"synth{index:05d}")


def synth_dataset(spec: SynthSpec) -> list[Sample]:
    """Fully seed-determined list of synthetic samples."""
    return [render_sample(spec, i) for i in range(spec.count)]


# ---------------------------------------------------------------------------
# overlays


def mask_contour(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbor of opposite value.

    Out-of-image neighbors count as background, so positives on the border
    are contour pixels.
    """
    m = np.asarray(mask) > 0.5
    p = np.pad(m, 1)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def overlay_contours(image: np.ndarray, gt_mask: np.ndarray, pred_mask: np.ndarray, path) -> None:
    """Paint the truth contour green, then the prediction contour blue
    (blue wins on overlap), and write a P6 file.

    ``image`` is [3, H, W] in [0, 1]; masks are [H, W] binary.
    """
    img = np.asarray(image)
    gt = np.asarray(gt_mask)
    pred = np.asarray(pred_mask)
    if img.shape[1:] != gt.shape or gt.shape != pred.shape:
        raise ExtentMismatch(f"overlay: image {img.shape} vs masks {gt.shape}/{pred.shape}")
    canvas = np.clip(np.rint(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    canvas[mask_contour(gt)] = (0, 255, 0)
    canvas[mask_contour(pred)] = (0, 0, 255)
    write_pnm(path, canvas)
