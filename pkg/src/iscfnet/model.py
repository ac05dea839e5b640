"""Full U-shaped network: encoder, bottleneck, decoder, fusion, head.

Parameter initialization is derived per name from (seed, name), so two
configs sharing a parameter name produce bit-identical values for it
regardless of what else differs; enabling the fusion module never perturbs
the backbone's initialization.

Checkpoint format: magic "ISCF", little-endian u32 version (1), u64 header
length, a JSON header {config, params: [{name, shape, offset, trainable}]},
then float32 little-endian payloads in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Optional

import numpy as np

from . import blocks
from .attention import AttentionTap
from .autodiff import Parameter, ShapeMismatch, Tape, Tensor, concat, linear, reshape
from .blocks import StageConfig
from .iscf import ScaleMapSet, iscf_forward, iscf_param_count, iscf_specs

CHECKPOINT_MAGIC = b"ISCF"
CHECKPOINT_VERSION = 1

INIT_STD = 0.02


class InvalidConfig(ValueError):
    """Model configuration violates an architectural constraint."""


class FormatError(ValueError):
    """Checkpoint bytes do not match the expected layout."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters; stage widths follow [d1, 2*d1, 4*d1]."""

    input_hw: tuple[int, int] = (64, 64)
    base_width: int = 16
    blocks_per_stage: int = 2
    iscf_stages: tuple[int, ...] = (1, 2, 3)
    ffn_expansion: int = 4
    heads: int = 1
    seed: int = 0
    pre_norm: bool = False
    embed_norm: bool = True

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.iscf_stages = tuple(sorted(int(s) for s in set(self.iscf_stages)))
        self.validate()

    def validate(self) -> None:
        h, w = self.input_hw
        if h % 32 or w % 32 or h <= 0 or w <= 0:
            raise InvalidConfig(f"input extents {self.input_hw} must be positive multiples of 32")
        if self.base_width < 2 or self.base_width % 2:
            raise InvalidConfig(f"base width {self.base_width} must be a positive even number")
        if self.blocks_per_stage < 1:
            raise InvalidConfig("blocks_per_stage must be >= 1")
        if any(s not in (1, 2, 3) for s in self.iscf_stages):
            raise InvalidConfig(f"iscf_stages {self.iscf_stages} must be a subset of {{1, 2, 3}}")
        if self.ffn_expansion < 1:
            raise InvalidConfig("ffn_expansion must be >= 1")
        if self.heads < 1 or (self.base_width // 2) % self.heads:
            raise InvalidConfig(f"heads {self.heads} must divide every stage's key dim")

    @property
    def stage_widths(self) -> tuple[int, int, int]:
        d1 = self.base_width
        return (d1, 2 * d1, 4 * d1)

    @property
    def bottleneck_width(self) -> int:
        return 8 * self.base_width

    def stage_grids(self) -> tuple[tuple[int, int], ...]:
        """Token grids for stages 1..3 and the bottleneck."""
        h, w = self.input_hw
        return tuple((h // f, w // f) for f in (4, 8, 16, 32))

    def stage_geometry(self) -> tuple[tuple[int, int, int], ...]:
        """(tokens, key_dim, width) per encoder stage."""
        grids = self.stage_grids()
        return tuple(
            (grids[i][0] * grids[i][1], self.stage_widths[i] // 2, self.stage_widths[i])
            for i in range(3)
        )


@dataclass
class ForwardArtifacts:
    """Outputs plus the introspection surface of one forward pass."""

    logits: Tensor
    taps: ScaleMapSet
    skips_pre: tuple[Tensor, Tensor, Tensor]
    skips_post: tuple[Tensor, Tensor, Tensor]
    bottleneck_tokens: int

    @property
    def stage_token_counts(self) -> tuple[int, int, int]:
        return tuple(t.token_count for t in self.taps.maps)


class ModelParams:
    """Ordered, uniquely named parameter store."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = Parameter(name, Tensor(value), trainable)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    @property
    def total_count(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def tensors(self) -> dict[str, Tensor]:
        return {name: p.value for name, p in self._params.items()}

    def watched(self, tape: Tape) -> dict[str, Tensor]:
        """Tape-tracked aliases for every trainable parameter."""
        return {
            name: tape.watch(p.value) if p.trainable else p.value
            for name, p in self._params.items()
        }

    def set_value(self, name: str, value: np.ndarray) -> None:
        old = self._params[name]
        if tuple(value.shape) != old.value.shape:
            raise ShapeMismatch(f"parameter {name}: {value.shape} != {old.value.shape}")
        self._params[name] = Parameter(name, Tensor(value), old.trainable)


def param_count(params: ModelParams) -> int:
    """Exact element count over the store."""
    return params.total_count


# ---------------------------------------------------------------------------
# parameter enumeration and initialization


def param_specs(cfg: ModelConfig) -> dict[str, tuple[str, tuple]]:
    """Every parameter's (init kind, shape), in deterministic build order."""
    d1 = cfg.base_width
    widths = cfg.stage_widths
    grids = cfg.stage_grids()
    specs: dict[str, tuple[str, tuple]] = {}
    specs.update(blocks.patch_embed_specs(d1, "embed", norm=cfg.embed_norm))
    for s in (1, 2, 3):
        scfg = _stage_cfg(cfg, widths[s - 1], grids[s - 1], s)
        for i in range(cfg.blocks_per_stage):
            specs.update(blocks.transformer_block_specs(scfg, f"enc{s}.block{i}"))
        specs.update(blocks.patch_merge_specs(widths[s - 1], f"enc{s}.merge"))
    mid_cfg = _stage_cfg(cfg, cfg.bottleneck_width, grids[3], 0)
    for i in range(cfg.blocks_per_stage):
        specs.update(blocks.transformer_block_specs(mid_cfg, f"mid.block{i}"))
    specs.update(iscf_specs(cfg.stage_geometry(), cfg.iscf_stages))
    width = cfg.bottleneck_width
    for s in (3, 2, 1):
        specs.update(blocks.patch_expand_specs(width, f"dec{s}.up"))
        width //= 2
        specs[f"dec{s}.fuse.weight"] = ("trunc", (2 * width, width))
        specs[f"dec{s}.fuse.bias"] = ("zeros", (width,))
        scfg = _stage_cfg(cfg, width, grids[s - 1], s)
        for i in range(cfg.blocks_per_stage):
            specs.update(blocks.transformer_block_specs(scfg, f"dec{s}.block{i}"))
    specs.update(blocks.final_expand4_specs(d1, "final"))
    specs["head.weight"] = ("trunc", (d1, 1))
    specs["head.bias"] = ("zeros", (1,))
    return specs


def _stage_cfg(cfg: ModelConfig, width: int, grid: tuple[int, int], stage: int) -> StageConfig:
    return StageConfig(
        d_model=width,
        grid=grid,
        blocks_per_stage=cfg.blocks_per_stage,
        ffn_expansion=cfg.ffn_expansion,
        heads=cfg.heads,
        pre_norm=cfg.pre_norm,
        stage=stage,
    )


def _name_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _trunc_normal(rng: np.random.Generator, shape: tuple, std: float) -> np.ndarray:
    vals = rng.standard_normal(size=shape) * std
    bad = np.abs(vals) > 2 * std
    while bad.any():
        vals[bad] = rng.standard_normal(size=int(bad.sum())) * std
        bad = np.abs(vals) > 2 * std
    return vals


def materialize(specs: Mapping[str, tuple[str, tuple]], seed: int) -> ModelParams:
    """Instantiate a spec table with per-name seeded initialization."""
    params = ModelParams()
    for name, (kind, shape) in specs.items():
        if kind == "trunc":
            value = _trunc_normal(_name_rng(seed, name), shape, INIT_STD)
        elif kind == "zeros":
            value = np.zeros(shape)
        elif kind == "ones":
            value = np.ones(shape)
        else:
            raise ValueError(f"unknown init kind {kind!r} for {name}")
        params.add(name, value)
    return params


def build(cfg: ModelConfig) -> ModelParams:
    """Create the full parameter store; the fusion convolution starts at zero."""
    cfg.validate()
    return materialize(param_specs(cfg), cfg.seed)


def iscf_overhead(cfg: ModelConfig) -> int:
    """Closed-form parameter overhead of the fusion module for this config."""
    return iscf_param_count(cfg.stage_geometry(), cfg.iscf_stages)


# ---------------------------------------------------------------------------
# forward


def forward(img: Tensor, p: Mapping[str, Tensor], cfg: ModelConfig) -> ForwardArtifacts:
    """Run the network; returns logits [b, 1, H, W] plus taps and skips."""
    b, c, h, w = img.shape
    if (h, w) != cfg.input_hw or c != 3:
        raise ShapeMismatch(f"input {img.shape} does not match config {cfg.input_hw}")
    widths = cfg.stage_widths
    x, grid = blocks.patch_embed(img, p, "embed", norm=cfg.embed_norm)
    skips: list[Tensor] = []
    taps: list[AttentionTap] = []
    for s in (1, 2, 3):
        scfg = _stage_cfg(cfg, widths[s - 1], grid, s)
        tap = None
        for i in range(cfg.blocks_per_stage):
            x, tap = blocks.transformer_block(x, grid, scfg, p, f"enc{s}.block{i}")
        skips.append(x)
        taps.append(tap)  # the stage's final block supplies the tap
        x = blocks.patch_merge(x, grid, p, f"enc{s}.merge")
        grid = (grid[0] // 2, grid[1] // 2)
    mid_cfg = _stage_cfg(cfg, cfg.bottleneck_width, grid, 0)
    for i in range(cfg.blocks_per_stage):
        x, _ = blocks.transformer_block(x, grid, mid_cfg, p, f"mid.block{i}")
    bottleneck_tokens = grid[0] * grid[1]

    scale_maps = ScaleMapSet(
        maps=tuple(taps), reference=tuple(taps[2].key_map.shape[-2:])
    )
    enriched = iscf_forward(scale_maps, skips, cfg.iscf_stages, p)

    width = cfg.bottleneck_width
    for s in (3, 2, 1):
        x = blocks.patch_expand(x, grid, p, f"dec{s}.up")
        grid = (grid[0] * 2, grid[1] * 2)
        width //= 2
        x = concat([x, enriched[s - 1]], axis=-1)
        x = linear(x, p[f"dec{s}.fuse.weight"], p[f"dec{s}.fuse.bias"])
        scfg = _stage_cfg(cfg, width, grid, s)
        for i in range(cfg.blocks_per_stage):
            x, _ = blocks.transformer_block(x, grid, scfg, p, f"dec{s}.block{i}")
    x = blocks.final_expand4(x, grid, p, "final")
    x = linear(x, p["head.weight"], p["head.bias"])
    logits = reshape(x, (b, 1, h, w))
    return ForwardArtifacts(
        logits=logits,
        taps=scale_maps,
        skips_pre=tuple(skips),
        skips_post=enriched,
        bottleneck_tokens=bottleneck_tokens,
    )


# ---------------------------------------------------------------------------
# checkpointing


def config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "input_hw": list(cfg.input_hw),
        "base_width": cfg.base_width,
        "blocks_per_stage": cfg.blocks_per_stage,
        "iscf_stages": list(cfg.iscf_stages),
        "ffn_expansion": cfg.ffn_expansion,
        "heads": cfg.heads,
        "seed": cfg.seed,
        "pre_norm": cfg.pre_norm,
        "embed_norm": cfg.embed_norm,
    }


def config_from_dict(d: Mapping) -> ModelConfig:
    try:
        return ModelConfig(
            input_hw=tuple(d["input_hw"]),
            base_width=int(d["base_width"]),
            blocks_per_stage=int(d["blocks_per_stage"]),
            iscf_stages=tuple(d["iscf_stages"]),
            ffn_expansion=int(d["ffn_expansion"]),
            heads=int(d["heads"]),
            seed=int(d["seed"]),
            pre_norm=bool(d["pre_norm"]),
            embed_norm=bool(d["embed_norm"]),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint config incomplete: {exc}") from exc


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path) -> None:
    """Write the store as float32 payloads behind a JSON manifest."""
    manifest = []
    payloads = []
    offset = 0
    for p in params:
        arr = np.ascontiguousarray(p.value.data, dtype="<f4")
        manifest.append(
            {
                "name": p.name,
                "shape": list(p.value.shape),
                "offset": offset,
                "trainable": p.trainable,
            }
        )
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    header = {"config": config_to_dict(cfg), "params": manifest}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for chunk in payloads:
            fh.write(chunk)


def load_checkpoint(path, expect_cfg: Optional[ModelConfig] = None):
    """Read (params, config); raises FormatError on malformed or truncated
    files, ShapeMismatch when the payload disagrees with ``expect_cfg``."""
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise FormatError(f"{path}: too short for a checkpoint header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    if len(blob) < 16 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    if not isinstance(header, dict) or "config" not in header or "params" not in header:
        raise FormatError(f"{path}: header missing config/params")
    cfg = config_from_dict(header["config"])
    payload = blob[16 + header_len :]
    params = ModelParams()
    for entry in header["params"]:
        shape = tuple(int(e) for e in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        offset = int(entry["offset"])
        if offset + 4 * count > len(payload):
            raise FormatError(f"{path}: truncated payload at parameter {entry['name']!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        params.add(entry["name"], arr.astype(np.float64).reshape(shape), bool(entry["trainable"]))
    if expect_cfg is not None:
        _verify_against(params, expect_cfg, path)
    return params, cfg


def _verify_against(params: ModelParams, cfg: ModelConfig, path) -> None:
    expected = param_specs(cfg)
    for name, (_, shape) in expected.items():
        if name not in params:
            raise ShapeMismatch(f"{path}: checkpoint lacks parameter {name!r} required by config")
        found = params[name].value.shape
        if found != tuple(shape):
            raise ShapeMismatch(
                f"{path}: parameter {name!r} has shape {found}, config expects {tuple(shape)}"
            )
    for name in params.names():
        if name not in expected:
            raise ShapeMismatch(f"{path}: checkpoint parameter {name!r} not in config")
