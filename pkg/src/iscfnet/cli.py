"""Command-line entry point.

Subcommands: train, eval, infer, gradcheck, bench-attn, ablate, synth-data.
Every command echoes its effective configuration to stdout, and commands
with an output directory save it there as effective-config.json. Report
paths write a matplotlib figure beside each delimited output.

Exit codes: 0 success, 1 configuration error, 2 data/checkpoint error,
3 non-finite training loss, 4 gradient-check threshold breach.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bench, data_io, pipeline, reports, verify
from .autodiff import ShapeMismatch
from .data_io import (
    ExtentMismatch,
    InvalidSpec,
    MalformedPnm,
    MissingMask,
    SynthSpec,
    load_dataset,
    overlay_contours,
    read_pnm,
    resize_bilinear,
    save_sample,
    synth_dataset,
    write_pnm,
)
from .model import (
    FormatError,
    InvalidConfig,
    ModelConfig,
    load_checkpoint,
    iscf_overhead,
    param_count,
)
from .pipeline import NonFiniteLoss, TrainConfig

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NONFINITE = 3
EXIT_GRADCHECK = 4

DATA_ERRORS = (
    MissingMask,
    MalformedPnm,
    ExtentMismatch,
    InvalidSpec,
    FormatError,
    ShapeMismatch,
    FileNotFoundError,
    NotADirectoryError,
)

# Published full-scale ISIC-2018 context for the ablation harness; reported
# beside desk-scale rows, never asserted (stage widths are unpublished).
REFERENCE_ABLATION_TREND = (("1", 0.9025), ("12", 0.9065), ("123", 0.9136))
REFERENCE_PARAM_COUNTS_M = {"without_fusion": 22.31, "with_fusion": 23.43}


class ConfigError(ValueError):
    """Bad config file or flag combination."""


@dataclass
class RunConfig:
    """Merged model/train/synthetic-data configuration with defaults.

    JSON config files may set any of these fields; unknown keys are
    rejected. Command-line flags override file values.
    """

    input_hw: tuple[int, int] = (64, 64)
    base_width: int = 16
    blocks_per_stage: int = 2
    ffn_expansion: int = 4
    heads: int = 1
    iscf_stages: tuple[int, ...] = (1, 2, 3)
    pre_norm: bool = False
    embed_norm: bool = True
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    threshold: float = 0.5
    val_fraction: float = 0.2
    checkpoint_every: int = 0
    synth_count: int = 250
    synth_ellipses: tuple[int, int] = (1, 3)
    synth_mask_frac: tuple[float, float] = (0.05, 0.60)
    synth_tint: float = 0.25
    synth_noise: float = 0.02
    synth_texture: float = 0.06

    @classmethod
    def from_sources(cls, config_path: Optional[str], overrides: dict) -> "RunConfig":
        values: dict = {}
        if config_path is not None:
            path = Path(config_path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            try:
                loaded = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: top level must be an object")
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = sorted(set(loaded) - known)
            if unknown:
                raise ConfigError(f"{path}: unknown config keys {unknown}")
            values.update(loaded)
        values.update({k: v for k, v in overrides.items() if v is not None})
        values = _normalize_values(values)
        try:
            cfg = cls(**values)
            cfg.model_config()  # validate eagerly
            cfg.train_config()
            cfg.synth_spec()
        except (InvalidConfig, InvalidSpec, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_hw=self.input_hw,
            base_width=self.base_width,
            blocks_per_stage=self.blocks_per_stage,
            iscf_stages=self.iscf_stages,
            ffn_expansion=self.ffn_expansion,
            heads=self.heads,
            seed=self.seed,
            pre_norm=self.pre_norm,
            embed_norm=self.embed_norm,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            seed=self.seed,
            threshold=self.threshold,
            val_fraction=self.val_fraction,
            checkpoint_every=self.checkpoint_every,
        )

    def synth_spec(self, count: Optional[int] = None) -> SynthSpec:
        return SynthSpec(
            count=self.synth_count if count is None else count,
            hw=self.input_hw,
            ellipse_range=self.synth_ellipses,
            mask_frac=self.synth_mask_frac,
            tint=self.synth_tint,
            noise=self.synth_noise,
            texture=self.synth_texture,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out


def _normalize_values(values: dict) -> dict:
    out = dict(values)
    if "input_hw" in out:
        hw = out["input_hw"]
        out["input_hw"] = (int(hw), int(hw)) if isinstance(hw, int) else tuple(int(v) for v in hw)
    for key in ("iscf_stages",):
        if key in out:
            out[key] = tuple(int(v) for v in out[key])
    for key in ("synth_ellipses", "synth_mask_frac"):
        if key in out:
            out[key] = tuple(out[key])
    return out


def _parse_scales(text: str) -> tuple[int, ...]:
    digits = [ch for ch in text if ch.isdigit()]
    if not digits or any(ch not in "123" for ch in digits):
        raise ConfigError(f"bad scales {text!r}; use digits from 1-3, e.g. 123 or 1,2")
    return tuple(sorted(set(int(ch) for ch in digits)))


def _echo_config(cfg: RunConfig, out_dir: Optional[Path] = None) -> None:
    text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
    print("effective config:")
    print(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "effective-config.json").write_text(text + "\n")


def _load_samples(args, cfg: RunConfig):
    if getattr(args, "synth", False):
        return synth_dataset(cfg.synth_spec())
    if args.data is None:
        raise ConfigError("either --data DIR or --synth is required")
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise NotADirectoryError(f"data directory not found: {data_dir}")
    samples = load_dataset(data_dir, cfg.input_hw)
    if not samples:
        raise MissingMask(f"no <id>.ppm / <id>_mask.pgm pairs under {data_dir}")
    return samples


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = RunConfig.from_sources(args.config, _overrides(args))
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    samples = _load_samples(args, cfg)
    result = pipeline.train(
        cfg.model_config(), cfg.train_config(), samples, out_dir, log=print
    )
    reports.render_history_figure(result.history, out_dir / "history.png")
    print(f"best val DSC {result.best_val_dsc:.4f} at epoch {result.best_epoch}")
    print(f"wrote {result.history_path}, {result.best_checkpoint}, history.png")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = RunConfig.from_sources(args.config, _overrides(args))
    params, model_cfg = load_checkpoint(args.ckpt)
    cfg.input_hw = model_cfg.input_hw
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    samples = _load_samples(args, cfg)
    if args.split != "all":
        train_set, val_set = pipeline.split_dataset(samples, cfg.val_fraction, cfg.seed)
        samples = train_set if args.split == "train" else val_set
    report = pipeline.evaluate(params, model_cfg, samples, cfg.threshold, cfg.batch_size)
    (out_dir / "metrics.json").write_text(report.to_json(indent=2) + "\n")
    reports.render_eval_figure(report.per_sample, out_dir / "per_sample_dsc.png")
    if args.overlays:
        overlay_dir = out_dir / "overlays"
        overlay_dir.mkdir(exist_ok=True)
        for sample in samples:
            pred = pipeline.predict_mask(params, model_cfg, sample.image.data, cfg.threshold)
            overlay_contours(
                sample.image.data,
                sample.mask.data[0],
                pred,
                overlay_dir / f"{sample.id}_overlay.ppm",
            )
        print(f"wrote {len(samples)} overlays to {overlay_dir}")
    micro = report.micro
    print(
        f"micro  DSC {micro['dsc']:.4f}  SE {micro['se']:.4f}  "
        f"SP {micro['sp']:.4f}  ACC {micro['acc']:.4f}  over {len(samples)} samples"
    )
    macro = report.macro
    print(
        f"mean   DSC {macro['dsc']:.4f}  SE {macro['se']:.4f}  "
        f"SP {macro['sp']:.4f}  ACC {macro['acc']:.4f}"
    )
    print(f"wrote {out_dir / 'metrics.json'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    params, model_cfg = load_checkpoint(args.ckpt)
    image_path = Path(args.image)
    if not image_path.exists():
        raise FileNotFoundError(f"image not found: {image_path}")
    raw = read_pnm(image_path)
    if raw.ndim != 3:
        raise MalformedPnm(f"{image_path}: infer expects a P6 color image")
    image = resize_bilinear(raw, model_cfg.input_hw).transpose(2, 0, 1) / 255.0
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pred = pipeline.predict_mask(params, model_cfg, image, args.threshold)
    mask_path = out_dir / f"{image_path.stem}_pred.pgm"
    write_pnm(mask_path, pred * 255.0)
    print(f"wrote {mask_path}")
    if args.overlay:
        gt_path = image_path.parent / f"{image_path.stem}_mask.pgm"
        if gt_path.exists():
            gt = (resize_bilinear(read_pnm(gt_path), model_cfg.input_hw) >= 128).astype(float)
        else:
            gt = np.zeros_like(pred)
        overlay_path = out_dir / f"{image_path.stem}_overlay.ppm"
        overlay_contours(image, gt, pred, overlay_path)
        print(f"wrote {overlay_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = verify.run_scope(args.scope)
    failures = []
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(
            f"gradcheck {res.name:24s} max rel err {res.max_rel_err:.3e} "
            f"(threshold {res.threshold:.0e}) {status}"
        )
        if not res.passed:
            failures.append(res.name)
    if failures:
        print(f"gradient check failed for: {', '.join(failures)}")
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_bench_attn(args) -> int:
    n_list = [int(v) for v in args.n_list.split(",") if v]
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    err = bench.verify_variants(min(n_list), args.d, seed=args.seed)
    print(f"variant agreement (multiplication-order oracle): max rel err {err:.3e}")
    if err > 1e-9:
        print("variants disagree; refusing to time")
        return EXIT_GRADCHECK
    dtype = np.float32 if args.dtype == "f32" else np.float64
    rows = bench.bench_attention(
        n_list, args.d, variants, repeats=args.repeats, seed=args.seed, dtype=dtype
    )
    slopes = bench.slopes_by_variant(rows)
    csv_path = out_dir / "bench_attention.csv"
    bench.write_bench_csv(rows, csv_path)
    reports.render_bench_figure(rows, slopes, out_dir / "bench_attention.png")
    for variant, slope in slopes.items():
        print(f"{variant}: fitted log-log slope {slope:.3f}")
    print(f"wrote {csv_path} and bench_attention.png")
    return EXIT_OK


ABLATION_COLUMNS = ("setting", "dsc", "se", "sp", "acc")


def cmd_ablate(args) -> int:
    cfg = RunConfig.from_sources(args.config, _overrides(args))
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    settings = [_parse_scales(part) for part in args.scales.split(",") if part.strip()]
    if not settings:
        raise ConfigError("no ablation settings requested")
    samples = _load_samples(args, cfg)
    rows = []
    for scales in settings:
        label = "".join(str(s) for s in scales)
        run_cfg = dataclasses.replace(cfg, iscf_stages=scales)
        print(f"=== ablation scales {{{','.join(map(str, scales))}}} ===")
        result = pipeline.train(
            run_cfg.model_config(),
            run_cfg.train_config(),
            samples,
            out_dir / f"scales_{label}",
            log=print,
        )
        _, val_set = pipeline.split_dataset(samples, cfg.val_fraction, cfg.seed)
        report = pipeline.evaluate(
            result.params, run_cfg.model_config(), val_set, cfg.threshold, cfg.batch_size
        )
        rows.append({"setting": label, **{k: report.micro[k] for k in ("dsc", "se", "sp", "acc")}})
    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            writer.writerow([row["setting"]] + [repr(row[k]) for k in ("dsc", "se", "sp", "acc")])
    reports.render_ablation_figure(rows, out_dir / "ablation.png")
    for row in rows:
        print(
            f"scales {row['setting']:>3s}: DSC {row['dsc']:.4f}  SE {row['se']:.4f}  "
            f"SP {row['sp']:.4f}  ACC {row['acc']:.4f}"
        )
    trend = ", ".join(f"{label} -> {dsc:.4f}" for label, dsc in REFERENCE_ABLATION_TREND)
    print(f"reference full-scale ISIC-2018 DSC trend (context only, not asserted): {trend}")
    print(f"wrote {csv_path} and ablation.png")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    cfg = RunConfig.from_sources(args.config, _overrides(args))
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    spec = cfg.synth_spec(count=args.count)
    samples = synth_dataset(spec)
    for sample in samples:
        save_sample(out_dir, sample)
    print(f"wrote {len(samples)} image/mask pairs to {out_dir}")
    return EXIT_OK


def cmd_describe(args) -> int:
    cfg = RunConfig.from_sources(args.config, _overrides(args))
    _echo_config(cfg)
    model_cfg = cfg.model_config()
    from .model import build

    with_iscf = param_count(build(model_cfg))
    without = param_count(build(dataclasses.replace(model_cfg, iscf_stages=())))
    overhead = iscf_overhead(model_cfg)
    print(f"parameters with fusion module: {with_iscf}")
    print(f"parameters without:            {without}")
    print(f"fusion overhead (store delta): {with_iscf - without}")
    print(f"fusion overhead (closed form): {overhead}")
    ref = REFERENCE_PARAM_COUNTS_M
    print(
        "full-scale reference counts for context (widths unpublished, not asserted): "
        f"{ref['without_fusion']}M -> {ref['with_fusion']}M"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def _overrides(args) -> dict:
    keys = (
        "epochs",
        "batch_size",
        "lr",
        "seed",
        "base_width",
        "threshold",
        "synth_count",
        "val_fraction",
        "checkpoint_every",
    )
    out = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "hw", None) is not None:
        out["input_hw"] = (args.hw, args.hw)
    if getattr(args, "set_scales", None) is not None:
        out["iscf_stages"] = _parse_scales(args.set_scales)
    return out


def _add_common_train_flags(sub) -> None:
    sub.add_argument("--config", help="JSON config file (fields of RunConfig)")
    sub.add_argument("--data", help="dataset directory of <id>.ppm/<id>_mask.pgm pairs")
    sub.add_argument("--synth", action="store_true", help="use the seeded synthetic dataset")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--hw", type=int, help="square input extent (multiple of 32)")
    sub.add_argument("--base-width", dest="base_width", type=int)
    sub.add_argument("--threshold", type=float)
    sub.add_argument("--synth-count", dest="synth_count", type=int)
    sub.add_argument("--val-fraction", dest="val_fraction", type=float)
    sub.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iscfnet",
        description="Efficient-attention U-shaped segmentation network with inter-scale context fusion.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train", help="train a model; writes history.csv, best.ckpt, figures")
    _add_common_train_flags(p)
    p.add_argument("--scales", dest="set_scales", help="fusion stages, e.g. 123 or 1,2")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint; writes metrics.json")
    p.add_argument("--ckpt", required=True)
    _add_common_train_flags(p)
    p.add_argument("--split", choices=("train", "val", "all"), default="all")
    p.add_argument("--overlays", action="store_true", help="write contour overlays per sample")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("infer", help="predict a mask for one P6 image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--overlay", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = subs.add_parser("gradcheck", help="finite-difference verification suites")
    p.add_argument(
        "--scope", choices=("primitives", "blocks", "iscf", "model", "all"), default="primitives"
    )
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("bench-attn", help="attention wall-clock/allocation benchmark")
    p.add_argument("--n-list", dest="n_list", default="256,512,1024,2048,4096")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--variants", default="standard,efficient")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32",
                   help="timed-run precision (correctness checks always run in f64)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_attn)

    p = subs.add_parser("ablate", help="train/evaluate one row per fusion-scale setting")
    _add_common_train_flags(p)
    p.add_argument("--scales", required=True, help="comma-separated settings, e.g. 1,12,123")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = subs.add_parser("synth-data", help="write the synthetic dataset as NetPBM pairs")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--count", type=int)
    p.add_argument("--hw", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = subs.add_parser("describe", help="print parameter accounting for a config")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--hw", type=int)
    p.add_argument("--base-width", dest="base_width", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_describe)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidConfig) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
