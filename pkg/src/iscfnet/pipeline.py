"""Training and evaluation: BCE loss, Adam, confusion metrics, the loop.

Aggregate metrics are micro-averaged (counts pooled over the dataset before
dividing); per-sample means are reported alongside. Ratios with an empty
denominator follow the 0/0 = 1 convention, so two empty masks agree
perfectly. Training is bit-deterministic given the seed: the split, the
shuffles, and the updates all derive from one seeded generator.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import ShapeMismatch, Tape, Tensor, backward, bce_with_logits, tensor
from .autodiff.ops import _sigmoid_stable
from .data_io import Sample
from .model import ModelConfig, ModelParams, build, forward, save_checkpoint


class NonFiniteLoss(RuntimeError):
    """Training aborted on a NaN/inf loss (never silently skipped)."""


class MissingGradient(KeyError):
    """A trainable parameter had no gradient entry at update time."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    threshold: float = 0.5
    val_fraction: float = 0.2
    checkpoint_every: int = 0  # 0 = keep only the best checkpoint

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


# ---------------------------------------------------------------------------
# loss and optimizer


def bce_loss(logits: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy computed from logits (overflow-safe)."""
    return bce_with_logits(logits, target)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: ModelParams, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """Standard bias-corrected Adam update, in-place on the store."""
    state.step += 1
    t = state.step
    correction1 = 1.0 - cfg.beta1**t
    correction2 = 1.0 - cfg.beta2**t
    for p in params:
        if not p.trainable:
            continue
        if p.name not in grads:
            raise MissingGradient(p.name)
        g = grads[p.name]
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.value.data)
            v = np.zeros_like(p.value.data)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        state.m[p.name] = m
        state.v[p.name] = v
        update = (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_eps)
        params.set_value(p.name, p.value.data - cfg.lr * update)


# ---------------------------------------------------------------------------
# metrics


def confusion(pred_mask: np.ndarray, gt_mask: np.ndarray) -> tuple[int, int, int, int]:
    """Pixel-wise (TP, FP, FN, TN) over two binary rasters."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"confusion: {pred.shape} vs {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if np.any((m != 0) & (m != 1)):
            raise ValueError(f"confusion: {name} mask is not binary")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return tp, fp, fn, tn


def _ratio(num: float, den: float) -> float:
    # 0/0 = 1: empty-vs-empty agreement is perfect, not undefined.
    return 1.0 if den == 0 else num / den


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> dict:
    if min(tp, fp, fn, tn) < 0:
        raise ValueError("confusion counts must be nonnegative")
    return {
        "dsc": _ratio(2 * tp, 2 * tp + fp + fn),
        "se": _ratio(tp, tp + fn),
        "sp": _ratio(tn, tn + fp),
        "acc": _ratio(tp + tn, tp + fp + fn + tn),
    }


@dataclass
class MetricsReport:
    """Micro-averaged (pooled counts) and per-sample-mean metrics."""

    counts: dict
    micro: dict
    macro: dict
    per_sample: list
    threshold: float

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "counts": self.counts,
            "micro": self.micro,
            "per_sample_mean": self.macro,
            "per_sample": self.per_sample,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)


def build_report(rows: Sequence[dict], threshold: float) -> MetricsReport:
    """Pool per-sample confusion rows into micro + macro metrics."""
    totals = {k: 0 for k in ("tp", "fp", "fn", "tn")}
    for row in rows:
        for k in totals:
            totals[k] += row[k]
    micro = metrics_from_counts(totals["tp"], totals["fp"], totals["fn"], totals["tn"])
    keys = ("dsc", "se", "sp", "acc")
    if rows:
        macro = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    else:
        macro = {k: 1.0 for k in keys}
    return MetricsReport(
        counts=totals, micro=micro, macro=macro, per_sample=list(rows), threshold=threshold
    )


# ---------------------------------------------------------------------------
# evaluation


def predict_logits(params: ModelParams, cfg: ModelConfig, images: np.ndarray) -> np.ndarray:
    """Forward a [b, 3, H, W] batch without a tape; returns logits array."""
    return forward(tensor(images), params.tensors(), cfg).logits.data


def evaluate(
    params: ModelParams,
    cfg: ModelConfig,
    samples: Sequence[Sample],
    threshold: float = 0.5,
    batch_size: int = 8,
) -> MetricsReport:
    """Threshold sigmoid(logits) and score every sample."""
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s.image.data for s in chunk])
        logits = predict_logits(params, cfg, images)
        probs = _sigmoid_stable(logits)
        preds = (probs >= threshold).astype(np.float64)
        for s, pred in zip(chunk, preds):
            tp, fp, fn, tn = confusion(pred[0], s.mask.data[0])
            row = {"id": s.id, "tp": tp, "fp": fp, "fn": fn, "tn": tn}
            row.update(metrics_from_counts(tp, fp, fn, tn))
            rows.append(row)
    return build_report(rows, threshold)


def predict_mask(params: ModelParams, cfg: ModelConfig, image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary [H, W] mask for a single [3, H, W] image."""
    logits = predict_logits(params, cfg, image[None])
    return (_sigmoid_stable(logits)[0, 0] >= threshold).astype(np.float64)


# ---------------------------------------------------------------------------
# training


HISTORY_COLUMNS = ("epoch", "train_loss", "val_dsc", "val_se", "val_sp", "val_acc")


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_dsc: float
    best_checkpoint: Optional[Path]
    history_path: Optional[Path]
    params: ModelParams


def split_dataset(samples: Sequence[Sample], val_fraction: float, seed: int):
    """Deterministic shuffle-split into (train, val) by the config seed."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = int(round(len(samples) * val_fraction))
    val = [samples[i] for i in order[:n_val]]
    train = [samples[i] for i in order[n_val:]]
    return train, val


def write_history(rows: Sequence[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in HISTORY_COLUMNS])


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: Sequence[Sample],
    out_dir: Optional[Path] = None,
    log=None,
) -> TrainResult:
    """Adam on mean BCE; keeps the best-validation-DSC checkpoint.

    Raises NonFiniteLoss (with the epoch/step in the message) the moment the
    loss stops being finite.
    """
    rng = np.random.default_rng(train_cfg.seed)
    train_set, val_set = split_dataset(dataset, train_cfg.val_fraction, train_cfg.seed)
    if not train_set:
        raise ValueError("empty training split")
    params = build(model_cfg)
    state = AdamState()
    history: list[dict] = []
    best_dsc = -1.0
    best_epoch = 0
    best_path = Path(out_dir) / "best.ckpt" if out_dir is not None else None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            images = np.stack([train_set[i].image.data for i in idx])
            masks = np.stack([train_set[i].mask.data for i in idx])
            with Tape() as tape:
                tracked = params.watched(tape)
                artifacts = forward(tensor(images), tracked, model_cfg)
                loss = bce_loss(artifacts.logits, tensor(masks))
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise NonFiniteLoss(
                        f"loss {loss_value} at epoch {epoch}, step {start // train_cfg.batch_size}"
                    )
                grads = backward(loss)
                grad_map = {name: grads.wrt(t) for name, t in tracked.items()}
            adam_step(params, grad_map, state, train_cfg)
            losses.append(loss_value)
        if val_set:
            report = evaluate(params, model_cfg, val_set, train_cfg.threshold, train_cfg.batch_size)
            val_metrics = report.micro
        else:
            val_metrics = {"dsc": float("nan"), "se": float("nan"), "sp": float("nan"), "acc": float("nan")}
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_dsc": val_metrics["dsc"],
            "val_se": val_metrics["se"],
            "val_sp": val_metrics["sp"],
            "val_acc": val_metrics["acc"],
        }
        history.append(row)
        if log is not None:
            log(
                f"epoch {epoch:3d}  loss {row['train_loss']:.4f}  "
                f"val dsc {row['val_dsc']:.4f}  se {row['val_se']:.4f}  "
                f"sp {row['val_sp']:.4f}  acc {row['val_acc']:.4f}"
            )
        if val_set and row["val_dsc"] > best_dsc:
            best_dsc = row["val_dsc"]
            best_epoch = epoch
            if best_path is not None:
                save_checkpoint(params, model_cfg, best_path)
        if (
            out_dir is not None
            and train_cfg.checkpoint_every
            and epoch % train_cfg.checkpoint_every == 0
        ):
            save_checkpoint(params, model_cfg, Path(out_dir) / f"epoch_{epoch:04d}.ckpt")

    history_path = None
    if out_dir is not None:
        history_path = Path(out_dir) / "history.csv"
        write_history(history, history_path)
        if not val_set and best_path is not None:
            save_checkpoint(params, model_cfg, best_path)
    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_val_dsc=best_dsc,
        best_checkpoint=best_path,
        history_path=history_path,
        params=params,
    )
