"""Wall-clock and allocation benchmark for the two attention variants.

Per-call latency on a shared machine depends on whether a size happens to
run cache-resident, which can swamp the algorithmic scaling. Each
measurement therefore amortizes over enough distinct problem instances to
push the working set well past any cache, with every call's buffers held
alive until the repeat ends so nothing is recycled: all sizes then pay the
same per-byte memory cost and the fitted slope reflects the algorithm.
Timed runs default to float32, the sanctioned benchmark precision.

Allocation byte counts come from a separate instrumented call, so the
tracker never sits inside the timed region. Before any timing, the two
variants are checked against each other via the multiplication-order
oracle (in 64-bit).
"""

from __future__ import annotations

import ctypes
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import AttentionConfig, efficient_attention, explicit_context_attention, standard_attention
from .autodiff import tensor, track_allocations

BENCH_COLUMNS = ("n", "d", "variant", "wall_ns", "bytes_allocated")

# Each timed repeat touches at least this many fresh bytes.
TARGET_WORKING_SET = 64 * 1024 * 1024
MAX_CALLS_PER_REPEAT = 512

M_TRIM_THRESHOLD = -1
M_MMAP_THRESHOLD = -3


def _retain_large_buffers(limit: int = 1 << 30) -> None:
    """Best-effort mallopt so scratch buffers beyond glibc's default mmap
    and trim thresholds are recycled instead of returned to the kernel and
    page-faulted fresh on every call (otherwise only the largest sizes pay
    that tax and the fit kinks)."""
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(M_MMAP_THRESHOLD, limit)
        libc.mallopt(M_TRIM_THRESHOLD, limit)
    except Exception:
        pass


@dataclass
class BenchRow:
    n: int
    d: int
    variant: str
    wall_ns: int
    bytes_allocated: int
    peak_block_bytes: int


def _inputs(n: int, cfg: AttentionConfig, seed: int, dtype=np.float64):
    rng = np.random.default_rng(seed)
    q = tensor(rng.standard_normal((n, cfg.d_k)), dtype=dtype)
    k = tensor(rng.standard_normal((n, cfg.d_k)), dtype=dtype)
    v = tensor(rng.standard_normal((n, cfg.d_v)), dtype=dtype)
    return q, k, v


def _run(variant: str, q, k, v):
    if variant == "standard":
        return standard_attention(q, k, v)
    if variant == "efficient":
        out, _ = efficient_attention(q, k, v)
        return out
    raise ValueError(f"unknown attention variant {variant!r}")


def verify_variants(n: int, d: int, seed: int = 0) -> float:
    """Max relative error between the efficient path and the explicit
    n-by-n multiplication order on identical inputs."""
    q, k, v = _inputs(n, AttentionConfig(d_model=d), seed)
    fast, _ = efficient_attention(q, k, v)
    slow = explicit_context_attention(q, k, v)
    denom = np.maximum(np.abs(slow.data), 1e-12)
    return float(np.max(np.abs(fast.data - slow.data) / denom))


def bench_attention(
    n_list: Sequence[int],
    d: int,
    variants: Sequence[str] = ("standard", "efficient"),
    repeats: int = 5,
    seed: int = 0,
    dtype=np.float32,
) -> list[BenchRow]:
    _retain_large_buffers()
    rows = []
    cfg = AttentionConfig(d_model=d)
    # Largest first: one-time process costs (arena growth, lazy imports)
    # then land where they are relatively negligible.
    for n in sorted(n_list, reverse=True):
        for variant in variants:
            warm = _inputs(n, cfg, seed, dtype=dtype)
            _run(variant, *warm)  # warmup
            with track_allocations() as stats:
                _run(variant, *warm)
            per_call = max(1, stats.total_bytes)
            calls = min(MAX_CALLS_PER_REPEAT, max(1, math.ceil(TARGET_WORKING_SET / per_call)))
            instances = [_inputs(n, cfg, seed + 1 + i, dtype=dtype) for i in range(calls)]
            keep = []  # holds every output so no repeat reuses warm buffers
            best = None
            for _ in range(max(1, repeats)):
                start = time.perf_counter_ns()
                for triple in instances:
                    keep.append(_run(variant, *triple))
                elapsed = (time.perf_counter_ns() - start) // calls
                best = elapsed if best is None else min(best, elapsed)
            del keep
            rows.append(
                BenchRow(
                    n=n,
                    d=d,
                    variant=variant,
                    wall_ns=best,
                    bytes_allocated=stats.total_bytes,
                    peak_block_bytes=stats.peak_block_bytes,
                )
            )
    rows.sort(key=lambda r: (r.n, r.variant))
    return rows


def fit_loglog_slope(ns: Sequence[int], wall_ns: Sequence[int]) -> float:
    """Least-squares slope of log(time) against log(n)."""
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(wall_ns, float)), 1)[0])


def slopes_by_variant(rows: Sequence[BenchRow]) -> dict[str, float]:
    out = {}
    for variant in sorted({r.variant for r in rows}):
        sub = [r for r in rows if r.variant == variant]
        out[variant] = fit_loglog_slope([r.n for r in sub], [r.wall_ns for r in sub])
    return out


def write_bench_csv(rows: Sequence[BenchRow], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_COLUMNS)
        for r in rows:
            writer.writerow([r.n, r.d, r.variant, r.wall_ns, r.bytes_allocated])
