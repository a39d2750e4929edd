"""Latency of the matching step alone (encodings are precomputed), plus growth-exponent fits."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np
import torch

from .matching import SideView, macro_score, micro_score

Scorer = Literal["macro", "micro"]


class TimerResolutionError(RuntimeError):
    pass


@dataclass
class LatencyRow:
    n: int
    scorer: str
    median_us: float
    p90_us: float
    samples: int


@dataclass
class GrowthFit:
    exponent: float
    intercept: float
    residual: float


def _random_view(gen: torch.Generator, batch: int, n: int, d: int) -> SideView:
    def r(*shape):
        return torch.randn(*shape, generator=gen)

    return SideView(r(batch, d), r(batch, n, d), r(batch, d), r(batch, n, d), r(batch, d), r(batch, d),
                    torch.full((batch,), n, dtype=torch.long))


def _timed(fn, repetitions: int, warmup: int) -> list[float]:
    res = time.get_clock_info("perf_counter").resolution
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        dt = time.perf_counter() - t0
        if dt < 10 * res:
            raise TimerResolutionError(
                f"measured {dt:.3g}s is within 10x of the timer resolution {res:.3g}s; use a larger batch")
        out.append(dt)
    return out


def measure_latency(scorer: Scorer, n_values: Iterable[int], d: int = 64, batch_size: int = 256,
                    repetitions: int = 30, warmup: int = 3, seed: int = 0) -> list[LatencyRow]:
    """Median/p90 wall time of one batched matching prediction per sequence length."""
    if scorer not in ("macro", "micro"):
        raise ValueError(f"scorer must be 'macro' or 'micro', got {scorer!r}")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    rows = []
    with torch.no_grad():
        for n in n_values:
            u = _random_view(gen, batch_size, n, d)
            v = _random_view(gen, batch_size, n, d)
            a_uv = torch.randn(n, generator=gen)
            a_vu = torch.randn(n, generator=gen)
            if scorer == "macro":
                def fn():
                    return macro_score(u.p, v.f, v.p, u.f).y_total
            else:
                def fn():
                    return micro_score(u, v, a_uv, a_vu).z_total
            times = np.array(_timed(fn, repetitions, warmup)) * 1e6
            rows.append(LatencyRow(n, scorer, float(np.median(times)), float(np.percentile(times, 90)), len(times)))
    return rows


def fit_growth_exponent(table: Sequence) -> GrowthFit:
    """Least-squares slope of log(time) on log(n).

    ``table`` holds ``LatencyRow`` objects or ``(n, time)`` pairs.
    """
    pairs = [(r.n, r.median_us) if isinstance(r, LatencyRow) else (r[0], r[1]) for r in table]
    ns = np.array([p[0] for p in pairs], dtype=float)
    ts = np.array([p[1] for p in pairs], dtype=float)
    if len(np.unique(ns)) < 3:
        raise ValueError("need at least 3 distinct n values")
    if np.any(ts <= 0) or np.any(ns <= 0):
        raise ValueError("times and n must be positive")
    x, y = np.log(ns), np.log(ts)
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ np.array([slope, icpt]) - y) ** 2)))
    return GrowthFit(float(slope), float(icpt), resid)


def latency_csv(rows: Iterable[LatencyRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "scorer", "median_us", "p90_us"])
    for r in rows:
        w.writerow([r.n, r.scorer, f"{r.median_us:.3f}", f"{r.p90_us:.3f}"])
    return buf.getvalue()


def speedup(macro: LatencyRow, micro: LatencyRow) -> float:
    return micro.median_us / macro.median_us
