"""Timing of the surrogate backward as the active query set grows."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import RowMask
from .model import Denoiser, DenoiserConfig


@dataclass(frozen=True)
class BenchRow:
    active: int
    median_ms: float
    node_visits: int
    reps: int


def active_sizes(L: int) -> list[int]:
    """``1, 2, 4, ..., L`` (``L`` itself always included)."""
    sizes, a = [], 1
    while a < L:
        sizes.append(a)
        a *= 2
    return sizes + [L]


def _sweep(roots, reps: int) -> np.ndarray:
    times = np.empty((reps, len(roots)))
    clock = time.perf_counter_ns
    for r in range(reps):
        for j, root in enumerate(roots):
            start = clock()
            ad.backward(root)
            times[r, j] = (clock() - start) / 1e6
    return np.median(times, axis=0)


def bench_backward(model: Denoiser, sizes=None, *, reps: int = 60, warmup: int = 3, seed: int = 0,
                   min_ms: float = 1e-3, max_reps: int = 1 << 14) -> list[BenchRow]:
    """Median backward time and attention row visits for each active-set size.

    Every position is masked and the readout covers all of them, as at the
    first decode step. The active set is a random subset of the given size;
    ``size == L`` runs without any row detach (the dense reference). Sizes are
    timed round-robin so that drift in machine load hits all of them alike.
    If any median falls under ``min_ms`` (too close to the timer resolution)
    the repetition count is doubled and the sweep repeated.
    """
    L = model.seq_len
    sizes = active_sizes(L) if sizes is None else sorted(set(int(s) for s in sizes))
    rng = np.random.default_rng(seed)
    tokens = np.full(L, model.mask_id)
    rows = np.arange(L)
    roots = []
    for a in sizes:
        active = None if a >= L else RowMask(rng.choice(L, size=a, replace=False), L)
        tape = ad.Tape()
        x = tape.leaf(model.embed(tokens))
        roots.append(model.readout(tape, x, rows, active=active))
    for root in roots:
        for _ in range(warmup):
            ad.backward(root)
    while True:
        med = _sweep(roots, reps)
        if med.min() >= min_ms or reps >= max_reps:
            break
        reps *= 2
    return [BenchRow(a, float(m), root.tape.last_backward.op_rows("attention"), reps)
            for a, m, root in zip(sizes, med, roots)]


def bench_model(L: int = 256, vocab_size: int = 16, *, d_model: int = 64, n_layers: int = 2, n_heads: int = 8,
                d_hidden: int = 64, seed: int = 0) -> Denoiser:
    cfg = DenoiserConfig(L, vocab_size, d_model=d_model, n_layers=n_layers, n_heads=n_heads, d_hidden=d_hidden)
    return Denoiser.initialize(cfg, seed)


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares ``(slope, intercept, R^2)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def write_rows(rows: list[BenchRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["active", "median_ms", "node_visits", "reps"])
        for r in rows:
            w.writerow([r.active, f"{r.median_ms:.6f}", r.node_visits, r.reps])
    return path
