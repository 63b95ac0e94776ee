"""Analytic attention cost of a pruning schedule, plus measured throughput."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, replace

import numpy as np

from .model import RGBTModel
from .tmce import search_counts


def attention_flops(n, c):
    """Multiply-adds of one attention layer over ``n`` tokens of width ``c``.

    Four ``n x c x c`` projections plus the score and value products.
    """
    return 4 * n * c * c + 2 * n * n * c


@dataclass
class CostRow:
    layer: int
    n_search: int
    n_tokens: int
    flops: int  # both modalities


def cost_rows(cfg, strategy=None):
    strategy = cfg.elimination_strategy if strategy is None else strategy
    prune_layers = () if strategy == "none" else cfg.prune_layers
    counts, _ = search_counts(cfg.n_search, cfg.keep_ratio, prune_layers, cfg.depth)
    n_templates = cfg.n_template * (2 if cfg.dual_template else 1)
    return [CostRow(i + 1, n, n + n_templates, 2 * attention_flops(n + n_templates, cfg.dim))
            for i, n in enumerate(counts)]


def cost_report(cfg):
    """CSV text: one row per block for no pruning and for the configured strategy."""
    base, pruned = cost_rows(cfg, "none"), cost_rows(cfg)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "n_search_none", "flops_none", f"n_search_{cfg.elimination_strategy}",
                f"flops_{cfg.elimination_strategy}"])
    for a, b in zip(base, pruned):
        w.writerow([a.layer, a.n_search, a.flops, b.n_search, b.flops])
    tot_a, tot_b = sum(r.flops for r in base), sum(r.flops for r in pruned)
    w.writerow(["total", sum(r.n_search for r in base), tot_a, sum(r.n_search for r in pruned), tot_b])
    w.writerow(["ratio", "", "1.000000", "", f"{tot_b / tot_a:.6f}"])
    return buf.getvalue()


@dataclass
class Throughput:
    strategy: str
    seconds_per_frame: float
    frames_per_second: float
    tokens_per_second: float


def _inputs(cfg, seed):
    rng = np.random.default_rng(seed)
    t, s = cfg.template_size, cfg.search_size
    rgb = (rng.integers(0, 256, (1, t, t, 3)), rng.integers(0, 256, (1, t, t, 3)),
           rng.integers(0, 256, (1, s, s, 3)))
    tir = (rng.integers(0, 256, (1, t, t)), rng.integers(0, 256, (1, t, t)),
           rng.integers(0, 256, (1, s, s)))
    return rgb, tir


def measure_many(cfgs, frames=8, warmup=1, seed=0, rounds=5):
    """Time single-frame forwards of randomly initialised models.

    The models take turns frame by frame, so slow drift in machine speed hits
    every configuration alike, and each model reports its median frame.
    Tokens per second counts the search tokens entering the network.
    """
    models = [RGBTModel(c) for c in cfgs]
    inputs = [_inputs(c, seed) for c in cfgs]
    for _ in range(warmup):
        for m, (rgb, tir) in zip(models, inputs):
            m.forward(rgb, tir)
    spent = [[] for _ in cfgs]
    for _ in range(rounds * frames):
        for k, (m, (rgb, tir)) in enumerate(zip(models, inputs)):
            t0 = time.perf_counter()
            m.forward(rgb, tir)
            spent[k].append(time.perf_counter() - t0)
    mid = [float(np.median(t)) for t in spent]
    return [Throughput(c.elimination_strategy, t, 1.0 / t, c.n_search / t)
            for c, t in zip(cfgs, mid)]


def measure(cfg, frames=8, warmup=1, seed=0):
    return measure_many([cfg], frames, warmup, seed)[0]


def throughput_report(cfg, frames=8, warmup=1):
    rows = measure_many([replace(cfg, elimination_strategy="none"), cfg], frames, warmup)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "seconds_per_frame", "frames_per_second", "tokens_per_second", "speedup"])
    for r in rows:
        w.writerow([r.strategy, f"{r.seconds_per_frame:.6f}", f"{r.frames_per_second:.3f}",
                    f"{r.tokens_per_second:.1f}",
                    f"{r.tokens_per_second / rows[0].tokens_per_second:.3f}"])
    return rows, buf.getvalue()
