"""Search-token elimination driven by template-to-search attention.

Score maps are plain numpy arrays ``[..., N_search]``: elimination is a
discrete decision and never carries gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError

STRATEGIES = ("none", "ce", "add_ce", "max_ce", "tmce")


@dataclass(frozen=True)
class SegmentLayout:
    """Token layout ``static | dynamic | search``; ``n_dynamic`` is 0 for a single template."""

    n_static: int
    n_dynamic: int
    n_search: int

    @property
    def n_template(self):
        return self.n_static + self.n_dynamic

    @property
    def total(self):
        return self.n_static + self.n_dynamic + self.n_search

    def with_search(self, n):
        return SegmentLayout(self.n_static, self.n_dynamic, n)


@dataclass
class PruneDecision:
    keep_indices: np.ndarray  # [..., k], ascending positions into the pre-prune search segment
    keep_ratio: float


def template_search_corr(attn, layout):
    """Per-search-token scores from each template's attention rows.

    ``attn`` is a post-softmax map ``[..., heads, N, N]``. The score is the
    mean over heads and over that template's query rows of the
    template-row x search-column block. Returns ``(static, dynamic)``;
    ``dynamic`` is None when the layout has no dynamic template.
    """
    attn = np.asarray(attn)
    n = attn.shape[-1]
    if attn.shape[-2] != n or n != layout.total:
        raise ContractError(f"attention map {attn.shape} does not match layout total {layout.total}")
    s0, s1 = 0, layout.n_static
    d1 = s1 + layout.n_dynamic
    cols = attn[..., layout.n_template:]
    static = cols[..., s0:s1, :].mean(axis=(-3, -2))
    dynamic = cols[..., s1:d1, :].mean(axis=(-3, -2)) if layout.n_dynamic else None
    return static, dynamic


def _check_same(*maps):
    shapes = {np.shape(m) for m in maps}
    if len(shapes) != 1:
        raise ContractError(f"score maps differ in shape: {sorted(shapes)}")


def tmce_score(rgb_static, rgb_dynamic, tir_static, tir_dynamic):
    """Sum static and dynamic maps per modality, then take the per-token max."""
    _check_same(rgb_static, rgb_dynamic, tir_static, tir_dynamic)
    return np.maximum(np.add(rgb_static, rgb_dynamic), np.add(tir_static, tir_dynamic))


def variant_score(strategy, rgb_static, rgb_dynamic, tir_static, tir_dynamic, ce_source="rgb"):
    """Combine the four correlation maps under an elimination strategy.

    ``rgb_dynamic`` / ``tir_dynamic`` may be None for single-template models,
    in which case each modality contributes its static map alone. Returns
    None for ``"none"``.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown elimination strategy {strategy!r}")
    if strategy == "none":
        return None
    maps = [m for m in (rgb_static, rgb_dynamic, tir_static, tir_dynamic) if m is not None]
    _check_same(*maps)
    rgb = rgb_static if rgb_dynamic is None else np.add(rgb_static, rgb_dynamic)
    tir = tir_static if tir_dynamic is None else np.add(tir_static, tir_dynamic)
    if strategy == "tmce":
        return np.maximum(rgb, tir)
    if strategy == "add_ce":
        return rgb + tir
    if strategy == "max_ce":
        return np.max(np.stack(maps), axis=0)
    # ce: single-modality scoring
    if ce_source == "rgb":
        return np.array(rgb, dtype=np.float64)
    if ce_source == "tir":
        return np.array(tir, dtype=np.float64)
    raise ConfigError(f"unknown ce_source {ce_source!r}")


def keep_count(n, ratio):
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"keep ratio must be in (0, 1], got {ratio}")
    # guard against 0.7 * 10 = 7.000000000000001 style ceilings
    return min(n, max(1, math.ceil(round(ratio * n, 9))))


def select_topk(scores, ratio):
    """Top ``ceil(ratio * N)`` positions per row, ties to the lower index, ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    lead, n = scores.shape[:-1], scores.shape[-1]
    k = keep_count(n, ratio)
    flat = np.ascontiguousarray(scores.reshape(-1, n))
    return kernels.topk_sorted(flat, k).reshape(lead + (k,))


def prune(tokens_rgb, tokens_tir, scores, ratio):
    """One shared keep decision for both modalities' search segments."""
    scores = np.asarray(scores)
    for st in (tokens_rgb, tokens_tir):
        if st.layout.n_search != scores.shape[-1]:
            raise ContractError(
                f"score length {scores.shape[-1]} != search count {st.layout.n_search}")
    return PruneDecision(select_topk(scores, ratio), ratio)


def search_counts(n_search, ratio, prune_layers, depth):
    """Search-token count seen by each block 1..depth under a fixed schedule."""
    counts, n = [], n_search
    for layer in range(1, depth + 1):
        counts.append(n)
        if layer in prune_layers:
            n = keep_count(n, ratio)
    return counts, n
