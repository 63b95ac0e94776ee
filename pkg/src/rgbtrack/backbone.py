"""Dual-stream, dual-template ViT backbone with scheduled token elimination."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import LayerNorm, MHABlock, Module, PatchEmbed, patch_embed, self_attention_joint
from .tdtb import TDTB, tdtb_forward
from .tmce import STRATEGIES, SegmentLayout, prune, template_search_corr, variant_score


@dataclass
class ModelConfig:
    patch: int = 16
    dim: int = 64
    heads: int = 4
    depth: int = 12
    mlp_ratio: float = 4.0
    prune_layers: tuple = (4, 7, 10)
    tdtb_layers: tuple = (4,)
    tdtb_enabled: bool = True
    dual_template: bool = True
    keep_ratio: float = 0.7
    elimination_strategy: str = "tmce"
    ce_source: str = "rgb"
    template_size: int = 128
    search_size: int = 256
    lambda_giou: float = 2.0
    lambda_l1: float = 5.0
    update_threshold: float = 0.65
    template_factor: float = 2.0
    search_factor: float = 4.0
    hann_window: bool = False
    seed: int = 0

    def __post_init__(self):
        self.prune_layers = tuple(int(v) for v in self.prune_layers)
        self.tdtb_layers = tuple(int(v) for v in self.tdtb_layers)
        self.validate()

    def validate(self):
        for name in ("patch", "dim", "heads", "depth", "template_size", "search_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        for name in ("template_size", "search_size"):
            if getattr(self, name) % self.patch:
                raise ConfigError(f"{name} {getattr(self, name)} not divisible by patch {self.patch}")
        if not set(self.prune_layers) <= set(range(1, self.depth + 1)):
            raise ConfigError(f"prune_layers {self.prune_layers} outside 1..{self.depth}")
        if not set(self.tdtb_layers) <= set(self.prune_layers):
            raise ConfigError(f"tdtb_layers {self.tdtb_layers} must be a subset of prune_layers")
        if self.elimination_strategy not in STRATEGIES:
            raise ConfigError(f"elimination_strategy must be one of {STRATEGIES}")
        if self.ce_source not in ("rgb", "tir"):
            raise ConfigError("ce_source must be rgb or tir")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ConfigError(f"keep_ratio must be in (0, 1], got {self.keep_ratio}")
        if self.tdtb_enabled and self.tdtb_layers and not self.dual_template:
            raise ConfigError("the bridging module needs dual templates")
        if self.mlp_ratio <= 0 or self.template_factor <= 0 or self.search_factor <= 0:
            raise ConfigError("mlp_ratio and crop factors must be positive")

    @property
    def n_template(self):
        return (self.template_size // self.patch) ** 2

    @property
    def n_search(self):
        return (self.search_size // self.patch) ** 2

    @property
    def grid(self):
        return self.search_size // self.patch

    @property
    def active_tdtb_layers(self):
        return self.tdtb_layers if self.tdtb_enabled else ()

    @property
    def active_prune_layers(self):
        return () if self.elimination_strategy == "none" else self.prune_layers

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class ModalTokenState:
    tokens: T.Tensor  # [B, N_total, C]
    layout: SegmentLayout
    spatial_index: np.ndarray  # [B, N_search] original grid cell of each search token

    def templates(self):
        return self.tokens[..., :self.layout.n_template, :]

    def search(self):
        return self.tokens[..., self.layout.n_template:, :]


def apply_decision(state, decision):
    """Keep the chosen search tokens; template segments pass through untouched."""
    keep = decision.keep_indices
    kept = T.take_rows(state.search(), keep)
    tokens = T.concat([state.templates(), kept], axis=-2)
    index = np.take_along_axis(state.spatial_index, keep, axis=-1)
    return ModalTokenState(tokens, state.layout.with_search(keep.shape[-1]), index)


@dataclass
class BackboneOutput:
    feat_rgb: T.Tensor  # [B, H_f, W_f, C]
    feat_tir: T.Tensor
    spatial_index: np.ndarray
    search_counts: list = field(default_factory=list)  # search tokens entering each block
    final_rgb: ModalTokenState = None
    final_tir: ModalTokenState = None


class Backbone(Module):
    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        self.embed = PatchEmbed(rng, cfg.patch, cfg.dim, cfg.template_size, cfg.search_size)
        self.blocks_rgb = [MHABlock(rng, cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.blocks_tir = [MHABlock(rng, cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.norm_rgb = LayerNorm(cfg.dim)
        self.norm_tir = LayerNorm(cfg.dim)
        if cfg.tdtb_enabled and cfg.tdtb_layers:
            self.bridges = [TDTB(rng, cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in cfg.tdtb_layers]

    def tokenize(self, static, dynamic, search):
        parts = [patch_embed(static, "template", self.embed)]
        if self.cfg.dual_template:
            parts.append(patch_embed(dynamic, "template", self.embed))
        parts.append(patch_embed(search, "search", self.embed))
        return T.concat(parts, axis=-2)

    def forward(self, rgb, tir):
        """``rgb``/``tir`` are ``(static, dynamic, search)`` normalised image batches.

        ``dynamic`` is ignored for single-template configurations.
        """
        cfg = self.cfg
        nz, nx = cfg.n_template, cfg.n_search
        layout = SegmentLayout(nz, nz if cfg.dual_template else 0, nx)
        tok_r = self.tokenize(*rgb)
        tok_t = self.tokenize(*tir)
        batch = tok_r.shape[:-2]
        index = np.broadcast_to(np.arange(nx), batch + (nx,)).copy()
        st_r = ModalTokenState(tok_r, layout, index)
        st_t = ModalTokenState(tok_t, layout, index.copy())
        prune_at = set(cfg.active_prune_layers)
        bridge_at = list(cfg.active_tdtb_layers)
        counts = []
        for layer in range(1, cfg.depth + 1):
            counts.append(st_r.layout.n_search)
            x_r, a_r = self_attention_joint(st_r.tokens, self.blocks_rgb[layer - 1])
            x_t, a_t = self_attention_joint(st_t.tokens, self.blocks_tir[layer - 1])
            st_r = ModalTokenState(x_r, st_r.layout, st_r.spatial_index)
            st_t = ModalTokenState(x_t, st_t.layout, st_t.spatial_index)
            if layer in prune_at:
                rs, rd = template_search_corr(a_r.data, st_r.layout)
                ts, td = template_search_corr(a_t.data, st_t.layout)
                scores = variant_score(cfg.elimination_strategy, rs, rd, ts, td, cfg.ce_source)
                decision = prune(st_r, st_t, scores, cfg.keep_ratio)
                st_r = apply_decision(st_r, decision)
                st_t = apply_decision(st_t, decision)
            if layer in bridge_at:
                st_r, st_t = self._bridge(self.bridges[bridge_at.index(layer)], st_r, st_t)

        feats = []
        for st, norm in ((st_r, self.norm_rgb), (st_t, self.norm_tir)):
            x = norm(st.search())
            grid = T.scatter_rows(x, st.spatial_index, nx)
            feats.append(T.reshape(grid, batch + (cfg.grid, cfg.grid, cfg.dim)))
        return BackboneOutput(feats[0], feats[1], st_r.spatial_index, counts, st_r, st_t)

    @staticmethod
    def _bridge(module, st_r, st_t):
        lay = st_r.layout
        ns, nd = lay.n_static, lay.n_dynamic
        zr, zt = st_r.templates(), st_t.templates()
        z_r, z_t, x_r, x_t = tdtb_forward(
            module,
            zr[..., :ns, :], zr[..., ns:ns + nd, :],
            zt[..., :ns, :], zt[..., ns:ns + nd, :],
            st_r.search(), st_t.search())
        return (ModalTokenState(T.concat([z_r, x_r], axis=-2), lay, st_r.spatial_index),
                ModalTokenState(T.concat([z_t, x_t], axis=-2), lay, st_t.spatial_index))
