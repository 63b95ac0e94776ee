"""Dual-template bridging between the RGB and thermal streams.

Static and dynamic templates of both modalities are fused into one bridge
sequence, which gathers context from the thermal search tokens, hands it to
the RGB search tokens, repeats in the opposite direction, and finally writes
the accumulated context back into each modality's templates.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ContractError
from .nn import MLP, Attention, LayerNorm, Linear, Module, mhca

STAGES = ("gather_tir", "spread_rgb", "gather_rgb", "spread_tir", "update_rgb", "update_tir")


class BridgeStage(Module):
    """Post-norm cross-attention block: LN(x + MHCA(x, y)) then LN(x' + MLP(x'))."""

    def __init__(self, rng, dim, num_heads, mlp_ratio):
        super().__init__()
        self.attn = Attention(rng, dim, num_heads)
        self.ln1 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, mlp_ratio)
        self.ln2 = LayerNorm(dim)


def bridge_stage(x, y, stage):
    h = stage.ln1(x + mhca(x, y, stage.attn))
    return stage.ln2(h + stage.mlp(h))


class TDTB(Module):
    def __init__(self, rng, dim, num_heads, mlp_ratio=4.0):
        super().__init__()
        self.dim = dim
        self.fuse = Linear(rng, 2 * dim, dim)
        for name in STAGES:
            setattr(self, name, BridgeStage(rng, dim, num_heads, mlp_ratio))

    def stages(self):
        return [getattr(self, n) for n in STAGES]


@dataclass
class BridgeIntermediates:
    z_static: T.Tensor
    z_dynamic: T.Tensor
    z_m: T.Tensor
    z_m1: T.Tensor
    z_m2: T.Tensor


def fuse_templates(z_rgb, z_tir, fuse):
    """Channel-concatenate paired template tokens and project 2C -> C."""
    if z_rgb.shape != z_tir.shape:
        raise ContractError(f"template shapes differ: {z_rgb.shape} vs {z_tir.shape}")
    return fuse(T.concat([z_rgb, z_tir], axis=-1))


def tdtb_forward(module, z_rgb_static, z_rgb_dyn, z_tir_static, z_tir_dyn, x_rgb, x_tir,
                 return_intermediates=False):
    """Returns ``(z_rgb', z_tir', x_rgb', x_tir')``; templates come back as
    ``[static; dynamic]`` along the token axis."""
    if x_rgb.shape != x_tir.shape:
        raise ContractError(f"search segments differ: {x_rgb.shape} vs {x_tir.shape}")
    z_static = fuse_templates(z_rgb_static, z_tir_static, module.fuse)
    z_dynamic = fuse_templates(z_rgb_dyn, z_tir_dyn, module.fuse)
    z_m = T.concat([z_static, z_dynamic], axis=-2)

    z_m1 = bridge_stage(z_m, x_tir, module.gather_tir)
    x_rgb_new = bridge_stage(x_rgb, z_m1, module.spread_rgb)
    z_m2 = bridge_stage(z_m1, x_rgb_new, module.gather_rgb)
    x_tir_new = bridge_stage(x_tir, z_m2, module.spread_tir)

    z_rgb = T.concat([z_rgb_static, z_rgb_dyn], axis=-2)
    z_tir = T.concat([z_tir_static, z_tir_dyn], axis=-2)
    z_rgb_new = bridge_stage(z_rgb, z_m2, module.update_rgb)
    z_tir_new = bridge_stage(z_tir, z_m2, module.update_tir)
    out = (z_rgb_new, z_tir_new, x_rgb_new, x_tir_new)
    if return_intermediates:
        return out, BridgeIntermediates(z_static, z_dynamic, z_m, z_m1, z_m2)
    return out
