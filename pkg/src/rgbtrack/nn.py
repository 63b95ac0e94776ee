"""Transformer building blocks on top of :mod:`rgbtrack.tensor`.

All sequence tensors are ``[..., N, C]``; leading axes are batch axes.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor, parameter, trunc_normal


class Module:
    """Ordered container of parameters and sub-modules.

    Assignment order fixes parameter order, which fixes both RNG
    consumption and checkpoint layout.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            self._children[name] = ModuleList(value)
            value = self._children[name]
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, items):
        super().__init__()
        object.__setattr__(self, "_items", list(items))
        for i, m in enumerate(self._items):
            self._children[str(i)] = m

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = parameter(trunc_normal(rng, (d_in, d_out)))
        if bias:
            self.bias = parameter(np.zeros(d_out))
        else:
            self.bias = None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, rng, dim, ratio):
        super().__init__()
        self.fc1 = Linear(rng, dim, int(dim * ratio))
        self.fc2 = Linear(rng, int(dim * ratio), dim)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class Attention(Module):
    """Query/key/value/output projections of one multi-head attention."""

    def __init__(self, rng, dim, num_heads):
        super().__init__()
        if dim % num_heads:
            raise ContractError(f"width {dim} not divisible by {num_heads} heads")
        self.dim, self.num_heads = dim, num_heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)


def _split_heads(x, h):
    *lead, n, c = x.shape
    return T.swapaxes(T.reshape(x, tuple(lead) + (n, h, c // h)), -2, -3)


def _merge_heads(x):
    *lead, h, n, d = x.shape
    return T.reshape(T.swapaxes(x, -2, -3), tuple(lead) + (n, h * d))


def attend(x, y, attn):
    """Multi-head attention of queries from ``x`` over keys/values from ``y``.

    Returns the output-projected result and the post-softmax map
    ``[..., heads, Nq, Nk]``.
    """
    if x.shape[-1] != attn.dim or y.shape[-1] != attn.dim:
        raise ContractError(f"attention width mismatch: {x.shape[-1]}, {y.shape[-1]} vs {attn.dim}")
    h = attn.num_heads
    q = _split_heads(attn.q(x) * (1.0 / math.sqrt(attn.dim // h)), h)
    k = _split_heads(attn.k(y), h)
    v = _split_heads(attn.v(y), h)
    a = T.softmax_rows(T.matmul(q, T.swapaxes(k, -1, -2)))
    return attn.out(_merge_heads(T.matmul(a, v))), a


def mhca(x, y, attn):
    """Cross attention, key == value source; residual and norm are the caller's."""
    return attend(x, y, attn)[0]


class MHABlock(Module):
    """Pre-norm transformer block: x + attn(LN x), then x + MLP(LN x)."""

    def __init__(self, rng, dim, num_heads, mlp_ratio=4.0):
        super().__init__()
        self.dim, self.num_heads = dim, num_heads
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, num_heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, mlp_ratio)


def self_attention_joint(tokens, block):
    """Run one pre-norm block; also return the attention map it used."""
    h = block.ln1(tokens)
    a_out, amap = attend(h, h, block.attn)
    x = tokens + a_out
    x = x + block.mlp(block.ln2(x))
    return x, amap


class PatchEmbed(Module):
    """Shared patch projection with separate learned position tables.

    Dynamic templates reuse the template table.
    """

    def __init__(self, rng, patch, dim, template_size, search_size):
        super().__init__()
        for s in (template_size, search_size):
            if s % patch:
                raise ContractError(f"image size {s} not divisible by patch {patch}")
        self.patch = patch
        self.n_template = (template_size // patch) ** 2
        self.n_search = (search_size // patch) ** 2
        self.proj = Linear(rng, 3 * patch * patch, dim)
        self.pos_template = parameter(trunc_normal(rng, (self.n_template, dim)))
        self.pos_search = parameter(trunc_normal(rng, (self.n_search, dim)))


def patchify(image, patch):
    """[..., H, W, 3] -> [..., N, 3P^2], patches row-major, pixels (y, x, c) inside."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim >= 3 and image.shape[-1] == 1:
        image = image[..., 0]
    if image.ndim == 2 or image.shape[-1] != 3:
        image = np.repeat(image[..., None], 3, axis=-1)
    *lead, h, w, c = image.shape
    if h % patch or w % patch:
        raise ContractError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(tuple(lead) + (gh, patch, gw, patch, c))
    nl = len(lead)
    x = x.transpose(tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
    return np.ascontiguousarray(x.reshape(tuple(lead) + (gh * gw, patch * patch * c)))


def patch_embed(image, kind, embed):
    """Tokenise an image with the shared projection plus its kind's positions.

    Single-channel (thermal) input is replicated to three channels.
    """
    if kind not in ("template", "search"):
        raise ContractError(f"unknown patch kind {kind!r}")
    patches = patchify(image, embed.patch)
    pos = embed.pos_template if kind == "template" else embed.pos_search
    if patches.shape[-2] != pos.shape[0]:
        raise ContractError(
            f"{kind} image gives {patches.shape[-2]} patches, position table has {pos.shape[0]}")
    return embed.proj(Tensor(patches)) + pos
