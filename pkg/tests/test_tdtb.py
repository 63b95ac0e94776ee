import numpy as np
import pytest

from rgbtrack import tdtb as tdtb_mod
from rgbtrack import nn
from rgbtrack.errors import ContractError
from rgbtrack.gradcheck import check_grads
from rgbtrack.tdtb import STAGES, TDTB, bridge_stage, fuse_templates, tdtb_forward
from rgbtrack.tensor import Tensor, make_rng

from test_nn import oracle_attention, randomise


def ln(x, p):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + p.eps) * p.gamma.data + p.beta.data


def gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def mlp(x, m):
    return gelu(x @ m.fc1.weight.data + m.fc1.bias.data) @ m.fc2.weight.data + m.fc2.bias.data


def stage_oracle(x, y, s):
    h = ln(x + oracle_attention(x, y, s.attn), s.ln1)
    return ln(h + mlp(h, s.mlp), s.ln2)


def bridge_oracle(mod, zrs, zrd, zts, ztd, xr, xt):
    w, b = mod.fuse.weight.data, mod.fuse.bias.data
    z_static = np.concatenate([zrs, zts], 1) @ w + b
    z_dynamic = np.concatenate([zrd, ztd], 1) @ w + b
    z_m = np.concatenate([z_static, z_dynamic], 0)
    z_m1 = stage_oracle(z_m, xt, mod.gather_tir)
    xr1 = stage_oracle(xr, z_m1, mod.spread_rgb)
    z_m2 = stage_oracle(z_m1, xr1, mod.gather_rgb)
    xt1 = stage_oracle(xt, z_m2, mod.spread_tir)
    zr1 = stage_oracle(np.concatenate([zrs, zrd]), z_m2, mod.update_rgb)
    zt1 = stage_oracle(np.concatenate([zts, ztd]), z_m2, mod.update_tir)
    return zr1, zt1, xr1, xt1


def make_inputs(rng, nz=2, ns=3, c=8):
    return [rng.normal(size=(nz, c)) for _ in range(4)] + [rng.normal(size=(ns, c)) for _ in range(2)]


def test_matches_straight_line_oracle(rng):
    mod = TDTB(make_rng(0), 8, 2, mlp_ratio=2.0)
    randomise(mod, rng)
    for s in mod.stages():
        for norm in (s.ln1, s.ln2):
            norm.gamma.data = 1 + 0.1 * norm.gamma.data
    args = make_inputs(rng)
    got = tdtb_forward(mod, *map(Tensor, args))
    want = bridge_oracle(mod, *args)
    for g, w in zip(got, want):
        assert g.shape == w.shape
        assert np.max(np.abs(g.data - w)) < 1e-10


def test_six_cross_attention_calls(monkeypatch, rng):
    calls = []
    real = tdtb_mod.mhca

    def counting(x, y, attn):
        calls.append(attn)
        return real(x, y, attn)
    monkeypatch.setattr(tdtb_mod, "mhca", counting)
    mod = TDTB(make_rng(0), 8, 2)
    tdtb_forward(mod, *map(Tensor, make_inputs(rng)))
    assert len(calls) == 6
    assert len({id(a) for a in calls}) == 6


def test_stage_parameters_are_disjoint():
    mod = TDTB(make_rng(0), 8, 2)
    ids = [{id(p) for p in s.parameters()} for s in mod.stages()]
    assert sum(len(s) for s in ids) == len(set().union(*ids))
    assert [n for n in STAGES] == ["gather_tir", "spread_rgb", "gather_rgb", "spread_tir",
                                   "update_rgb", "update_tir"]


def test_token_counts_preserved(rng):
    mod = TDTB(make_rng(0), 8, 2)
    out = tdtb_forward(mod, *map(Tensor, make_inputs(rng, nz=3, ns=5)))
    assert [o.shape for o in out] == [(6, 8), (6, 8), (5, 8), (5, 8)]


def test_intermediates(rng):
    mod = TDTB(make_rng(0), 8, 2)
    _, inter = tdtb_forward(mod, *map(Tensor, make_inputs(rng)), return_intermediates=True)
    assert np.array_equal(inter.z_m.data, np.concatenate([inter.z_static.data, inter.z_dynamic.data]))
    assert inter.z_m1.shape == inter.z_m2.shape == (4, 8)


def test_fuse_examples(rng):
    c = 4
    fuse = nn.Linear(make_rng(0), 2 * c, c)
    a, b = rng.normal(size=(3, c)), rng.normal(size=(3, c))
    fuse.weight.data = np.vstack([np.eye(c), np.zeros((c, c))])
    assert np.allclose(fuse_templates(Tensor(a), Tensor(b), fuse).data, a)
    fuse.weight.data = np.vstack([np.eye(c), np.eye(c)])
    assert np.allclose(fuse_templates(Tensor(a), Tensor(b), fuse).data, a + b)
    fuse.weight.data = rng.normal(size=(2 * c, c))
    fuse.bias.data = rng.normal(size=c)
    batched = fuse_templates(Tensor(a), Tensor(b), fuse).data
    for i in range(3):
        row = np.concatenate([a[i], b[i]]) @ fuse.weight.data + fuse.bias.data
        assert np.max(np.abs(batched[i] - row)) < 1e-12
    with pytest.raises(ContractError):
        fuse_templates(Tensor(a), Tensor(b[:2]), fuse)


def zero_residual(stage):
    for lin in (stage.attn.out, stage.mlp.fc2):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0


def test_zero_residual_limit(rng):
    mod = TDTB(make_rng(0), 8, 2)
    for s in mod.stages():
        zero_residual(s)
    args = make_inputs(rng)
    zr, zt, xr, xt = tdtb_forward(mod, *map(Tensor, args))
    norm = lambda x: ln(ln(x, mod.gather_tir.ln1), mod.gather_tir.ln2)
    assert np.allclose(xr.data, norm(args[4]), atol=1e-12)
    assert np.allclose(xt.data, norm(args[5]), atol=1e-12)
    assert np.allclose(zr.data, norm(np.concatenate(args[0:2])), atol=1e-12)
    assert np.allclose(zt.data, norm(np.concatenate(args[2:4])), atol=1e-12)


def test_relabelling_symmetry_with_order_neutral_exchange(rng):
    """Exchanging the modalities everywhere exchanges the outputs.

    Inputs, fusion halves and every RGB/TIR-bound stage are swapped. The two
    gather stages run in a fixed order, so exact symmetry needs the exchange
    stages to be residual-free and the gather norms to agree; the write-back
    stages keep their random weights.
    """
    c = 8
    mod = TDTB(make_rng(0), c, 2)
    randomise(mod, rng)
    for s in mod.stages()[:4]:
        zero_residual(s)
    for a, b in ((mod.gather_tir.ln1, mod.gather_rgb.ln1), (mod.gather_tir.ln2, mod.gather_rgb.ln2)):
        b.gamma.data, b.beta.data = a.gamma.data.copy(), a.beta.data.copy()
    swapped = TDTB(make_rng(0), c, 2)
    w = mod.fuse.weight.data
    swapped.fuse.weight.data = np.vstack([w[c:], w[:c]])
    swapped.fuse.bias.data = mod.fuse.bias.data.copy()
    pairs = {"gather_tir": "gather_rgb", "spread_rgb": "spread_tir", "update_rgb": "update_tir"}
    pairs.update({v: k for k, v in pairs.items()})
    for src, dst in pairs.items():
        for (_, p), (_, q) in zip(getattr(mod, src).named_parameters(),
                                  getattr(swapped, dst).named_parameters()):
            q.data = p.data.copy()
    zrs, zrd, zts, ztd, xr, xt = map(Tensor, make_inputs(rng))
    a = tdtb_forward(mod, zrs, zrd, zts, ztd, xr, xt)
    b = tdtb_forward(swapped, zts, ztd, zrs, zrd, xt, xr)
    for i, j in ((0, 1), (1, 0), (2, 3), (3, 2)):
        assert np.allclose(a[i].data, b[j].data, atol=1e-12)


def test_bridge_stage_shape_and_grad(rng):
    stage = TDTB(make_rng(0), 8, 2, mlp_ratio=2.0).gather_tir
    randomise(stage, rng)
    x, y = Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(3, 8)))
    assert bridge_stage(x, y, stage).shape == (2, 8)
    w = rng.normal(size=(2, 8))
    assert check_grads(lambda: (bridge_stage(x, y, stage) * w).sum(), stage.parameters()) < 1e-4


def test_unequal_search_lengths_rejected(rng):
    mod = TDTB(make_rng(0), 8, 2)
    args = list(map(Tensor, make_inputs(rng)))
    args[5] = Tensor(rng.normal(size=(4, 8)))
    with pytest.raises(ContractError):
        tdtb_forward(mod, *args)
