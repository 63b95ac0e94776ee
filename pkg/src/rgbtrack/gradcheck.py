"""Central finite-difference gradient checking."""
import numpy as np

from .tensor import Tape, backward


def numeric_grad(f, t, eps=1e-5, entries=None):
    """d f() / d t.data by central differences; ``f`` returns a scalar Tensor.

    ``entries`` restricts the probe to those flat indices (others stay 0).
    """
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        old = flat[i]
        flat[i] = old + eps
        hi = float(f().data)
        flat[i] = old - eps
        lo = float(f().data)
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def analytic_grads(f, tensors):
    for t in tensors:
        t.grad = None
    with Tape():
        loss = f()
    backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def rel_error(a, b, floor=1e-8):
    """max |a-b| / max(|a|, |b|, floor), elementwise-max over the array."""
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def norm_rel_error(a, b, floor=1e-6):
    """||a-b|| / max(||a||, ||b||, floor) over the whole array."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_grads(f, tensors, eps=1e-5, floor=1e-6, max_entries=None, seed=0, joint=False):
    """Worst relative error between tape and finite-difference gradients.

    Entries whose gradients are both below ``floor`` in magnitude count as
    agreeing; at that scale central differences are dominated by rounding.
    With ``max_entries`` each tensor is probed at that many randomly chosen
    coordinates instead of all of them.

    ``joint`` instead returns one norm-relative error over every probed entry
    of every tensor. Deep graphs have parameters whose gradients sit at the
    rounding floor of a central difference; this measures them against the
    gradient as a whole rather than against themselves.
    """
    ana = analytic_grads(f, tensors)
    rng = np.random.default_rng(seed)
    worst, all_a, all_n = 0.0, [], []
    for t, ga in zip(tensors, ana):
        n = t.data.size
        if max_entries is None or n <= max_entries:
            entries = None
        else:
            entries = np.sort(rng.choice(n, size=max_entries, replace=False))
        gn = numeric_grad(f, t, eps, entries)
        if entries is not None:
            ga, gn = ga.reshape(-1)[entries], gn.reshape(-1)[entries]
        all_a.append(np.ravel(ga))
        all_n.append(np.ravel(gn))
        worst = max(worst, rel_error(ga, gn, floor=floor))
    if joint:
        return norm_rel_error(np.concatenate(all_a), np.concatenate(all_n), floor)
    return worst
