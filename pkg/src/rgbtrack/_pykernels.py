"""Numpy implementations of the hot kernels.

Same call signatures as the compiled ``_ckernels`` module. Every function
takes C-contiguous float64 arrays and returns fresh arrays.
"""
import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715


def softmax_fwd(x):
    """Row softmax over the last axis of a 2-D array."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, g):
    s = (g * y).sum(axis=1, keepdims=True)
    return y * (g - s)


def layernorm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0].copy()


def layernorm_bwd(g, xhat, rstd, gamma):
    c = xhat.shape[1]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    a = gx.sum(axis=1, keepdims=True)
    b = (gx * xhat).sum(axis=1, keepdims=True)
    dx = (gx * c - a - xhat * b) * (rstd[:, None] / c)
    return dx, dgamma, dbeta


def gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x ** 3)))


def gelu_bwd(x, g):
    u = GELU_C * (x + GELU_A * x ** 3)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def topk_sorted(scores, k):
    """Per row, indices of the k largest scores (ties -> lower index), ascending."""
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1).astype(np.int64)


def im2col3x3(x):
    """[B,H,W,C] -> [B,H,W,9C] zero-padded 3x3 neighbourhoods, (dy, dx, c) order."""
    b, h, w, c = x.shape
    p = np.zeros((b, h + 2, w + 2, c))
    p[:, 1:-1, 1:-1] = x
    cols = np.empty((b, h, w, 9, c))
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy * 3 + dx] = p[:, dy:dy + h, dx:dx + w]
    return cols.reshape(b, h, w, 9 * c)


def col2im3x3(cols, c):
    b, h, w, _ = cols.shape
    cols = cols.reshape(b, h, w, 9, c)
    p = np.zeros((b, h + 2, w + 2, c))
    for dy in range(3):
        for dx in range(3):
            p[:, dy:dy + h, dx:dx + w] += cols[:, :, :, dy * 3 + dx]
    return np.ascontiguousarray(p[:, 1:-1, 1:-1])
