# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; drop-in for ``rgbtrack._pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def softmax_fwd(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] y = out
    cdef double mx, s
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            y[i, j] = exp(x[i, j] - mx)
            s += y[i, j]
        s = 1.0 / s
        for j in range(m):
            y[i, j] *= s
    return out


def softmax_bwd(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] dx = out
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += g[i, j] * y[i, j]
        for j in range(m):
            dx[i, j] = y[i, j] * (g[i, j] - s)
    return out


def layernorm_fwd(const double[:, ::1] x, const double[::1] gamma,
                  const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], i, j
    out = np.empty((n, c))
    xh = np.empty((n, c))
    rs = np.empty(n)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xhat = xh
    cdef double[::1] rstd = rs
    cdef double mu, var, d, r
    for i in range(n):
        mu = 0.0
        for j in range(c):
            mu += x[i, j]
        mu /= c
        var = 0.0
        for j in range(c):
            d = x[i, j] - mu
            var += d * d
        var /= c
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(c):
            d = (x[i, j] - mu) * r
            xhat[i, j] = d
            y[i, j] = d * gamma[j] + beta[j]
    return out, xh, rs


def layernorm_bwd(const double[:, ::1] g, const double[:, ::1] xhat,
                  const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], i, j
    dx_a = np.empty((n, c))
    dg_a = np.zeros(c)
    db_a = np.zeros(c)
    cdef double[:, ::1] dx = dx_a
    cdef double[::1] dgamma = dg_a
    cdef double[::1] dbeta = db_a
    cdef double a, b, gx, f
    for i in range(n):
        a = 0.0
        b = 0.0
        for j in range(c):
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
            gx = g[i, j] * gamma[j]
            a += gx
            b += gx * xhat[i, j]
        f = rstd[i] / c
        for j in range(c):
            dx[i, j] = (g[i, j] * gamma[j] * c - a - xhat[i, j] * b) * f
    return dx_a, dg_a, db_a


def gelu_fwd(x):
    cdef const double[::1] xf = np.ascontiguousarray(x).reshape(-1)
    cdef Py_ssize_t n = xf.shape[0], i
    out = np.empty(n)
    cdef double[::1] y = out
    cdef double v
    for i in range(n):
        v = xf[i]
        y[i] = 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out.reshape(np.shape(x))


def gelu_bwd(x, g):
    cdef const double[::1] xf = np.ascontiguousarray(x).reshape(-1)
    cdef const double[::1] gf = np.ascontiguousarray(g).reshape(-1)
    cdef Py_ssize_t n = xf.shape[0], i
    out = np.empty(n)
    cdef double[::1] dx = out
    cdef double v, t, du
    for i in range(n):
        v = xf[i]
        t = tanh(GELU_C * (v + GELU_A * v * v * v))
        du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        dx[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return out.reshape(np.shape(x))


cdef inline bint _before(double sa, Py_ssize_t ia, double sb, Py_ssize_t ib):
    # descending score, ascending index on ties
    return sa > sb or (sa == sb and ia < ib)


def topk_sorted(const double[:, ::1] scores, Py_ssize_t k):
    cdef Py_ssize_t n = scores.shape[0], m = scores.shape[1]
    cdef Py_ssize_t r, i, j, pos, tmp
    out = np.empty((n, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    heap_a = np.empty(k, dtype=np.intp)
    cdef Py_ssize_t[::1] heap = heap_a
    cdef Py_ssize_t size, child, worst
    mark_a = np.zeros(m, dtype=np.uint8)
    cdef unsigned char[::1] mark = mark_a
    for r in range(n):
        # min-heap of the current top-k, root = weakest survivor
        size = 0
        for i in range(m):
            if size < k:
                heap[size] = i
                pos = size
                size += 1
                while pos > 0:
                    j = (pos - 1) // 2
                    if _before(scores[r, heap[j]], heap[j], scores[r, heap[pos]], heap[pos]):
                        tmp = heap[j]; heap[j] = heap[pos]; heap[pos] = tmp
                        pos = j
                    else:
                        break
            elif k > 0 and _before(scores[r, i], i, scores[r, heap[0]], heap[0]):
                heap[0] = i
                pos = 0
                while True:
                    child = 2 * pos + 1
                    if child >= size:
                        break
                    worst = child
                    if child + 1 < size and _before(scores[r, heap[child]], heap[child],
                                                    scores[r, heap[child + 1]], heap[child + 1]):
                        worst = child + 1
                    if _before(scores[r, heap[pos]], heap[pos], scores[r, heap[worst]], heap[worst]):
                        tmp = heap[pos]; heap[pos] = heap[worst]; heap[worst] = tmp
                        pos = worst
                    else:
                        break
        for i in range(m):
            mark[i] = 0
        for i in range(size):
            mark[heap[i]] = 1
        j = 0
        for i in range(m):
            if mark[i]:
                o[r, j] = i
                j += 1
    return out


def im2col3x3(const double[:, :, :, ::1] x):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t n, i, j, dy, dx, yy, xx, ch, base
    out = np.zeros((b, h, w, 9 * c))
    cdef double[:, :, :, ::1] o = out
    for n in range(b):
        for i in range(h):
            for j in range(w):
                for dy in range(3):
                    yy = i + dy - 1
                    if yy < 0 or yy >= h:
                        continue
                    for dx in range(3):
                        xx = j + dx - 1
                        if xx < 0 or xx >= w:
                            continue
                        base = (dy * 3 + dx) * c
                        for ch in range(c):
                            o[n, i, j, base + ch] = x[n, yy, xx, ch]
    return out


def col2im3x3(const double[:, :, :, ::1] cols, Py_ssize_t c):
    cdef Py_ssize_t b = cols.shape[0], h = cols.shape[1], w = cols.shape[2]
    cdef Py_ssize_t n, i, j, dy, dx, yy, xx, ch, base
    out = np.zeros((b, h, w, c))
    cdef double[:, :, :, ::1] o = out
    for n in range(b):
        for i in range(h):
            for j in range(w):
                for dy in range(3):
                    yy = i + dy - 1
                    if yy < 0 or yy >= h:
                        continue
                    for dx in range(3):
                        xx = j + dx - 1
                        if xx < 0 or xx >= w:
                            continue
                        base = (dy * 3 + dx) * c
                        for ch in range(c):
                            o[n, yy, xx, ch] += cols[n, i, j, base + ch]
    return out
