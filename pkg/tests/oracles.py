"""Slow, obviously-correct reference implementations used as test oracles."""

import math

import numpy as np


def naive_conv(x, w, stride=1, pad=0):
    """Six nested loops over batch, output channel, output row/col and kernel taps."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(ci):
                        for di in range(kh):
                            for dj in range(kw):
                                r, q = i * stride + di - pad, j * stride + dj - pad
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += float(x[b, ch, r, q]) * float(w[o, ch, di, dj])
                    out[b, o, i, j] = acc
    return out


def naive_and_dot(a, b):
    return sum(int(x) & int(y) for x, y in zip(a, b))


def naive_pm1_dot(a, b):
    """a, b are {0,1} with 1 meaning +1 and 0 meaning -1."""
    return sum((1 if x else -1) * (1 if y else -1) for x, y in zip(a, b))


def naive_piece(w, u):
    """Scan the intervals one by one (0-based ids, -1 = dead zone)."""
    M = len(u)
    half = M // 2
    if w < u[0]:
        return 0
    for i in range(1, half):
        if u[i - 1] <= w < u[i]:
            return i
    if u[half - 1] <= w < u[half]:
        return -1
    for i in range(half, M - 1):
        if u[i] <= w < u[i + 1]:
            return i
    return M - 1


def scan_minimizer(values, step=1e-4):
    """Grid search for argmin_c sum (v - c)^2 over [min, max]."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    grid = np.arange(lo, hi + step, step)
    # sum (v-c)^2 = sum v^2 - 2c sum v + n c^2
    cost = (v ** 2).sum() - 2 * grid * v.sum() + v.size * grid ** 2
    return float(grid[np.argmin(cost)])


def naive_activation(a, v, beta):
    if a < v[0]:
        return 0.0
    for i in range(len(v) - 1):
        if v[i] <= a < v[i + 1]:
            return float(beta[i])
    return float(beta[-1])


def central_difference(f, x, eps=1e-3):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        g.flat[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def round_half_away(x):
    return math.copysign(math.floor(abs(x) + 0.5), x)
