"""Numba-compiled kernels, loop-for-loop mirrors of numpy_impl.

No fastmath and no parallel: per-element results must be bit-identical to the
reference backend; only reduction order (hence energy sums at float-noise
level) may differ.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def temporal_energy(x):
    t, h, w = x.shape
    acc = 0.0
    for i in range(t):
        p = i - 1 if i > 0 else t - 1
        for r in range(h):
            for c in range(w):
                d = x[i, r, c] - x[p, r, c]
                acc += d * d
    return acc


@njit(cache=True)
def temporal_energy_grad(x):
    t, h, w = x.shape
    grad = np.empty_like(x)
    acc = 0.0
    for i in range(t):
        p = i - 1 if i > 0 else t - 1
        n = i + 1 if i < t - 1 else 0
        for r in range(h):
            for c in range(w):
                d = x[i, r, c] - x[p, r, c]
                acc += d * d
                grad[i, r, c] = 2.0 * ((x[i, r, c] - x[p, r, c]) - (x[n, r, c] - x[i, r, c]))
    return acc, grad


@njit(cache=True)
def tv_smooth_energy(x, delta):
    t, h, w = x.shape
    d2 = delta * delta
    acc = 0.0
    for i in range(t):
        for r in range(h - 1):
            for c in range(w):
                d = x[i, r + 1, c] - x[i, r, c]
                acc += np.sqrt(d * d + d2)
        for r in range(h):
            for c in range(w - 1):
                d = x[i, r, c + 1] - x[i, r, c]
                acc += np.sqrt(d * d + d2)
    return acc


@njit(cache=True)
def tv_smooth_energy_grad(x, delta):
    t, h, w = x.shape
    d2 = delta * delta
    grad = np.zeros_like(x)
    acc = 0.0
    for i in range(t):
        for r in range(h - 1):
            for c in range(w):
                d = x[i, r + 1, c] - x[i, r, c]
                root = np.sqrt(d * d + d2)
                acc += root
                g = d / root
                grad[i, r + 1, c] += g
                grad[i, r, c] -= g
        for r in range(h):
            for c in range(w - 1):
                d = x[i, r, c + 1] - x[i, r, c]
                root = np.sqrt(d * d + d2)
                acc += root
                g = d / root
                grad[i, r, c + 1] += g
                grad[i, r, c] -= g
    return acc, grad


@njit(cache=True)
def tv_aniso(frame):
    h, w = frame.shape
    acc = 0.0
    for r in range(h - 1):
        for c in range(w):
            acc += abs(frame[r + 1, c] - frame[r, c])
    for r in range(h):
        for c in range(w - 1):
            acc += abs(frame[r, c + 1] - frame[r, c])
    return acc


@njit(cache=True)
def maxpool2_fwd(x):
    n, ch, h, w = x.shape
    hh, ww = h // 2, w // 2
    out = np.empty((n, ch, hh, ww), dtype=x.dtype)
    idx = np.empty((n, ch, hh, ww), dtype=np.uint8)
    for i in range(n):
        for c in range(ch):
            for r in range(hh):
                for q in range(ww):
                    best = x[i, c, 2 * r, 2 * q]
                    bi = 0
                    k = 1
                    for dr in range(2):
                        for dq in range(2):
                            if dr == 0 and dq == 0:
                                continue
                            v = x[i, c, 2 * r + dr, 2 * q + dq]
                            # strict >: ties keep the earlier block position
                            if v > best:
                                best = v
                                bi = 2 * dr + dq
                            k += 1
                    out[i, c, r, q] = best
                    idx[i, c, r, q] = bi
    return out, idx


@njit(cache=True)
def maxpool2_bwd(gout, idx):
    n, ch, hh, ww = gout.shape
    g = np.zeros((n, ch, hh * 2, ww * 2), dtype=gout.dtype)
    for i in range(n):
        for c in range(ch):
            for r in range(hh):
                for q in range(ww):
                    b = idx[i, c, r, q]
                    g[i, c, 2 * r + b // 2, 2 * q + b % 2] = gout[i, c, r, q]
    return g


@njit(cache=True)
def upsample2_fwd(x):
    n, ch, h, w = x.shape
    out = np.empty((n, ch, 2 * h, 2 * w), dtype=x.dtype)
    for i in range(n):
        for c in range(ch):
            for r in range(2 * h):
                for q in range(2 * w):
                    out[i, c, r, q] = x[i, c, r // 2, q // 2]
    return out


@njit(cache=True)
def upsample2_bwd(g):
    n, ch, h, w = g.shape
    out = np.zeros((n, ch, h // 2, w // 2), dtype=g.dtype)
    for i in range(n):
        for c in range(ch):
            for r in range(h):
                for q in range(w):
                    out[i, c, r // 2, q // 2] += g[i, c, r, q]
    return out
