"""Pure-numpy reference implementations of the hot kernels.

Semantics here are the contract; the numba backend mirrors them loop-for-loop.
Reduction order may differ between backends at float-noise level (pairwise vs
sequential summation); per-element outputs are identical.
"""

import numpy as np


def temporal_energy(x):
    """sum_t ||x_t - x_{t-1}||^2 with circular frame indexing."""
    d = x - np.roll(x, 1, axis=0)
    return float(np.sum(d * d))


def temporal_energy_grad(x):
    """Energy and its gradient: dE/dx_t = 2(2 x_t - x_{t-1} - x_{t+1})."""
    d = x - np.roll(x, 1, axis=0)
    energy = float(np.sum(d * d))
    grad = 2.0 * (d - np.roll(d, -1, axis=0))
    return energy, grad


def tv_smooth_energy(x, delta):
    """sum over forward spatial differences of sqrt(d^2 + delta^2)."""
    dh = x[:, 1:, :] - x[:, :-1, :]
    dw = x[:, :, 1:] - x[:, :, :-1]
    e = np.sqrt(dh * dh + delta * delta).sum() + np.sqrt(dw * dw + delta * delta).sum()
    return float(e)


def tv_smooth_energy_grad(x, delta):
    """Smoothed-TV energy and gradient, forward differences, free boundaries."""
    dh = x[:, 1:, :] - x[:, :-1, :]
    dw = x[:, :, 1:] - x[:, :, :-1]
    rh = np.sqrt(dh * dh + delta * delta)
    rw = np.sqrt(dw * dw + delta * delta)
    energy = float(rh.sum() + rw.sum())
    gh = dh / rh
    gw = dw / rw
    grad = np.zeros_like(x)
    grad[:, 1:, :] += gh
    grad[:, :-1, :] -= gh
    grad[:, :, 1:] += gw
    grad[:, :, :-1] -= gw
    return energy, grad


def tv_aniso(frame):
    """Anisotropic total variation of one 2-D frame: sum |dh| + sum |dw|."""
    return float(
        np.abs(frame[1:, :] - frame[:-1, :]).sum()
        + np.abs(frame[:, 1:] - frame[:, :-1]).sum()
    )


def maxpool2_fwd(x):
    """2x2 max-pool on (N, C, H, W); H, W even.

    Returns pooled values and the flat in-block argmax (0..3, row-major
    within the block). Ties take the first maximum, matching argmax.
    """
    n, c, h, w = x.shape
    blocks = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.uint8)


def maxpool2_bwd(gout, idx):
    """Route pooled gradients back to the argmax positions."""
    n, c, hh, ww = gout.shape
    gblocks = np.zeros((n, c, hh, ww, 4), dtype=gout.dtype)
    np.put_along_axis(gblocks, idx[..., None].astype(np.intp), gout[..., None], axis=-1)
    return (
        gblocks.reshape(n, c, hh, ww, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, hh * 2, ww * 2)
    )


def upsample2_fwd(x):
    """Nearest-neighbor 2x upsample on (N, C, H, W)."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_bwd(g):
    """Adjoint of nearest-neighbor 2x upsample: sum each 2x2 block.

    Fixed association order so both backends agree bitwise.
    """
    a = g[:, :, 0::2, 0::2]
    b = g[:, :, 0::2, 1::2]
    c = g[:, :, 1::2, 0::2]
    d = g[:, :, 1::2, 1::2]
    return ((a + b) + c) + d
