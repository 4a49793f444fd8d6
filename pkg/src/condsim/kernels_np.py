"""Vectorized numpy kernels: the reference backend.

Every function here has a compiled twin in ``condsim._speedups`` with the same
signature and (up to floating-point rounding inside BLAS) the same numerics.
Forward kernels take batches as rows; backward kernels consume the upstream
gradient and return gradients for every differentiable input, in input order.

Conventions:
  - all arrays are C-contiguous float64,
  - affine weights are stored ``w[m, n]`` with ``y = x @ w.T + b``,
  - condition projections act on row embeddings as ``e + e @ L`` (for a
    column vector this is ``e + L.T e``).
"""

import numpy as np

COSINE_EPS = 1e-12


def affine_fwd(x, w, b):
    return x @ w.T + b


def affine_bwd(gy, x, w):
    gx = gy @ w
    gw = gy.T @ x
    gb = gy.sum(axis=0)
    return gx, gw, gb


def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_bwd(gy, x):
    # subgradient at 0 is 0
    return np.where(x > 0.0, gy, 0.0)


def residual_fwd(e, L):
    return e + e @ L


def residual_bwd(gpsi, e, L):
    ge = gpsi + gpsi @ L.T
    gL = e.T @ gpsi
    return ge, gL


def sqdist_diff_fwd(px, py, pz):
    """Row-wise ||px - pz||^2 - ||px - py||^2.

    The two squared distances are evaluated independently and subtracted, so
    swapping py and pz negates the result exactly (same floats, reordered).
    """
    dxz = px - pz
    dxy = px - py
    return np.einsum("ij,ij->i", dxz, dxz) - np.einsum("ij,ij->i", dxy, dxy)


def sqdist_diff_bwd(g, px, py, pz):
    gcol = g[:, None]
    gpy = 2.0 * gcol * (px - py)
    gpz = -2.0 * gcol * (px - pz)
    gpx = -(gpy + gpz)
    return gpx, gpy, gpz


def maxpool_fwd(h):
    """Elementwise max over the leading (pair) axis of ``h[P, B, m]``.

    Returns the pooled array and the argmax indices (ties -> lowest index),
    which the backward pass uses to route gradients.
    """
    arg = np.argmax(h, axis=0)
    pooled = np.take_along_axis(h, arg[None], axis=0)[0]
    return pooled, arg


def maxpool_bwd(gm, arg, n_pairs):
    gh = np.zeros((n_pairs,) + gm.shape, dtype=np.float64)
    np.put_along_axis(gh, arg[None], gm[None], axis=0)
    return gh


def cosine_fwd(g, a):
    """Cosine similarity of every row of ``g[B, d]`` with every row of ``a[K, d]``.

    Norms are guarded with ``COSINE_EPS`` so zero vectors never divide by zero.
    """
    rg = np.sqrt(np.einsum("ij,ij->i", g, g))
    ra = np.sqrt(np.einsum("ij,ij->i", a, a))
    return (g @ a.T) / ((rg[:, None] + COSINE_EPS) * (ra[None, :] + COSINE_EPS))


def cosine_bwd(gs, g, a):
    rg = np.sqrt(np.einsum("ij,ij->i", g, g))
    ra = np.sqrt(np.einsum("ij,ij->i", a, a))
    ng = rg + COSINE_EPS
    na = ra + COSINE_EPS
    s = (g @ a.T) / (ng[:, None] * na[None, :])
    scaled = gs / (ng[:, None] * na[None, :])
    # derivative of the guarded norm is u / raw_norm; at a zero vector the
    # similarity is identically 0 so the norm term gets subgradient 0
    inv_rg = np.where(rg > 0.0, 1.0 / (ng * np.where(rg > 0.0, rg, 1.0)), 0.0)
    inv_ra = np.where(ra > 0.0, 1.0 / (na * np.where(ra > 0.0, ra, 1.0)), 0.0)
    gg = scaled @ a - ((gs * s).sum(axis=1) * inv_rg)[:, None] * g
    ga = scaled.T @ g - ((gs * s).sum(axis=0) * inv_ra)[:, None] * a
    return gg, ga


def softmax_fwd(s, temp):
    z = s / temp
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(gp, p, temp):
    inner = (gp * p).sum(axis=1, keepdims=True)
    return p * (gp - inner) / temp
