"""Instance-instance spaces: shared backbone, residual conditional embeddings,
and per-condition squared-distance triplet gaps.

Embeddings are handled as row vectors, so the residual conditional embedding
is ``psi_k(x) = phi(x) + phi(x) @ L_k``; for a column vector this is the same
map as ``phi(x) + L_k.T phi(x)``. All K conditions share one backbone phi and
differ only through their projections L_k, which start at exactly zero so
every conditional space initially coincides with phi's.
"""

from dataclasses import dataclass

import numpy as np

from condsim.backend import kernels as K
from condsim.errors import ConfigError


@dataclass
class Backbone:
    """Two-layer MLP phi: R^dim_in -> R^dim with a ReLU hidden layer."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def dim_in(self):
        return self.w1.shape[1]

    @property
    def dim(self):
        return self.w2.shape[0]


@dataclass
class ConditionProjections:
    """K square projections stacked as L[k] in R^{d x d}, zero-initialized."""

    L: np.ndarray

    @property
    def n_conditions(self):
        return self.L.shape[0]

    @property
    def dim(self):
        return self.L.shape[1]


def embed_batch(backbone, x):
    if x.ndim != 2 or x.shape[1] != backbone.dim_in:
        raise ConfigError(
            f"backbone expects inputs of dimension {backbone.dim_in}, "
            f"got shape {x.shape}"
        )
    h = K.relu_fwd(K.affine_fwd(x, backbone.w1, backbone.b1))
    return K.affine_fwd(h, backbone.w2, backbone.b2)


def embed(backbone, x):
    """phi(x) for a single instance vector."""
    return embed_batch(backbone, np.asarray(x, dtype=np.float64)[None, :])[0]


def conditional_embed(e, L_k):
    """Residual conditional embedding psi_k(e) = e + e @ L_k."""
    e = np.asarray(e, dtype=np.float64)
    return K.residual_fwd(e[None, :], L_k)[0]


def cond_distance2(e1, e2, L_k):
    """Squared distance between two instances in condition space k."""
    p = K.residual_fwd(np.asarray([e1, e2], dtype=np.float64), L_k)
    delta = p[0] - p[1]
    return float(delta @ delta)


def triplet_diff(ex, ey, ez, L_k):
    """Dis^2(x, z) - Dis^2(x, y) in condition space k.

    Positive means the triplet is valid under k. Swapping y and z swaps the
    two distance terms, so the sign flips exactly (bit for bit).
    """
    return cond_distance2(ex, ez, L_k) - cond_distance2(ex, ey, L_k)


def diff_all(ex, ey, ez, projections):
    return np.array(
        [
            triplet_diff(ex, ey, ez, projections.L[k])
            for k in range(projections.n_conditions)
        ]
    )


def diff_all_batch(ex, ey, ez, L):
    """Per-condition triplet gaps for a batch: returns diffs[B, K]."""
    n_cond = L.shape[0]
    diffs = np.empty((ex.shape[0], n_cond))
    for k in range(n_cond):
        px = K.residual_fwd(ex, L[k])
        py = K.residual_fwd(ey, L[k])
        pz = K.residual_fwd(ez, L[k])
        diffs[:, k] = K.sqdist_diff_fwd(px, py, pz)
    return diffs
