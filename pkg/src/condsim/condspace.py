"""Triplets-condition space: encode a triplet into a vector and score it
against learnable condition anchors.

The encoder consumes pairwise concatenations of the instance embeddings. The
``set2`` variant uses the two anchor pairs {[x,y], [x,z]} and is therefore
blind to the order of y and z (a triplet and its reversal encode identically);
``seq3`` adds [y,z] and is order-aware. Pairs are kept in construction order
so the elementwise max pooling is bitwise reproducible.
"""

from dataclasses import dataclass

import numpy as np

from condsim.backend import kernels as K
from condsim.errors import ConfigError

ENCODER_VARIANTS = ("set2", "seq3")


@dataclass
class SetEncoder:
    """Inner FC (affine+ReLU, 2d -> 2d), elementwise max over pairs, final FC
    (2d -> d) into anchor space."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    variant: str = "set2"

    @property
    def dim(self):
        return self.w2.shape[0]


@dataclass
class AnchorBank:
    """K learnable condition anchors plus the softmax temperature."""

    anchors: np.ndarray
    temperature: float = 1.0

    @property
    def n_conditions(self):
        return self.anchors.shape[0]

    @property
    def dim(self):
        return self.anchors.shape[1]


def pair_set(ex, ey, ez, variant):
    """Concatenated pair vectors for one triplet, in construction order."""
    if variant not in ENCODER_VARIANTS:
        raise ConfigError(f"unknown encoder variant: {variant!r}")
    ex = np.asarray(ex, dtype=np.float64)
    ey = np.asarray(ey, dtype=np.float64)
    ez = np.asarray(ez, dtype=np.float64)
    pairs = [np.concatenate([ex, ey]), np.concatenate([ex, ez])]
    if variant == "seq3":
        pairs.append(np.concatenate([ey, ez]))
    return pairs


def pair_stack_batch(ex, ey, ez, variant):
    """Batched pairs as an array H[P, B, 2d]."""
    if variant not in ENCODER_VARIANTS:
        raise ConfigError(f"unknown encoder variant: {variant!r}")
    stacks = [np.hstack([ex, ey]), np.hstack([ex, ez])]
    if variant == "seq3":
        stacks.append(np.hstack([ey, ez]))
    return np.ascontiguousarray(np.stack(stacks, axis=0))


def encode_batch(encoder, pairs):
    if pairs.shape[0] == 0:
        raise ConfigError("encode requires a nonempty pair set")
    hidden = np.stack(
        [
            K.relu_fwd(K.affine_fwd(pairs[p], encoder.w1, encoder.b1))
            for p in range(pairs.shape[0])
        ],
        axis=0,
    )
    pooled, _ = K.maxpool_fwd(hidden)
    return K.affine_fwd(pooled, encoder.w2, encoder.b2)


def encode(encoder, pairs):
    """g(tau): inner FC per pair, elementwise max across pairs, final FC."""
    if len(pairs) == 0:
        raise ConfigError("encode requires a nonempty pair set")
    stacked = np.stack([np.asarray(p, dtype=np.float64)[None, :] for p in pairs])
    return encode_batch(encoder, stacked)[0]


def condition_weights_batch(g, bank):
    sims = K.cosine_fwd(g, bank.anchors)
    return K.softmax_fwd(sims, bank.temperature)


def condition_weights(g, bank):
    """Condition distribution of one encoded triplet against the anchors."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (bank.dim,):
        raise ConfigError(
            f"encoded triplet has dimension {g.shape}, anchors expect {bank.dim}"
        )
    return condition_weights_batch(g[None, :], bank)[0]
