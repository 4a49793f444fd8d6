"""Model assembly: one ParamStore plus views onto its named tensors.

Four variants share this container:

  - ``supervised``: backbone + projections, trained with the labeled
    indicator objective; no condition space.
  - ``disc_set``: order-invariant set encoder (set2), expected-gap objective.
  - ``disc_reg``: order-aware encoder (seq3) plus the gated overlap
    regularizer on reversed-triplet condition distributions.
  - ``fusion``: seq3 encoder with no regularizer; the too-flexible baseline.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from condsim.condspace import AnchorBank, SetEncoder, condition_weights_batch, \
    encode_batch, pair_stack_batch
from condsim.embeddings import Backbone, ConditionProjections, diff_all_batch, \
    embed_batch
from condsim.errors import ConfigError, DataError
from condsim.numcore import ParamStore

VARIANTS = ("disc_set", "disc_reg", "supervised", "fusion")
ENCODER_BY_VARIANT = {
    "disc_set": "set2",
    "disc_reg": "seq3",
    "fusion": "seq3",
    "supervised": None,
}


@dataclass
class Model:
    params: ParamStore
    variant: str
    n_conditions: int
    dim_in: int
    dim: int
    hidden: int
    temperature: float
    encoder: Optional[str]

    def backbone(self):
        # no output bias: a uniform shift of all embeddings is invisible to
        # every distance term and exactly absorbable by the encoder bias, so
        # it would be an untrainable direction (and an untestable gradient)
        p = self.params
        w2 = p.param("backbone.w2")
        return Backbone(
            p.param("backbone.w1"),
            p.param("backbone.b1"),
            w2,
            np.zeros(w2.shape[0]),
        )

    def projections(self):
        return ConditionProjections(self.params.param("proj.L"))

    def set_encoder(self):
        if self.encoder is None:
            raise ConfigError(f"variant {self.variant!r} has no set encoder")
        p = self.params
        return SetEncoder(
            p.param("enc.w1"),
            p.param("enc.b1"),
            p.param("enc.w2"),
            p.param("enc.b2"),
            variant=self.encoder,
        )

    def anchor_bank(self):
        if self.encoder is None:
            raise ConfigError(f"variant {self.variant!r} has no anchors")
        return AnchorBank(self.params.param("anchors.a"), self.temperature)

    def copy(self):
        return Model(
            params=self.params.copy(),
            variant=self.variant,
            n_conditions=self.n_conditions,
            dim_in=self.dim_in,
            dim=self.dim,
            hidden=self.hidden,
            temperature=self.temperature,
            encoder=self.encoder,
        )


def init_model(
    variant,
    n_conditions,
    dim_in,
    dim=64,
    hidden=None,
    temperature=1.0,
    seed=0,
    encoder=None,
):
    """Seeded initialization.

    FC weights are N(0, 1/sqrt(fan_in)), biases zero. Projections start at
    exactly zero so all condition spaces coincide with the backbone's; the
    anchors (N(0, 1/sqrt(d))) carry the initial symmetry breaking.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant: {variant!r}")
    if n_conditions < 1:
        raise ConfigError("n_conditions must be >= 1")
    if not temperature > 0.0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if encoder is None:
        encoder = ENCODER_BY_VARIANT[variant]
    if hidden is None:
        hidden = dim

    rng = np.random.default_rng(seed)
    params = ParamStore(seed)
    params.add("backbone.w1", rng.standard_normal((hidden, dim_in)) / np.sqrt(dim_in))
    params.add("backbone.b1", np.zeros(hidden))
    params.add("backbone.w2", rng.standard_normal((dim, hidden)) / np.sqrt(hidden))
    params.add("proj.L", np.zeros((n_conditions, dim, dim)))
    if encoder is not None:
        params.add("anchors.a", rng.standard_normal((n_conditions, dim)) / np.sqrt(dim))
        two_d = 2 * dim
        params.add("enc.w1", rng.standard_normal((two_d, two_d)) / np.sqrt(two_d))
        params.add("enc.b1", np.zeros(two_d))
        params.add("enc.w2", rng.standard_normal((dim, two_d)) / np.sqrt(two_d))
        params.add("enc.b2", np.zeros(dim))
    return Model(
        params=params,
        variant=variant,
        n_conditions=n_conditions,
        dim_in=dim_in,
        dim=dim,
        hidden=hidden,
        temperature=temperature,
        encoder=encoder,
    )


def gather_embeddings(model, world, xs, ys, zs):
    """phi for the anchors, targets and impostors of an index batch."""
    idx = np.concatenate([xs, ys, zs])
    e = embed_batch(model.backbone(), world.x[idx])
    n = xs.shape[0]
    return e[:n], e[n : 2 * n], e[2 * n :]


def score_diffs(model, world, xs, ys, zs):
    """Per-condition triplet gaps diffs[B, K] under frozen parameters."""
    ex, ey, ez = gather_embeddings(model, world, xs, ys, zs)
    return diff_all_batch(ex, ey, ez, model.params.param("proj.L"))


def score_weights(model, world, xs, ys, zs):
    """Condition distributions w[B, K] under frozen parameters."""
    ex, ey, ez = gather_embeddings(model, world, xs, ys, zs)
    enc = model.set_encoder()
    g = encode_batch(enc, pair_stack_batch(ex, ey, ez, enc.variant))
    return condition_weights_batch(g, model.anchor_bank())


def score_dataset(model, dataset):
    """(diffs, weights-or-None, cond-or-None) for a whole TripletDataset."""
    if dataset.world.dim != model.dim_in:
        raise ConfigError(
            f"model expects instances of dimension {model.dim_in}, "
            f"dataset has {dataset.world.dim}"
        )
    if len(dataset) == 0:
        raise DataError("empty triplet dataset")
    xs, ys, zs, cond = dataset.index_arrays()
    ex, ey, ez = gather_embeddings(model, dataset.world, xs, ys, zs)
    diffs = diff_all_batch(ex, ey, ez, model.params.param("proj.L"))
    weights = None
    if model.encoder is not None:
        enc = model.set_encoder()
        g = encode_batch(enc, pair_stack_batch(ex, ey, ez, enc.variant))
        weights = condition_weights_batch(g, model.anchor_bank())
    return diffs, weights, cond
