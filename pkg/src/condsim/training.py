"""Objectives and training loops.

The weakly supervised variants score each triplet with the expectation of its
per-condition gaps under the triplet's condition distribution, then apply a
margin or logistic loss to (expected gap - margin). The supervised variant
selects the gap of the labeled condition instead. ``disc_reg`` adds a gated
penalty on the overlap (histogram intersection) between the condition
distributions of a triplet and its reversal; the gate checks, with gradients
blocked, that the model currently scores both orientations as valid.

All gradients are hand-written reverse mode; ``numcore.grad_check`` is the
oracle that verifies every composition in the test suite.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from condsim import aligneval
from condsim.backend import kernels as K
from condsim.errors import ConfigError, DataError, DivergenceError
from condsim.model import VARIANTS, init_model
from condsim.numcore import make_optimizer, sigmoid_vec

LOSSES = ("margin", "logistic")
GATE_MODES = ("fused", "argmax")

# members of a pair, indexed into (anchor, target, impostor)
PAIR_LAYOUT = {
    "set2": ((0, 1), (0, 2)),
    "seq3": ((0, 1), (0, 2), (1, 2)),
    "seq3_reversed": ((0, 2), (0, 1), (2, 1)),
}


@dataclass
class TrainConfig:
    variant: str = "disc_set"
    loss: str = "margin"
    margin: float = 1.0
    reg_weight: float = 1e-3
    lr: float = 0.01
    epochs: int = 90
    lr_decay: float = 0.1
    decay_every: int = 30
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    dim: int = 64
    hidden: Optional[int] = None
    temperature: float = 1.0
    gate_mode: str = "fused"
    encoder: Optional[str] = None
    n_embeddings: Optional[int] = None

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant: {self.variant!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss: {self.loss!r}")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"unknown gate mode: {self.gate_mode!r}")
        if not self.margin > 0.0:
            raise ConfigError("margin must be positive")
        if self.reg_weight < 0.0:
            raise ConfigError("reg_weight must be >= 0")
        if not self.lr > 0.0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if not self.temperature > 0.0:
            raise ConfigError("temperature must be positive")


@dataclass
class LossBreakdown:
    total: float
    main: float
    reg: float
    gated: int


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    main: float
    reg: float
    gated: int
    lr: float
    val_gr: Optional[float] = None
    val_ot: Optional[float] = None


def expected_diff(weights, diffs):
    """Expectation of the per-condition gaps under a condition distribution."""
    weights = np.asarray(weights, dtype=np.float64)
    diffs = np.asarray(diffs, dtype=np.float64)
    if weights.shape != diffs.shape:
        raise ConfigError(
            f"shape mismatch: weights {weights.shape} vs diffs {diffs.shape}"
        )
    return float(weights @ diffs)


def margin_loss(t):
    """Hinge on the already margin-shifted score: max(0, -t)."""
    return np.maximum(0.0, -np.asarray(t, dtype=np.float64))


def logistic_loss(t):
    """log(1 + exp(-t)) in the overflow-free softplus form."""
    z = -np.asarray(t, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def prob_validity(diff_k, margin):
    """Probability a triplet is valid under one condition: sigma(diff - margin)."""
    return float(sigmoid_vec(np.asarray(diff_k, dtype=np.float64) - margin))


def prob_loss(weights, diffs, margin):
    """(exact, approximate) negative log-likelihood forms.

    exact:       sum_k w_k * logistic(d_k - margin)
    approximate: logistic(sum_k w_k d_k - margin)

    The logistic loss is convex, so exact >= approximate (Jensen), with
    equality under one-hot weights or constant gaps.
    """
    weights = np.asarray(weights, dtype=np.float64)
    diffs = np.asarray(diffs, dtype=np.float64)
    exact = float(weights @ logistic_loss(diffs - margin))
    approx = float(logistic_loss(expected_diff(weights, diffs) - margin))
    return exact, approx


def hik(p, q):
    """Histogram intersection kernel: sum of elementwise minima, in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    assert p.shape == q.shape, "hik arguments must have equal length"
    assert abs(p.sum() - 1.0) < 1e-9 and np.all(p >= -1e-12), "p not on simplex"
    assert abs(q.sum() - 1.0) < 1e-9 and np.all(q >= -1e-12), "q not on simplex"
    return float(np.minimum(p, q).sum())


def _loss_value(kind, t):
    if kind == "margin":
        return margin_loss(t)
    return logistic_loss(t)


def _loss_slope(kind, t):
    # derivative of the loss w.r.t. its (already margin-shifted) argument
    if kind == "margin":
        return np.where(t < 0.0, -1.0, 0.0)
    return -sigmoid_vec(-t)


def _encoder_forward(enc, bank, pairs):
    n_pairs = pairs.shape[0]
    pre = [K.affine_fwd(pairs[p], enc.w1, enc.b1) for p in range(n_pairs)]
    hidden = np.stack([K.relu_fwd(h) for h in pre], axis=0)
    pooled, arg = K.maxpool_fwd(hidden)
    g = K.affine_fwd(pooled, enc.w2, enc.b2)
    sims = K.cosine_fwd(g, bank.anchors)
    weights = K.softmax_fwd(sims, bank.temperature)
    return {
        "pairs": pairs,
        "pre": pre,
        "arg": arg,
        "pooled": pooled,
        "g": g,
        "weights": weights,
    }


def _encoder_backward(gweights, cache, model, layout, ge):
    """Push gradients of the condition weights back to params and embeddings."""
    enc = model.set_encoder()
    bank = model.anchor_bank()
    grads = model.params.grad
    d = model.dim

    gsims = K.softmax_bwd(gweights, cache["weights"], bank.temperature)
    gg, ga = K.cosine_bwd(gsims, cache["g"], bank.anchors)
    grads("anchors.a")[...] += ga
    gpooled, gw2, gb2 = K.affine_bwd(gg, cache["pooled"], enc.w2)
    grads("enc.w2")[...] += gw2
    grads("enc.b2")[...] += gb2
    ghidden = K.maxpool_bwd(gpooled, cache["arg"], cache["pairs"].shape[0])
    for p, (first, second) in enumerate(layout):
        gpre = K.relu_bwd(ghidden[p], cache["pre"][p])
        gpair, gw1, gb1 = K.affine_bwd(gpre, cache["pairs"][p], enc.w1)
        grads("enc.w1")[...] += gw1
        grads("enc.b1")[...] += gb1
        ge[first] += gpair[:, :d]
        ge[second] += gpair[:, d:]


def _batch_pass(model, world, xs, ys, zs, cond, config, with_grad):
    """Forward (and optionally backward) pass over one batch of triplets.

    Gradients are accumulated into ``model.params``; callers zero them.
    """
    n = xs.shape[0]
    variant = config.variant
    if variant == "supervised" and cond is None:
        raise DataError("supervised variant requires condition labels")

    # backbone
    idx = np.concatenate([xs, ys, zs])
    xraw = world.x[idx]
    bb = model.backbone()
    pre1 = K.affine_fwd(xraw, bb.w1, bb.b1)
    act1 = K.relu_fwd(pre1)
    emb = K.affine_fwd(act1, bb.w2, bb.b2)
    ex, ey, ez = emb[:n], emb[n : 2 * n], emb[2 * n :]

    # per-condition gaps
    L = model.params.param("proj.L")
    n_cond = L.shape[0]
    psis = []
    diffs = np.empty((n, n_cond))
    for k in range(n_cond):
        px = K.residual_fwd(ex, L[k])
        py = K.residual_fwd(ey, L[k])
        pz = K.residual_fwd(ez, L[k])
        psis.append((px, py, pz))
        diffs[:, k] = K.sqdist_diff_fwd(px, py, pz)

    # condition distributions
    cache1 = cache2 = None
    use_reg = variant == "disc_reg" and config.reg_weight > 0.0
    if model.encoder is not None:
        enc = model.set_encoder()
        bank = model.anchor_bank()
        pairs1 = _stack_pairs(ex, ey, ez, PAIR_LAYOUT[enc.variant])
        cache1 = _encoder_forward(enc, bank, pairs1)
        if use_reg:
            pairs2 = _stack_pairs(ex, ey, ez, PAIR_LAYOUT["seq3_reversed"])
            cache2 = _encoder_forward(enc, bank, pairs2)

    # main term
    if variant == "supervised":
        if cond.max() >= n_cond:
            raise DataError(
                f"label {int(cond.max())} exceeds the model's "
                f"{n_cond} embeddings"
            )
        scores = diffs[np.arange(n), cond]
    else:
        weights1 = cache1["weights"]
        scores = np.einsum("bk,bk->b", weights1, diffs)
    t = scores - config.margin
    main = float(np.mean(_loss_value(config.loss, t)))

    # gated regularizer on reversed-triplet condition overlap
    reg = 0.0
    gated = 0
    gate = None
    if use_reg:
        weights1 = cache1["weights"]
        weights2 = cache2["weights"]
        if config.gate_mode == "fused":
            s1 = np.einsum("bk,bk->b", weights1, diffs)
            s2 = -np.einsum("bk,bk->b", weights2, diffs)
            gate = (s1 > 0.0) & (s2 > 0.0)
        else:
            k1 = np.argmax(weights1, axis=1)
            k2 = np.argmax(weights2, axis=1)
            rows = np.arange(n)
            gate = (diffs[rows, k1] > 0.0) & (-diffs[rows, k2] > 0.0)
        gated = int(gate.sum())
        if gated:
            overlap = np.minimum(weights1, weights2).sum(axis=1)
            reg = config.reg_weight * float(overlap[gate].sum()) / n

    breakdown = LossBreakdown(total=main + reg, main=main, reg=reg, gated=gated)
    if not with_grad:
        return breakdown

    # ---- backward ----
    gt = _loss_slope(config.loss, t) / n
    ge = [np.zeros_like(ex), np.zeros_like(ey), np.zeros_like(ez)]

    if variant == "supervised":
        gdiffs = np.zeros_like(diffs)
        gdiffs[np.arange(n), cond] = gt
    else:
        gdiffs = gt[:, None] * cache1["weights"]
        gweights1 = gt[:, None] * diffs
        if use_reg and gated:
            w1 = cache1["weights"]
            w2 = cache2["weights"]
            take1 = (w1 <= w2) & gate[:, None]  # ties route to first argument
            take2 = (w2 < w1) & gate[:, None]
            scale = config.reg_weight / n
            gweights1 += scale * take1
            gweights2 = scale * take2.astype(np.float64)
            _encoder_backward(
                gweights2, cache2, model, PAIR_LAYOUT["seq3_reversed"], ge
            )
        _encoder_backward(
            gweights1, cache1, model, PAIR_LAYOUT[model.encoder], ge
        )

    gL = model.params.grad("proj.L")
    for k in range(n_cond):
        px, py, pz = psis[k]
        gpx, gpy, gpz = K.sqdist_diff_bwd(
            np.ascontiguousarray(gdiffs[:, k]), px, py, pz
        )
        for gpsi, e, slot in ((gpx, ex, 0), (gpy, ey, 1), (gpz, ez, 2)):
            gei, gLk = K.residual_bwd(gpsi, e, L[k])
            ge[slot] += gei
            gL[k] += gLk

    gemb = np.concatenate(ge, axis=0)
    gact1, gw2, _ = K.affine_bwd(gemb, act1, bb.w2)
    model.params.grad("backbone.w2")[...] += gw2
    gpre1 = K.relu_bwd(gact1, pre1)
    _, gw1, gb1 = K.affine_bwd(gpre1, xraw, bb.w1)
    model.params.grad("backbone.w1")[...] += gw1
    model.params.grad("backbone.b1")[...] += gb1
    return breakdown


def _stack_pairs(ex, ey, ez, layout):
    members = (ex, ey, ez)
    return np.ascontiguousarray(
        np.stack(
            [np.hstack([members[a], members[b]]) for a, b in layout], axis=0
        )
    )


def _index_arrays(triplets):
    xs = np.array([t.x for t in triplets], dtype=np.intp)
    ys = np.array([t.y for t in triplets], dtype=np.intp)
    zs = np.array([t.z for t in triplets], dtype=np.intp)
    if triplets and all(t.cond is not None for t in triplets):
        cond = np.array([t.cond for t in triplets], dtype=np.intp)
    else:
        cond = None
    return xs, ys, zs, cond


def batch_loss(model, world, triplets, config):
    """Loss breakdown for a list of triplets; no gradients touched."""
    if not triplets:
        raise DataError("empty batch")
    xs, ys, zs, cond = _index_arrays(triplets)
    return _batch_pass(model, world, xs, ys, zs, cond, config, with_grad=False)


def batch_loss_and_grad(model, world, triplets, config):
    """Loss breakdown plus gradient accumulation into model.params."""
    if not triplets:
        raise DataError("empty batch")
    xs, ys, zs, cond = _index_arrays(triplets)
    return _batch_pass(model, world, xs, ys, zs, cond, config, with_grad=True)


def semantic_regularizer(model, world, triplet, margin, reg_weight,
                         gate_mode="fused"):
    """Regularizer value for one training triplet and its reversal.

    Returns (value, gate_open). The gate compares the model's current fused
    validity scores of both orientations with gradients blocked; when open,
    the value is reg_weight times the overlap of the two condition
    distributions.
    """
    cfg = TrainConfig(
        variant="disc_reg",
        margin=margin,
        reg_weight=reg_weight,
        gate_mode=gate_mode,
        dim=model.dim,
        temperature=model.temperature,
    )
    xs, ys, zs, _ = _index_arrays([triplet])
    bd = _batch_pass(model, world, xs, ys, zs, None, cfg, with_grad=False)
    return bd.reg, bool(bd.gated)


def fit(train_ds, config, val_ds=None):
    """Train a model; returns (model, per-epoch records).

    Deterministic given the config seed: initialization, shuffling, and
    updates all derive from it. When a labeled validation split is given, the
    parameters with the best validation OT accuracy are returned.
    """
    config.validate()
    if len(train_ds) == 0:
        raise DataError("cannot fit on an empty dataset")
    world = train_ds.world
    n_emb = config.n_embeddings or world.n_conditions
    model = init_model(
        config.variant,
        n_conditions=n_emb,
        dim_in=world.dim,
        dim=config.dim,
        hidden=config.hidden,
        temperature=config.temperature,
        seed=config.seed,
        encoder=config.encoder,
    )
    xs, ys, zs, cond = train_ds.index_arrays()
    if config.variant == "supervised" and cond is None:
        raise DataError("supervised variant requires a fully labeled dataset")

    shuffle_rng = np.random.default_rng(config.seed + 1)
    optimizer = make_optimizer(config.optimizer)
    records = []
    best_ot = -1.0
    best_params = None

    for epoch in range(1, config.epochs + 1):
        lr = config.lr * config.lr_decay ** ((epoch - 1) // config.decay_every)
        order = shuffle_rng.permutation(len(train_ds))
        total = main = reg = 0.0
        gated = 0
        for start in range(0, len(order), config.batch_size):
            sel = order[start : start + config.batch_size]
            model.params.zero_grads()
            bd = _batch_pass(
                model,
                world,
                xs[sel],
                ys[sel],
                zs[sel],
                None if cond is None else cond[sel],
                config,
                with_grad=True,
            )
            if not math.isfinite(bd.total):
                raise DivergenceError(
                    f"training diverged at epoch {epoch}, "
                    f"batch {start // config.batch_size}: loss={bd.total}"
                )
            optimizer.step(model.params, lr)
            total += bd.total * sel.size
            main += bd.main * sel.size
            reg += bd.reg * sel.size
            gated += bd.gated
        n_seen = len(order)
        record = EpochRecord(
            epoch=epoch,
            loss=total / n_seen,
            main=main / n_seen,
            reg=reg / n_seen,
            gated=gated,
            lr=lr,
        )
        if val_ds is not None:
            report = aligneval.evaluate(model, val_ds)
            record.val_gr = report.gr_accuracy
            record.val_ot = report.ot_accuracy
            if record.val_ot > best_ot:
                best_ot = record.val_ot
                best_params = model.params.copy()
        records.append(record)

    if best_params is not None:
        model.params = best_params
    return model, records
