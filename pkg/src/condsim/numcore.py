"""Minimal differentiable numerics: parameter storage, elementary ops,
optimizers, and a finite-difference gradient oracle.

Everything is float64. There is no autodiff tape: each network block ships an
explicit forward/backward pair (see :mod:`condsim.kernels_np`), and this
module's ``grad_check`` is the oracle that keeps those pairs honest.
"""

import math

import numpy as np

from condsim.backend import kernels as K
from condsim.errors import ConfigError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ParamStore:
    """Named float64 parameter tensors, each paired with a gradient buffer.

    Insertion order is part of the contract: checkpoints, flattening, and
    optimizer state all iterate parameters in the order they were added, which
    makes seeded runs bit-reproducible.
    """

    def __init__(self, seed=0):
        self.seed = seed
        self._params = {}
        self._grads = {}

    def add(self, name, value):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name: {name}")
        arr = np.array(value, dtype=np.float64)
        self._params[name] = arr
        self._grads[name] = np.zeros_like(arr)
        return arr

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def param(self, name):
        return self._params[name]

    def grad(self, name):
        return self._grads[name]

    def items(self):
        return self._params.items()

    def zero_grads(self):
        for g in self._grads.values():
            g[...] = 0.0

    def copy(self):
        other = ParamStore(self.seed)
        for name, p in self._params.items():
            other.add(name, p.copy())
            other._grads[name][...] = self._grads[name]
        return other

    def n_entries(self):
        return sum(p.size for p in self._params.values())

    def allclose(self, other, rtol=0.0, atol=0.0):
        if self.names() != other.names():
            return False
        return all(
            np.allclose(p, other.param(name), rtol=rtol, atol=atol)
            for name, p in self.items()
        )


def affine(w, b, x):
    """w @ x + b for a single vector x; differentiable via the batch kernels."""
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.ndim != 2 or b.shape != (w.shape[0],) or x.shape != (w.shape[1],):
        raise ConfigError(
            f"affine shape mismatch: w{w.shape} b{b.shape} x{x.shape}"
        )
    return K.affine_fwd(x[None, :], w, b)[0]


def relu(x):
    return K.relu_fwd(np.asarray(x, dtype=np.float64))


def cosine(u, v):
    """Cosine similarity of two vectors, zero-norm guarded (never divides by 0)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return float(K.cosine_fwd(u[None, :], v[None, :])[0, 0])


def softmax_temp(s, temp):
    """Temperature softmax onto the probability simplex (max-subtracted)."""
    if not temp > 0.0:
        raise ConfigError(f"softmax temperature must be positive, got {temp}")
    s = np.asarray(s, dtype=np.float64)
    return K.softmax_fwd(s[None, :], temp)[0]


def sigmoid(x):
    """Numerically stable logistic function."""
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def sigmoid_vec(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def grad_check(loss_fn, params, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn()`` must return the scalar loss and leave the analytic gradients
    in ``params`` (the usual zero_grads + forward + backward closure). It is
    re-invoked with perturbed parameters to form the numeric estimate
    ``(f(t+eps) - f(t-eps)) / (2 eps)``; relative error for one entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    params.zero_grads()
    base = float(loss_fn())
    if not math.isfinite(base):
        raise ValueError(f"non-finite loss in grad_check: {base}")
    analytic = {name: params.grad(name).copy() for name in params.names()}

    worst = 0.0
    for name in params.names():
        p = params.param(name)
        flat = p.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lo_hi = float(loss_fn())
            flat[i] = orig - eps
            lo_lo = float(loss_fn())
            flat[i] = orig
            if not (math.isfinite(lo_hi) and math.isfinite(lo_lo)):
                raise ValueError("non-finite loss in grad_check perturbation")
            numeric = (lo_hi - lo_lo) / (2.0 * eps)
            err = abs(ga[i] - numeric) / max(abs(ga[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    params.zero_grads()
    for name in params.names():
        params.grad(name)[...] = analytic[name]
    return worst


class Sgd:
    """Plain gradient descent: p -= lr * g."""

    def step(self, params, lr):
        if not lr > 0.0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        for name, p in params.items():
            p -= lr * params.grad(name)


class Adam:
    """Adam with the standard bias-corrected moments."""

    def __init__(self, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params, lr):
        if not lr > 0.0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = params.grad(name)
            if name not in self._m:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(mode):
    if mode == "sgd":
        return Sgd()
    if mode == "adam":
        return Adam()
    raise ConfigError(f"unknown optimizer mode: {mode!r}")


def optimizer_step(params, lr, mode="sgd", state=None):
    """One update step; returns the optimizer so callers can keep Adam state."""
    opt = state if state is not None else make_optimizer(mode)
    opt.step(params, lr)
    return opt
