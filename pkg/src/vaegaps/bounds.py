"""Lower bounds on ``log p(x)``: ELBO, IWAE, flow and auxiliary-flow ELBOs,
plus the entropy-annealed training objective and its gradient."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .flows import FlowMode, transform_vjp
from .model import encode, log_likelihood_vjp, log_prior


class BoundKind(str, Enum):
    ELBO = "elbo"
    IWAE = "iwae"
    FLOW_ELBO = "flow_elbo"
    AUX_ELBO = "aux_elbo"


@dataclass
class BoundEstimate:
    value: float
    n_samples: int
    std_error: float
    kind: BoundKind


def log_mean_exp(values, axis=None):
    """``log(mean(exp(values)))`` with a max shift.

    ``-inf`` entries are allowed; if every entry is ``-inf`` the result is
    ``-inf``.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("log_mean_exp of an empty array")
    m = np.max(v, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    n = v.size if axis is None else v.shape[axis]
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(v - m_safe), axis=axis, keepdims=True)) - np.log(n)
    out = s + m_safe
    out = np.where(np.isneginf(m), -np.inf, out)
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


@dataclass
class Posterior:
    """A sampleable variational posterior for one datapoint (or a batch).

    ``base`` is the Gaussian over ``z0``; ``flow`` the optional coupling
    stack.  ``x`` is only consulted by reverse models that condition on it.
    """

    base: object
    flow: object = None
    x: np.ndarray | None = None

    @property
    def latent_dim(self):
        return np.shape(self.base.mu)[-1]

    @property
    def kind(self):
        if self.flow is None:
            return BoundKind.ELBO
        if self.flow.mode is FlowMode.AUXILIARY:
            return BoundKind.AUX_ELBO
        return BoundKind.FLOW_ELBO

    def draw_noise(self, n, rng):
        shape = (n,) + np.shape(self.base.mu)
        eps_z = rng.standard_normal(shape)
        eps_v = None
        if self.flow is not None and self.flow.mode is FlowMode.AUXILIARY:
            eps_v = rng.standard_normal(shape)
        return eps_z, eps_v

    def sample(self, n, rng):
        eps_z, eps_v = self.draw_noise(n, rng)
        return transform_vjp(self.flow, self.base, eps_z, eps_v, self.x)[0]


def amortized_posterior(model, x):
    return Posterior(encode(model, x), model.flow, np.asarray(x, dtype=float))


@dataclass
class ObjectiveGrads:
    decoder: list | None
    mu: np.ndarray
    logvar: np.ndarray
    flow: list


def objective_vjp(model, x, q, eps_z, eps_v=None, lam=1.0, need_decoder=True):
    """Per-sample ``log p(x,z) + log r - lam * log q`` and its pullback.

    With ``lam = 1`` the values are the bound's log weights.  The pullback
    maps a cotangent shaped like the values to :class:`ObjectiveGrads`.
    """
    s, pull_q = transform_vjp(q.flow, q.base, eps_z, eps_v, q.x)
    ll, pull_ll = log_likelihood_vjp(model, x, s.z, need_params=need_decoder)
    values = log_prior(s.z) + ll + s.log_r - lam * s.log_q

    def pullback(g):
        g = np.asarray(g, dtype=float)
        dz, dec = pull_ll(g)
        gz = dz - g[..., None] * s.z
        gmu, glv, gflow = pull_q(gz, -lam * g, g)
        return ObjectiveGrads(dec, gmu, glv, gflow)

    return values, pullback


def log_weights(model, x, q, n, rng):
    """``(n, ...)`` array of ``log p(x, z) + log r(v|.) - log q`` at fresh samples."""
    eps_z, eps_v = q.draw_noise(n, rng)
    values, _ = objective_vjp(model, x, q, eps_z, eps_v, 1.0, need_decoder=False)
    return values


def _mean_estimate(lw, kind):
    n = lw.shape[0]
    se = np.std(lw, axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(lw.shape[1:])
    value = lw.mean(axis=0)
    if np.ndim(value) == 0:
        value, se = float(value), float(se)
    return BoundEstimate(value, n, se, kind)


def elbo(model, q, x, n, rng, batch=1000):
    """Monte Carlo ELBO of ``q`` (kind follows the posterior family)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lw = _batched_weights(model, x, q, n, rng, batch)
    return _mean_estimate(lw, q.kind)


def aux_elbo(model, q, x, n, rng, batch=1000):
    if q.kind is not BoundKind.AUX_ELBO:
        raise ValueError("aux_elbo needs an auxiliary-flow posterior")
    return elbo(model, q, x, n, rng, batch)


def _batched_weights(model, x, q, n, rng, batch):
    chunks = []
    left = n
    while left:
        m = min(batch, left)
        chunks.append(log_weights(model, x, q, m, rng))
        left -= m
    return np.concatenate(chunks, axis=0)


def iwae(model, q, x, k, rng, batch=1000, n_boot=200):
    """IWAE bound from ``k`` importance samples combined in one log-mean-exp.

    Samples are drawn ``batch`` at a time.  The standard error is a
    bootstrap over the ``k`` weights.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    lw = _batched_weights(model, x, q, k, rng, batch)
    value = log_mean_exp(lw, axis=0)
    if k > 1 and n_boot:
        boots = np.empty((n_boot,) + lw.shape[1:])
        for i in range(n_boot):
            idx = rng.integers(0, k, size=k)
            boots[i] = log_mean_exp(lw[idx], axis=0)
        se = boots.std(axis=0, ddof=1)
    else:
        se = np.zeros(lw.shape[1:])
    if np.ndim(value) == 0:
        value, se = float(value), float(se)
    return BoundEstimate(value, k, se, BoundKind.IWAE)


def annealed_objective(model, q, x, n, lam, rng):
    """Monte Carlo ``E_q[log p(x,z) - lam * log q(z|x)]`` (plus ``log r`` for q_AF)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    eps_z, eps_v = q.draw_noise(n, rng)
    values, _ = objective_vjp(model, x, q, eps_z, eps_v, lam, need_decoder=False)
    return float(values.mean())
