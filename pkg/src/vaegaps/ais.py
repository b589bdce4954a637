"""Annealed importance sampling with HMC transitions, and BDMC sandwiches.

Intermediate targets are ``f_beta(z) = p(z) p(x|z)^beta``.  Chains are
vectorized: state arrays have shape ``(batch, chains, latent_dim)`` so that
many datapoints and chains advance together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .bounds import log_mean_exp
from .diffnet import NumericalError
from .model import log_likelihood_vjp, log_prior, sample_x

log = logging.getLogger(__name__)

TARGET_ACCEPT = 0.65
STEP_MIN, STEP_MAX = 1e-6, 1.0


class ScheduleKind(str, Enum):
    LINEAR = "linear"
    SIGMOID = "sigmoid"


class Direction(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass
class Schedule:
    betas: np.ndarray
    kind: ScheduleKind = ScheduleKind.LINEAR

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=float)
        b = self.betas
        if b.ndim != 1 or b.size < 2 or b[0] != 0.0 or b[-1] != 1.0 or np.any(np.diff(b) < 0):
            raise ValueError("betas must rise monotonically from 0 to 1")

    @classmethod
    def linear(cls, n):
        return cls(np.linspace(0.0, 1.0, n), ScheduleKind.LINEAR)

    @classmethod
    def sigmoid(cls, n, radius=4.0):
        s = 1.0 / (1.0 + np.exp(-np.linspace(-radius, radius, n)))
        b = (s - s[0]) / (s[-1] - s[0])
        b[0], b[-1] = 0.0, 1.0
        return cls(b, ScheduleKind.SIGMOID)

    @classmethod
    def make(cls, kind, n):
        return cls.sigmoid(n) if ScheduleKind(kind) is ScheduleKind.SIGMOID else cls.linear(n)

    def __len__(self):
        return self.betas.size


@dataclass
class AisResult:
    log_marginal_bound: float
    log_weights: np.ndarray
    mean_acceptance: float
    direction: Direction
    std_error: float = 0.0
    dropped_chains: int = 0
    step_sizes: np.ndarray = field(default=None, repr=False)


def intermediate_log_f(model, x, z, beta):
    """``log p(z) + beta * log p(x|z)`` and its gradient in ``z``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    ll, pull = log_likelihood_vjp(model, x, z, need_params=False)
    dll, _ = pull(np.ones_like(ll))
    return log_prior(z) + beta * ll, beta * dll - z


def leapfrog(grad_log_f, z, p, step_size, n_steps):
    """Plain leapfrog integration; returns the end point ``(z, p)``."""
    eps = np.asarray(step_size, dtype=float)
    p = p + 0.5 * eps * grad_log_f(z)
    for i in range(n_steps):
        z = z + eps * p
        g = grad_log_f(z)
        p = p + (eps if i < n_steps - 1 else 0.5 * eps) * g
    return z, p


def hmc_transition(log_f_grad, z, step_size, n_leapfrog, rng):
    """One Metropolis-corrected HMC move per chain.

    ``log_f_grad(z)`` returns ``(log_f, grad)`` for a batch of states with
    shape ``(..., d)``; ``step_size`` broadcasts against ``z[..., 0]``.
    Non-finite energies count as rejections.  Returns
    ``(z_new, accepted, accept_prob)``.
    """
    if n_leapfrog < 1:
        raise ValueError("n_leapfrog must be >= 1")
    eps = np.asarray(step_size, dtype=float)[..., None]
    if np.any(eps <= 0):
        raise ValueError("step_size must be positive")
    with np.errstate(over="ignore", invalid="ignore"):
        lf0, g0 = log_f_grad(z)
        p0 = rng.standard_normal(z.shape)
        p = p0 + 0.5 * eps * g0
        zn = z
        for i in range(n_leapfrog):
            zn = zn + eps * p
            lf1, g1 = log_f_grad(zn)
            p = p + (eps if i < n_leapfrog - 1 else 0.5 * eps) * g1
        h0 = -lf0 + 0.5 * np.sum(p0 * p0, axis=-1)
        h1 = -lf1 + 0.5 * np.sum(p * p, axis=-1)
        log_ratio = h0 - h1
        ok = np.isfinite(log_ratio) & np.all(np.isfinite(zn), axis=-1)
        log_ratio = np.where(ok, log_ratio, -np.inf)
        accept_prob = np.exp(np.minimum(log_ratio, 0.0))
    accepted = ok & (np.log(rng.random(log_ratio.shape)) < log_ratio)
    return np.where(accepted[..., None], zn, z), accepted, accept_prob


def adapt_step_size(step_size, acceptance, target=TARGET_ACCEPT, rate=0.05):
    """Multiplicative nudge of ``step_size`` toward the target acceptance rate.

    ``acceptance`` is the latest acceptance probability (or a history whose
    mean is used).  The result is clamped to ``[1e-6, 1]``.
    """
    acc = np.asarray(acceptance, dtype=float)
    if acc.ndim > np.ndim(step_size):
        acc = acc.mean(axis=-1)
    new = np.asarray(step_size, dtype=float) * np.exp(rate * (acc - target))
    return np.clip(new, STEP_MIN, STEP_MAX)


def _hmc_on_loglik(model, x, z, ll, dll, beta, eps, n_leapfrog, rng):
    """HMC targeting ``p(z) p(x|z)^beta`` reusing cached ``log p(x|z)`` and gradient."""

    def eval_ll(zz):
        v, pull = log_likelihood_vjp(model, x, zz, need_params=False, check=False)
        g, _ = pull(np.ones_like(v))
        return v, g

    e = eps[..., None]
    p0 = rng.standard_normal(z.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        p = p0 + 0.5 * e * (beta * dll - z)
        zn = z
        for i in range(n_leapfrog):
            zn = zn + e * p
            ll1, dll1 = eval_ll(zn)
            g = beta * dll1 - zn
            p = p + (e if i < n_leapfrog - 1 else 0.5 * e) * g
        h0 = -(log_prior(z) + beta * ll) + 0.5 * np.sum(p0 * p0, axis=-1)
        h1 = -(log_prior(zn) + beta * ll1) + 0.5 * np.sum(p * p, axis=-1)
        log_ratio = h0 - h1
        ok = np.isfinite(log_ratio) & np.all(np.isfinite(zn), axis=-1) & np.isfinite(ll1)
        log_ratio = np.where(ok, log_ratio, -np.inf)
        prob = np.exp(np.minimum(log_ratio, 0.0))
    acc = ok & (np.log(rng.random(log_ratio.shape)) < log_ratio)
    z = np.where(acc[..., None], zn, z)
    ll = np.where(acc, ll1, ll)
    dll = np.where(acc[..., None], dll1, dll)
    return z, ll, dll, acc, prob


def run_ais_chains(model, x, betas, z_init, n_leapfrog, rng, step_size=0.1,
                   warm_fraction=0.2, adapt_rate=0.05, freeze_fraction=1.0):
    """Advance chains through ``betas`` (either direction) from ``z_init``.

    ``x`` has shape ``(B, D)`` and ``z_init`` ``(B, C, d)``.  Each stage
    applies an HMC move at the current temperature (skipped at the exact
    starting distribution) then adds ``(beta_next - beta) * log p(x|z)``.

    Step sizes adapt per chain until ``freeze_fraction`` of the schedule has
    passed; acceptance statistics skip the first ``warm_fraction``.
    Returns ``(log_w, mean_accept_after_warmup, step_sizes)``.
    """
    betas = np.asarray(betas, dtype=float)
    xb = np.asarray(x, dtype=float)[:, None, :]
    z = np.array(z_init, dtype=float)
    ll, pull = log_likelihood_vjp(model, xb, z, need_params=False)
    dll, _ = pull(np.ones_like(ll))
    log_w = np.zeros(z.shape[:-1])
    eps = np.full(z.shape[:-1], float(step_size))
    n_stage = betas.size - 1
    n_warm = int(np.ceil(warm_fraction * max(n_stage - 1, 1)))
    n_adapt = int(np.ceil(freeze_fraction * max(n_stage - 1, 1)))
    acc_sum = np.zeros(z.shape[:-1])
    acc_count = 0
    for k in range(1, betas.size):
        if k > 1:
            z, ll, dll, _, prob = _hmc_on_loglik(model, xb, z, ll, dll, betas[k - 1], eps,
                                                 n_leapfrog, rng)
            if k - 1 <= n_adapt:
                eps = adapt_step_size(eps, prob, rate=adapt_rate)
            if k - 1 > n_warm:
                acc_sum += prob
                acc_count += 1
        log_w = log_w + (betas[k] - betas[k - 1]) * ll
    mean_acc = acc_sum / acc_count if acc_count else np.full(acc_sum.shape, np.nan)
    return log_w, mean_acc, eps


def _bootstrap_lme(log_w, rng, n_boot=200, sign=1.0):
    c = log_w.shape[-1]
    if c < 2:
        return np.zeros(log_w.shape[:-1])
    boots = np.stack([sign * log_mean_exp(sign * log_w[..., rng.integers(0, c, size=c)], axis=-1)
                      for _ in range(n_boot)])
    return boots.std(axis=0, ddof=1)


def _drop_divergent(log_w, max_drop=0.1):
    bad = ~np.isfinite(log_w)
    n_bad = bad.sum(axis=-1)
    if np.any(n_bad > max_drop * log_w.shape[-1]):
        raise NumericalError(f"more than {max_drop:.0%} of AIS chains diverged")
    if np.any(bad):
        log.warning("dropping %d divergent AIS chains", int(n_bad.sum()))
    return np.where(bad, -np.inf, log_w), n_bad


def ais_forward(model, x, schedule, n_chains=16, n_leapfrog=10, rng=None, step_size=0.1,
                warm_fraction=0.2):
    """Forward AIS from the prior; a stochastic lower bound on ``log p(x)``.

    ``x`` may be one datapoint ``(D,)`` or a batch ``(B, D)``; a batch
    returns one :class:`AisResult` per row.
    """
    rng = np.random.default_rng() if rng is None else rng
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None] if single else x
    z0 = rng.standard_normal((xb.shape[0], n_chains, model.latent_dim))
    log_w, acc, eps = run_ais_chains(model, xb, schedule.betas, z0, n_leapfrog, rng,
                                     step_size, warm_fraction)
    log_w, n_bad = _drop_divergent(log_w)
    bound = log_mean_exp(log_w, axis=-1)
    se = _bootstrap_lme(log_w, rng)
    out = [AisResult(float(bound[i]), log_w[i], float(np.mean(acc[i])), Direction.FORWARD,
                     float(se[i]), int(n_bad[i]), eps[i]) for i in range(xb.shape[0])]
    return out[0] if single else out


def ais_backward(model, x, z_exact, schedule, n_chains=16, n_leapfrog=10, rng=None,
                 step_size=0.1, warm_fraction=0.2):
    """Reverse AIS from exact posterior samples; a stochastic upper bound on ``log p(x)``.

    ``z_exact`` has shape ``(B, d)`` (one exact sample per row of ``x``),
    replicated across chains.
    """
    rng = np.random.default_rng() if rng is None else rng
    xb = np.atleast_2d(np.asarray(x, dtype=float))
    z0 = np.repeat(np.atleast_2d(z_exact)[:, None, :], n_chains, axis=1)
    log_w, acc, eps = run_ais_chains(model, xb, schedule.betas[::-1], z0, n_leapfrog, rng,
                                     step_size, warm_fraction)
    log_w, n_bad = _drop_divergent(log_w)
    # log_w estimates log(1 / p(x)); the upper bound is its negated log-mean-exp
    upper = -log_mean_exp(log_w, axis=-1)
    se = _bootstrap_lme(log_w, rng)
    return [AisResult(float(upper[i]), log_w[i], float(np.mean(acc[i])), Direction.BACKWARD,
                      float(se[i]), int(n_bad[i]), eps[i]) for i in range(xb.shape[0])]


@dataclass
class BdmcResult:
    lower: float
    upper: float
    gap: float
    lower_per_point: np.ndarray
    upper_per_point: np.ndarray
    x: np.ndarray = field(repr=False, default=None)
    z: np.ndarray = field(repr=False, default=None)
    lower_se_per_point: np.ndarray = field(repr=False, default=None)
    upper_se_per_point: np.ndarray = field(repr=False, default=None)

    @property
    def pooled_std_error(self):
        """Standard error of ``gap`` from the spread across simulated points."""
        d = self.upper_per_point - self.lower_per_point
        return float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0

    def __iter__(self):
        return iter((self.lower, self.upper, self.gap))


def simulate(model, n, rng):
    """``(z*, x*) ~ p(z) p(x|z)``."""
    z = rng.standard_normal((n, model.latent_dim))
    return z, sample_x(model, z, rng)


def bdmc(model, n_sim, schedule, n_chains=16, rng=None, n_leapfrog=10, step_size=0.1,
         data=None):
    """Bidirectional Monte Carlo on simulated data.

    Runs forward AIS and reverse AIS (started at the simulating ``z*``) on
    ``n_sim`` points.  ``data=(z, x)`` reuses an existing simulation so that
    different schedules can be compared on the same points.
    """
    rng = np.random.default_rng() if rng is None else rng
    z_star, x_star = simulate(model, n_sim, rng) if data is None else data
    fwd = ais_forward(model, x_star, schedule, n_chains, n_leapfrog, rng, step_size)
    bwd = ais_backward(model, x_star, z_star, schedule, n_chains, n_leapfrog, rng, step_size)
    lower = np.array([r.log_marginal_bound for r in fwd])
    upper = np.array([r.log_marginal_bound for r in bwd])
    return BdmcResult(float(lower.mean()), float(upper.mean()), float((upper - lower).mean()),
                      lower, upper, x_star, z_star,
                      np.array([r.std_error for r in fwd]), np.array([r.std_error for r in bwd]))
