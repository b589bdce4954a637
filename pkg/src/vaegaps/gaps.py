"""Inference-gap bookkeeping: ``log p_hat(x)``, the gap decomposition and its KL view."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .ais import Schedule, ais_forward
from .bounds import Posterior, amortized_posterior, elbo, iwae
from .diffnet import NumericalError
from .model import expected_log_joint_gaussian, ffg_entropy, linear_gaussian_parts

log = logging.getLogger(__name__)


@dataclass
class AisConfig:
    n_chains: int = 16
    n_intermediate: int = 1000
    n_leapfrog: int = 10
    schedule: str = "linear"


@dataclass
class IwaeConfig:
    k: int = 5000
    batch: int = 1000


@dataclass
class GapReport:
    """Gaps in nats.  ``inference_gap`` is the sum of the other two, so the
    decomposition is exact in floating point."""

    logp_hat: float
    elbo_qstar: float
    elbo_q: float
    approximation_gap: float
    amortization_gap: float
    inference_gap: float
    provenance: str = ""
    elbo_qstar_by_family: dict = field(default_factory=dict)
    subset_size: int = 1
    noise_flag: bool = False

    def to_dict(self):
        return asdict(self)


def decompose(logp_hat, elbo_qstar, elbo_q, **extra):
    """Split ``logp_hat - elbo_q`` into approximation and amortization parts.

    Out-of-order inputs are kept as-is and flagged, never clamped.

    >>> r = decompose(-89.80, -91.23, -92.57)
    >>> round(r.approximation_gap, 2), round(r.amortization_gap, 2), round(r.inference_gap, 2)
    (1.43, 1.34, 2.77)
    """
    approx = logp_hat - elbo_qstar
    amort = elbo_qstar - elbo_q
    noise = bool(approx < 0 or amort < 0)
    return GapReport(float(logp_hat), float(elbo_qstar), float(elbo_q), float(approx), float(amort),
                     float(approx + amort), noise_flag=noise, **extra)


def aggregate(reports):
    """Mean over datapoints of every bound; gaps recomputed from the means."""
    if not reports:
        raise ValueError("nothing to aggregate")
    fams = set().union(*(r.elbo_qstar_by_family for r in reports))
    by_fam = {f: float(np.mean([r.elbo_qstar_by_family[f] for r in reports
                                if f in r.elbo_qstar_by_family])) for f in sorted(fams)}
    prov = {p: sum(r.provenance == p for r in reports) for p in {r.provenance for r in reports}}
    out = decompose(np.mean([r.logp_hat for r in reports]),
                    np.mean([r.elbo_qstar for r in reports]),
                    np.mean([r.elbo_q for r in reports]),
                    provenance=",".join(f"{k}:{v}" for k, v in sorted(prov.items())),
                    elbo_qstar_by_family=by_fam, subset_size=len(reports))
    out.noise_flag = any(r.noise_flag for r in reports)
    return out


def estimate_logp(model, x, ais_cfg=None, iwae_cfg=None, rng=None, q=None):
    """``max(L_AIS, L_IWAE)`` and which estimator attained it.

    IWAE uses ``q`` (default: the model's amortized posterior).  If one
    estimator fails numerically the other is used and the provenance string
    gains a ``"(fallback)"`` marker.
    """
    rng = np.random.default_rng() if rng is None else rng
    ais_cfg = ais_cfg or AisConfig()
    iwae_cfg = iwae_cfg or IwaeConfig()
    q = amortized_posterior(model, x) if q is None else q
    vals = {}
    try:
        sched = Schedule.make(ais_cfg.schedule, ais_cfg.n_intermediate)
        vals["ais"] = ais_forward(model, x, sched, ais_cfg.n_chains, ais_cfg.n_leapfrog,
                                  rng).log_marginal_bound
    except NumericalError as err:
        log.warning("AIS failed: %s", err)
    try:
        vals["iwae"] = iwae(model, q, x, iwae_cfg.k, rng, iwae_cfg.batch, n_boot=0).value
    except NumericalError as err:
        log.warning("IWAE failed: %s", err)
    if not vals:
        raise NumericalError("both log-marginal estimators failed")
    best = max(vals, key=vals.get)
    prov = best if len(vals) == 2 else f"{best} (fallback)"
    return vals[best], prov


def kl_view(model, x, q, logp, n=5000, rng=None):
    """``logp - ELBO(q)``: the inference gap read as ``KL(q || p(z|x))``.

    Uses the closed-form ELBO for plain Gaussian ``q`` on a linear-Gaussian
    decoder, else a Monte Carlo estimate.  Returns ``(kl, std_error)``.
    """
    if q.flow is None and linear_gaussian_parts(model) is not None:
        value = expected_log_joint_gaussian(model, x, q.base) + ffg_entropy(q.base)
        return float(logp - value), 0.0
    est = elbo(model, q, x, n, rng if rng is not None else np.random.default_rng())
    return float(logp - est.value), float(est.std_error)


def gaussianness_score(model, x, rng=None, logp_hat=None, local_kw=None, ais_cfg=None,
                       iwae_cfg=None):
    """``log p_hat(x) - L[q*_FFG]``: how far the posterior is from any FFG."""
    from .localopt import Family, optimize_local

    rng = np.random.default_rng() if rng is None else rng
    if logp_hat is None:
        logp_hat, _ = estimate_logp(model, x, ais_cfg, iwae_cfg, rng)
    res = optimize_local(model, x, Family.FFG, rng, **(local_kw or {}))
    return float(logp_hat - res.elbo_star.value)


__all__ = ["AisConfig", "IwaeConfig", "GapReport", "decompose", "aggregate", "estimate_logp",
           "kl_view", "gaussianness_score", "Posterior"]
