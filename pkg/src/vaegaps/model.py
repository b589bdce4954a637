"""Generative model, amortized FFG encoder and their log densities.

Log densities take ``z`` with arbitrary leading axes; ``x`` broadcasts
against them.  Functions with a ``_vjp`` suffix return ``(value, pullback)``
where ``pullback(g)`` maps a cotangent shaped like ``value`` to gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import diffnet
from .diffnet import Mlp, NumericalError

LOG_2PI = float(np.log(2.0 * np.pi))
CHECKPOINT_VERSION = 1


class Likelihood(str, Enum):
    BERNOULLI_LOGITS = "bernoulli_logits"
    DIAGONAL_GAUSSIAN = "diagonal_gaussian"


@dataclass
class FfgParams:
    """Fully factorized Gaussian; arrays share shape ``(..., latent_dim)``."""

    mu: np.ndarray
    logvar: np.ndarray

    @property
    def var(self):
        return np.exp(self.logvar)


@dataclass
class VaeModel:
    """Standard-normal prior, decoder ``z -> likelihood params``, encoder ``x -> (mu, logvar)``.

    ``flow`` holds the shared flow/auxiliary nets of a model trained with an
    expressive posterior (``None`` for plain FFG).
    """

    latent_dim: int
    decoder: Mlp
    encoder: Mlp
    likelihood: Likelihood = Likelihood.BERNOULLI_LOGITS
    flow: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.likelihood = Likelihood(self.likelihood)
        if self.encoder.out_dim != 2 * self.latent_dim:
            raise ValueError("encoder must output 2 * latent_dim values")
        if self.decoder.in_dim != self.latent_dim:
            raise ValueError("decoder input must be latent_dim wide")
        if self.likelihood is Likelihood.DIAGONAL_GAUSSIAN and self.decoder.out_dim % 2:
            raise ValueError("gaussian decoder must output mean and log-variance")

    @property
    def data_dim(self):
        return self.encoder.in_dim


def encode(model, x):
    out, _ = diffnet.forward(model.encoder, x)
    d = model.latent_dim
    return FfgParams(out[..., :d], out[..., d:])


def encode_vjp(model, x):
    out, tape = diffnet.forward(model.encoder, x)
    d = model.latent_dim

    def pullback(gmu, glogvar):
        grads, _ = diffnet.backward(model.encoder, tape,
                                    np.concatenate([gmu, glogvar], axis=-1), need_input=False)
        return grads

    return FfgParams(out[..., :d], out[..., d:]), pullback


def sample_reparam(q, eps):
    """``mu + exp(logvar / 2) * eps``; ``eps`` may carry extra leading axes."""
    return q.mu + np.exp(0.5 * q.logvar) * eps


def log_q_ffg(z, q):
    diff = z - q.mu
    return np.sum(-0.5 * LOG_2PI - 0.5 * q.logvar - 0.5 * diff * diff * np.exp(-q.logvar),
                  axis=-1)


def log_prior(z):
    z = np.asarray(z, dtype=float)
    return np.sum(-0.5 * LOG_2PI - 0.5 * z * z, axis=-1)


def _softplus(t):
    return np.logaddexp(0.0, t)


def _likelihood_terms(model, x, out):
    if model.likelihood is Likelihood.BERNOULLI_LOGITS:
        # x*l - softplus(l), stable for any logit
        per = x * out - _softplus(out)
        dout = x - 0.5 * (1.0 + np.tanh(0.5 * out))
        return per, dout
    half = out.shape[-1] // 2
    mean, logvar = out[..., :half], out[..., half:]
    prec = np.exp(-logvar)
    diff = x - mean
    per = -0.5 * LOG_2PI - 0.5 * logvar - 0.5 * diff * diff * prec
    dout = np.concatenate([diff * prec, -0.5 + 0.5 * diff * diff * prec], axis=-1)
    return per, dout


def _check_pixels(per):
    if not np.all(np.isfinite(per)):
        flat = np.moveaxis(per, -1, 0).reshape(per.shape[-1], -1)
        idx = int(np.nonzero(~np.all(np.isfinite(flat), axis=1))[0][0])
        raise NumericalError("non-finite log-likelihood", f"pixel {idx}")


def log_likelihood(model, x, z):
    out, _ = diffnet.forward(model.decoder, z)
    per, _ = _likelihood_terms(model, np.asarray(x, dtype=float), out)
    _check_pixels(per)
    return per.sum(axis=-1)


def log_likelihood_vjp(model, x, z, need_params=True, check=True):
    """Value of ``log p(x|z)`` and a pullback to ``(dz, decoder_grads)``.

    ``check=False`` lets non-finite values through (callers that treat
    them as rejections).
    """
    out, tape = diffnet.forward(model.decoder, z, check=check)
    x = np.asarray(x, dtype=float)
    per, dout = _likelihood_terms(model, x, out)
    if check:
        _check_pixels(per)
    value = per.sum(axis=-1)

    def pullback(g):
        up = np.broadcast_to(np.asarray(g, dtype=float)[..., None] * dout, out.shape)
        grads, dz = diffnet.backward(model.decoder, tape, up)
        return dz, (grads if need_params else None)

    return value, pullback


def log_joint(model, x, z):
    return log_prior(z) + log_likelihood(model, x, z)


def sample_x(model, z, rng):
    """Draw ``x ~ p(x|z)``."""
    out = model.decoder(z)
    if model.likelihood is Likelihood.BERNOULLI_LOGITS:
        p = 0.5 * (1.0 + np.tanh(0.5 * out))
        return (rng.random(out.shape) < p).astype(float)
    half = out.shape[-1] // 2
    return out[..., :half] + np.exp(0.5 * out[..., half:]) * rng.standard_normal(out[..., :half].shape)


def log_joint_and_grad(model, x, z):
    """``log p(x, z)`` and its gradient w.r.t. ``z``."""
    ll, pull = log_likelihood_vjp(model, x, z, need_params=False)
    dz, _ = pull(np.ones_like(ll))
    return log_prior(z) + ll, dz - z


def true_posterior_grid(model, x, lo=-4.0, hi=4.0, n=200):
    """Normalized posterior density on an ``n x n`` cell-centred grid over ``[lo, hi]^2``.

    Returns ``(z1, z2, density)`` with ``density[i, j]`` at ``(z1[i], z2[j])``
    and ``density.sum() * cell_area == 1``.
    """
    if model.latent_dim != 2:
        raise ValueError("grid posterior needs a 2-D latent space")
    z1, z2, cell = grid_axes(lo, hi, n)
    zz = np.stack(np.meshgrid(z1, z2, indexing="ij"), axis=-1)
    logp = log_joint(model, x, zz)
    return z1, z2, normalize_log_grid(logp, cell)


def grid_axes(lo, hi, n):
    step = (hi - lo) / n
    centers = lo + step * (np.arange(n) + 0.5)
    return centers, centers.copy(), step * step


def normalize_log_grid(logd, cell_area):
    m = np.max(logd)
    if not np.isfinite(m):
        raise NumericalError("density has no finite mass on the grid")
    w = np.exp(logd - m)
    total = w.sum() * cell_area
    if total <= 0 or not np.isfinite(total):
        raise NumericalError("grid density underflowed")
    return w / total


def linear_gaussian_parts(model):
    """``(A, b, noise_var)`` when the decoder is a single affine Gaussian layer
    whose log-variance ignores ``z``; otherwise ``None``."""
    dec = model.decoder
    if (model.likelihood is not Likelihood.DIAGONAL_GAUSSIAN or len(dec.weights) != 1
            or dec.output_activation != "identity"):
        return None
    half = dec.out_dim // 2
    w, b = dec.weights[0], dec.biases[0]
    if np.any(w[half:] != 0.0):
        return None
    return w[:half], b[:half], np.exp(b[half:])


def expected_log_joint_gaussian(model, x, q):
    """Closed-form ``E_q[log p(x, z)]`` for a linear-Gaussian decoder."""
    parts = linear_gaussian_parts(model)
    if parts is None:
        raise ValueError("closed form needs a linear-Gaussian decoder")
    a, b, nv = parts
    var = q.var
    mean = q.mu @ a.T + b
    diff = x - mean
    e_lik = np.sum(-0.5 * LOG_2PI - 0.5 * np.log(nv) - 0.5 * diff * diff / nv, axis=-1)
    e_lik = e_lik - 0.5 * np.sum(var * np.sum(a * a / nv[:, None], axis=0), axis=-1)
    e_prior = np.sum(-0.5 * LOG_2PI - 0.5 * (q.mu ** 2 + var), axis=-1)
    return e_lik + e_prior


def ffg_entropy(q):
    return np.sum(0.5 * (LOG_2PI + 1.0 + q.logvar), axis=-1)


# --- checkpoints -----------------------------------------------------------

def mlp_to_dict(net):
    return {
        "activation": net.activation,
        "output_activation": net.output_activation,
        "shapes": [list(w.shape) for w in net.weights],
        "weights": [w.reshape(-1).tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def mlp_from_dict(d):
    weights = [np.asarray(w, dtype=float).reshape(s) for w, s in zip(d["weights"], d["shapes"])]
    biases = [np.asarray(b, dtype=float) for b in d["biases"]]
    return Mlp(weights, biases, d["activation"], d["output_activation"])


def model_to_dict(model, seed=None, config=None):
    from .flows import flow_to_dict

    return {
        "version": CHECKPOINT_VERSION,
        "latent_dim": model.latent_dim,
        "likelihood": model.likelihood.value,
        "init": "glorot_uniform",
        "decoder": mlp_to_dict(model.decoder),
        "encoder": mlp_to_dict(model.encoder),
        "flow": None if model.flow is None else flow_to_dict(model.flow),
        "seed": seed,
        "config": config,
        "meta": model.meta,
    }


def model_from_dict(d):
    from .flows import flow_from_dict

    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    return VaeModel(
        latent_dim=int(d["latent_dim"]),
        decoder=mlp_from_dict(d["decoder"]),
        encoder=mlp_from_dict(d["encoder"]),
        likelihood=Likelihood(d["likelihood"]),
        flow=None if d.get("flow") is None else flow_from_dict(d["flow"]),
        meta=dict(d.get("meta") or {}),
    )


def save_checkpoint(model, path, seed=None, config=None):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model, seed, config), fh)


def load_checkpoint(path):
    with open(path) as fh:
        d = json.load(fh)
    return model_from_dict(d), d
