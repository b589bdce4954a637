"""Minibatch training with entropy warm-up, and encoder retraining on a frozen decoder."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .. import diffnet
from ..bounds import Posterior, amortized_posterior, elbo, objective_vjp
from ..diffnet import NumericalError, init_mlp
from ..flows import FlowMode, init_flow
from ..localopt import Family
from ..model import Likelihood, VaeModel, encode_vjp

log = logging.getLogger(__name__)


def lam_at(epoch, warmup_epochs):
    """Weight on ``log q`` at (fractional) ``epoch``: linear from 0 to 1 over the warm-up."""
    if warmup_epochs <= 0:
        return 1.0
    return float(min(1.0, max(0.0, epoch / warmup_epochs)))


def model_family(model):
    if model.flow is None:
        return Family.FFG
    if model.flow.mode is FlowMode.AUXILIARY:
        return Family.AUX_FLOW
    return Family.FLOW


def build_flow(family, latent_dim, rng, model_cfg, data_dim):
    family = Family(family)
    if family is Family.FFG:
        return None
    mode = FlowMode.SPLIT_LATENT if family is Family.FLOW else FlowMode.AUXILIARY
    return init_flow(latent_dim, mode, rng, model_cfg.flow_steps, tuple(model_cfg.flow_hidden),
                     tuple(model_cfg.aux_hidden), conditional_v=True,
                     reverse_uses_x=model_cfg.reverse_uses_x, data_dim=data_dim,
                     activation="elu", zero_output=model_cfg.flow_identity_start)


def build_model(model_cfg, data_dim, likelihood, rng):
    """Fresh VAE following ``model_cfg`` (Xavier weights, zero biases)."""
    likelihood = Likelihood(likelihood)
    d = model_cfg.latent_dim
    out = data_dim * (2 if likelihood is Likelihood.DIAGONAL_GAUSSIAN else 1)
    act = model_cfg.activation
    decoder = init_mlp([d, *model_cfg.decoder_hidden, out], rng, act)
    encoder = init_mlp([data_dim, *model_cfg.encoder_hidden, 2 * d], rng, act)
    flow = build_flow(model_cfg.family, d, rng, model_cfg, data_dim)
    return VaeModel(d, decoder, encoder, likelihood, flow, {"family": model_cfg.family})


def trainable(model, decoder=True):
    params = list(model.decoder.parameters()) if decoder else []
    params += model.encoder.parameters()
    if model.flow is not None:
        params += model.flow.parameters()
    return params


def decoder_hash(model):
    h = hashlib.sha256()
    for p in model.decoder.parameters():
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def batch_objective(model, xb, lam, n_samples, rng, train_decoder=True):
    """Mean annealed objective over a minibatch and its gradient (ordered like :func:`trainable`)."""
    base, enc_pull = encode_vjp(model, xb)
    q = Posterior(base, model.flow, xb)
    eps_z, eps_v = q.draw_noise(n_samples, rng)
    values, pull = objective_vjp(model, xb, q, eps_z, eps_v, lam, need_decoder=train_decoder)
    if not np.all(np.isfinite(values)):
        raise NumericalError("non-finite training objective")
    g = pull(np.full(values.shape, 1.0 / values.size))
    grads = list(g.decoder) if train_decoder else []
    grads += enc_pull(g.mu, g.logvar) + list(g.flow)
    return float(values.mean()), grads


@dataclass
class TrainResult:
    model: VaeModel
    history: list = field(default_factory=list)
    diverged: bool = False
    epochs_completed: int = 0


def _track(model, data, n, rng):
    if data is None or not len(data):
        return None
    return float(np.mean(elbo(model, amortized_posterior(model, data), data, n, rng).value))


def fit(model, train_x, epochs, batch_size, lr, rng, warmup_epochs=0.0, n_samples=1,
        train_decoder=True, lr_decay=1.0, val_x=None, track_subset=100, track_samples=10,
        on_epoch=None):
    """Adam ascent of the annealed bound over ``epochs`` passes of ``train_x``.

    ``on_epoch(epoch, model)`` is called before the first epoch (with 0) and
    after each completed epoch.  A non-finite objective or gradient stops
    training and restores the parameters from the end of the last good epoch.
    """
    params = trainable(model, train_decoder)
    adam = diffnet.AdamState.for_params(params, lr=lr)
    n = len(train_x)
    n_batches = max(1, int(np.ceil(n / batch_size)))
    track_rng = np.random.default_rng(rng.integers(2**63))
    tr_sub = train_x[:track_subset]
    va_sub = None if val_x is None else val_x[:track_subset]
    history = []
    if on_epoch is not None:
        on_epoch(0, model)
    good = [p.copy() for p in params]
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        try:
            for b in range(n_batches):
                xb = train_x[order[b * batch_size:(b + 1) * batch_size]]
                lam = lam_at(epoch + b / n_batches, warmup_epochs)
                with np.errstate(over="ignore", invalid="ignore"):
                    value, grads = batch_objective(model, xb, lam, n_samples, rng, train_decoder)
                diffnet.adam_step(adam, params, grads, maximize=True)
                total += value * len(xb)
        except NumericalError as err:
            log.error("training diverged in epoch %d: %s", epoch + 1, err)
            for p, v in zip(params, good):
                p[...] = v
            return TrainResult(model, history, True, epoch)
        adam.lr *= lr_decay
        for p, v in zip(params, good):
            v[...] = p
        rec = {"epoch": epoch + 1, "lam": lam_at(epoch + 1, warmup_epochs),
               "objective": total / n,
               "train_elbo": _track(model, tr_sub, track_samples, track_rng),
               "val_elbo": _track(model, va_sub, track_samples, track_rng)}
        history.append(rec)
        log.info("epoch %d objective %.4f train %.4f", epoch + 1, rec["objective"],
                 rec["train_elbo"])
        if on_epoch is not None:
            on_epoch(epoch + 1, model)
    return TrainResult(model, history, False, epochs)


def likelihood_for(dataset):
    from .data import DataSource

    if dataset.source is DataSource.SYNTHETIC_GAUSS:
        return Likelihood.DIAGONAL_GAUSSIAN
    return Likelihood.BERNOULLI_LOGITS


def train(cfg, dataset, on_epoch=None):
    """Build a model from ``cfg`` and train it on the dataset's ``"train"`` split."""
    rng = np.random.default_rng(cfg.train.seed)
    model = build_model(cfg.model, dataset.dim, likelihood_for(dataset), rng)
    val = dataset.split("val") if "val" in dataset.splits else None
    t = cfg.train
    return fit(model, dataset.split("train"), t.epochs, t.batch_size, t.lr, rng, t.warmup_epochs,
               t.n_samples, True, t.lr_decay, val, t.track_subset, t.track_samples, on_epoch)


def retrain_encoder(model, dataset, cfg, family=None, encoder_hidden=None, seed=None,
                    on_epoch=None):
    """Discard the encoder (and flow) and train a new one against the frozen decoder.

    ``encoder_hidden=[]`` gives a linear encoder.  Raises ``RuntimeError``
    if the decoder parameters changed.
    """
    r = cfg.retrain
    family = Family(family or r.family)
    hidden = list(r.encoder_hidden if encoder_hidden is None else encoder_hidden)
    rng = np.random.default_rng(r.seed if seed is None else seed)
    d = model.latent_dim
    before = decoder_hash(model)
    encoder = init_mlp([model.data_dim, *hidden, 2 * d], rng, cfg.model.activation)
    flow = build_flow(family, d, rng, cfg.model, model.data_dim)
    meta = dict(model.meta, family=family.value, retrained=True, encoder_hidden=hidden)
    new = VaeModel(d, model.decoder.copy(), encoder, model.likelihood, flow, meta)
    val = dataset.split("val") if "val" in dataset.splits else None
    res = fit(new, dataset.split("train"), r.epochs, cfg.train.batch_size, r.lr, rng, 0.0,
              cfg.train.n_samples, False, 1.0, val, cfg.train.track_subset,
              cfg.train.track_samples, on_epoch)
    if decoder_hash(new) != before:
        raise RuntimeError("decoder changed during encoder retraining")
    return res
