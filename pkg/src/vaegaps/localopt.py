"""Per-datapoint optimization of variational parameters (q*).

The decoder stays frozen.  The Gaussian base starts at the prior, flow nets
start from Xavier draws with a zeroed output layer (the identity flow), and
Adam (lr 1e-3) ascends a 100-sample bound.  Every 100 steps the mean of the
last 100 bound values is compared with the best mean so far; ten windows in
a row without a strict improvement stop the run.  The returned parameters
are the iterate average over the best window.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import diffnet
from .bounds import BoundEstimate, Posterior, amortized_posterior, elbo, objective_vjp
from .diffnet import NumericalError
from .flows import FlowMode, init_flow
from .model import FfgParams, encode

log = logging.getLogger(__name__)


class Family(str, Enum):
    FFG = "ffg"
    FLOW = "flow"
    AUX_FLOW = "aux_flow"


@dataclass
class LocalQ:
    """Variational parameters owned by a single datapoint."""

    family: Family
    base: FfgParams
    flow: object = None

    def posterior(self, x):
        return Posterior(self.base, self.flow, np.asarray(x, dtype=float))

    def parameters(self):
        extra = [] if self.flow is None else self.flow.parameters()
        return [self.base.mu, self.base.logvar] + extra

    def snapshot(self):
        return [p.copy() for p in self.parameters()]

    def restore(self, values):
        for p, v in zip(self.parameters(), values):
            p[...] = v


@dataclass
class ConvergenceMonitor:
    """Windowed stall detector: stop after ``patience`` non-improving windows."""

    window: int = 100
    patience: int = 10
    values: list = field(default_factory=list)
    best_window_avg: float = -np.inf
    stall_count: int = 0

    def update(self, value):
        """Record one bound value; returns ``True`` when a window just set a new best."""
        self.values.append(float(value))
        if len(self.values) < self.window:
            return False
        avg = float(np.mean(self.values))
        self.values.clear()
        if avg > self.best_window_avg:
            self.best_window_avg = avg
            self.stall_count = 0
            return True
        self.stall_count += 1
        return False

    @property
    def done(self):
        return self.stall_count >= self.patience


@dataclass
class FlowConfig:
    n_steps: int = 2
    hidden: tuple = (100, 100)
    aux_hidden: tuple = (100, 100)
    activation: str = "elu"
    # start at the identity flow so the search begins inside the FFG family
    zero_output: bool = True


def new_local_q(latent_dim, family, rng, flow_cfg=None):
    family = Family(family)
    cfg = flow_cfg or FlowConfig()
    base = FfgParams(np.zeros(latent_dim), np.zeros(latent_dim))
    flow = None
    if family is Family.FLOW:
        flow = init_flow(latent_dim, FlowMode.SPLIT_LATENT, rng, cfg.n_steps, cfg.hidden,
                         activation=cfg.activation, zero_output=cfg.zero_output)
    elif family is Family.AUX_FLOW:
        flow = init_flow(latent_dim, FlowMode.AUXILIARY, rng, cfg.n_steps, cfg.hidden,
                         cfg.aux_hidden, conditional_v=False, activation=cfg.activation,
                         zero_output=cfg.zero_output)
    return LocalQ(family, base, flow)


@dataclass
class LocalResult:
    q: LocalQ
    elbo_star: BoundEstimate
    steps_used: int
    converged: bool
    restarts: int = 0
    best_window_avg: float = float("nan")


def _run(model, x, q, rng, max_steps, n_samples, lr, window, patience):
    params = q.parameters()
    adam = diffnet.AdamState.for_params(params, lr=lr)
    monitor = ConvergenceMonitor(window, patience)
    best = q.snapshot()
    # parameters averaged over the current window; the best window's mean is kept
    running = [np.zeros_like(p) for p in params]
    post = q.posterior(x)
    steps = 0
    while steps < max_steps and not monitor.done:
        eps_z, eps_v = post.draw_noise(n_samples, rng)
        values, pull = objective_vjp(model, x, post, eps_z, eps_v, 1.0, need_decoder=False)
        if not np.all(np.isfinite(values)):
            raise NumericalError("non-finite local bound", f"step {steps}")
        g = pull(np.full(values.shape, 1.0 / n_samples))
        diffnet.adam_step(adam, params, [g.mu, g.logvar] + g.flow, maximize=True)
        steps += 1
        for r, p in zip(running, params):
            r += p
        if monitor.update(values.mean()):
            best = [r / window for r in running]
        if steps % window == 0:
            for r in running:
                r[...] = 0.0
    q.restore(best)
    return steps, monitor.done, monitor.best_window_avg


def optimize_local(model, x, family=Family.FFG, rng=None, max_steps=50_000, n_samples=100,
                   lr=1e-3, n_final=5000, flow_cfg=None, window=100, patience=10):
    """Fit q* for one datapoint and re-estimate its ELBO with ``n_final`` fresh samples.

    A numerical failure triggers one restart from a fresh seed; a second
    failure propagates.
    """
    rng = np.random.default_rng() if rng is None else rng
    x = np.asarray(x, dtype=float)
    restarts = 0
    while True:
        q = new_local_q(model.latent_dim, family, rng, flow_cfg)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                steps, converged, best_avg = _run(model, x, q, rng, max_steps, n_samples, lr,
                                                  window, patience)
            break
        except NumericalError:
            if restarts:
                raise
            restarts += 1
            log.warning("local optimization failed; restarting once with a new seed")
            rng = np.random.default_rng(rng.integers(2**63))
    if not converged:
        log.info("local optimization hit the %d-step budget before converging", max_steps)
    est = elbo(model, q.posterior(x), x, n_final, rng)
    return LocalResult(q, est, steps, converged, restarts, best_avg)


def amortized_elbo(model, x, family=Family.FFG, n=5000, rng=None):
    """Bound at the encoder's parameters (with the model's shared flow, if any)."""
    rng = np.random.default_rng() if rng is None else rng
    family = Family(family)
    if family is Family.FFG:
        q = Posterior(encode(model, x), None, np.asarray(x, dtype=float))
    else:
        if model.flow is None:
            raise ValueError(f"model has no amortized flow for family {family.value}")
        q = amortized_posterior(model, x)
    return elbo(model, q, x, n, rng)


def append_jsonl(path, index, family, result):
    """Append one resumable record to a JSON-lines file."""
    rec = {"index": int(index), "family": Family(family).value,
           "elbo_star": result.elbo_star.value, "std_error": result.elbo_star.std_error,
           "steps": result.steps_used, "converged": bool(result.converged)}
    with open(path, "a") as fh:
        fh.write(json.dumps(rec) + "\n")
    return rec


def read_jsonl(path):
    try:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except FileNotFoundError:
        return []
