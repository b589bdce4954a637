"""Coupling-step flows over the latent (q_Flow) or over latent + auxiliary (q_AF).

A coupling step maps ``(a, b)`` to ``(a', b')`` with

    a' = a * s1(b) + m1(b)
    b' = b * s2(a') + m2(a')

where ``s = exp(clip(raw, -7, 7))`` keeps the scales positive.  The log
Jacobian determinant is the sum of the clipped raw scale outputs.

In split mode ``a`` and ``b`` are the first and second halves of ``z``; in
auxiliary mode ``a = z`` and ``b = v``, the latter drawn from ``q(v0|z0)``
(or a standard normal) and scored by a reverse model ``r(v|z)`` or
``r(v|x, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import diffnet
from .diffnet import Mlp, NumericalError
from .model import LOG_2PI, FfgParams, mlp_from_dict, mlp_to_dict

SCALE_CLAMP = 7.0


class FlowMode(str, Enum):
    SPLIT_LATENT = "split_latent"
    AUXILIARY = "auxiliary"


@dataclass
class CouplingStep:
    sigma1: Mlp
    sigma2: Mlp
    mu1: Mlp
    mu2: Mlp

    def __post_init__(self):
        h = self.sigma1.in_dim
        for net in (self.sigma1, self.sigma2, self.mu1, self.mu2):
            if net.in_dim != h or net.out_dim != h:
                raise ValueError("all coupling nets must map R^h -> R^h")

    @property
    def width(self):
        return self.sigma1.in_dim

    def nets(self):
        return (self.sigma1, self.sigma2, self.mu1, self.mu2)

    def parameters(self):
        return [p for net in self.nets() for p in net.parameters()]

    def copy(self):
        return CouplingStep(*(net.copy() for net in self.nets()))


def init_coupling(h, hidden, rng, activation="elu"):
    sizes = [h, *hidden, h]
    return CouplingStep(*(diffnet.init_mlp(sizes, rng, activation) for _ in range(4)))


def _scale(net, x):
    raw, tape = diffnet.forward(net, x)
    clipped = np.clip(raw, -SCALE_CLAMP, SCALE_CLAMP)
    inside = (raw > -SCALE_CLAMP) & (raw < SCALE_CLAMP)
    return clipped, np.exp(clipped), inside, tape


def couple_forward_vjp(step, a, b):
    """Forward coupling with a pullback ``(ga', gb', gld) -> (ga, gb, grads)``."""
    c1, e1, in1, t_s1 = _scale(step.sigma1, b)
    m1, t_m1 = diffnet.forward(step.mu1, b)
    a2 = a * e1 + m1
    c2, e2, in2, t_s2 = _scale(step.sigma2, a2)
    m2, t_m2 = diffnet.forward(step.mu2, a2)
    b2 = b * e2 + m2
    log_det = c1.sum(axis=-1) + c2.sum(axis=-1)
    if not np.all(np.isfinite(log_det)):
        raise NumericalError("non-finite coupling log-determinant")

    def pullback(ga2, gb2, gld):
        gld = np.asarray(gld, dtype=float)[..., None]
        gb = gb2 * e2
        gs2, da_s2 = diffnet.backward(step.sigma2, t_s2, (gb2 * b * e2 + gld) * in2)
        gm2, da_m2 = diffnet.backward(step.mu2, t_m2, np.broadcast_to(gb2, m2.shape))
        ga2 = ga2 + da_s2 + da_m2
        ga = ga2 * e1
        gs1, db_s1 = diffnet.backward(step.sigma1, t_s1, (ga2 * a * e1 + gld) * in1)
        gm1, db_m1 = diffnet.backward(step.mu1, t_m1, ga2)
        gb = gb + db_s1 + db_m1
        return ga, gb, gs1 + gs2 + gm1 + gm2

    return (a2, b2, log_det), pullback


def couple_forward(step, a, b):
    return couple_forward_vjp(step, a, b)[0]


def couple_inverse(step, a2, b2):
    m2 = step.mu2(a2)
    s2 = np.exp(np.clip(step.sigma2(a2), -SCALE_CLAMP, SCALE_CLAMP))
    b = (b2 - m2) / s2
    m1 = step.mu1(b)
    s1 = np.exp(np.clip(step.sigma1(b), -SCALE_CLAMP, SCALE_CLAMP))
    return (a2 - m1) / s1, b


@dataclass
class FlowPosterior:
    """Shared (amortized) or locally owned flow machinery.

    The Gaussian base over ``z`` is supplied separately, from the encoder
    or from local parameters.  ``v_base`` maps ``z0`` to ``(mu, logvar)`` of
    ``q(v0|z0)``; when ``None`` the auxiliary base is ``N(0, I)``.
    ``reverse`` maps ``z_T`` (or ``[x, z_T]`` when ``reverse_uses_x``) to the
    Gaussian parameters of ``r(v|.)``.
    """

    steps: list
    mode: FlowMode = FlowMode.SPLIT_LATENT
    v_base: Mlp | None = None
    reverse: Mlp | None = None
    reverse_uses_x: bool = False

    def __post_init__(self):
        self.mode = FlowMode(self.mode)
        if self.mode is FlowMode.AUXILIARY and self.reverse is None:
            raise ValueError("auxiliary flow needs a reverse model")

    def latent_dim(self):
        h = self.steps[0].width if self.steps else None
        if self.mode is FlowMode.SPLIT_LATENT:
            return None if h is None else 2 * h
        return self.reverse.out_dim // 2

    def nets(self):
        nets = [net for s in self.steps for net in s.nets()]
        if self.v_base is not None:
            nets.append(self.v_base)
        if self.reverse is not None:
            nets.append(self.reverse)
        return nets

    def parameters(self):
        return [p for net in self.nets() for p in net.parameters()]

    def copy(self):
        return FlowPosterior([s.copy() for s in self.steps], self.mode,
                             None if self.v_base is None else self.v_base.copy(),
                             None if self.reverse is None else self.reverse.copy(),
                             self.reverse_uses_x)


def init_flow(latent_dim, mode, rng, n_steps=2, hidden=(100, 100), aux_hidden=(100, 100),
              conditional_v=True, reverse_uses_x=False, data_dim=None, activation="elu",
              zero_output=False):
    """Xavier-initialized flow for ``latent_dim``-dimensional ``z``.

    With ``zero_output`` the last layer of every net is zeroed after the
    Xavier draw, so the flow starts as the identity and ``r`` and ``q(v)``
    start at ``N(0, I)``.
    """
    mode = FlowMode(mode)
    if mode is FlowMode.SPLIT_LATENT:
        if latent_dim % 2:
            raise ValueError("split flow needs an even latent dimension")
        steps = [init_coupling(latent_dim // 2, hidden, rng, activation) for _ in range(n_steps)]
        return _zeroed(FlowPosterior(steps, mode), zero_output)
    steps = [init_coupling(latent_dim, hidden, rng, activation) for _ in range(n_steps)]
    v_base = None
    if conditional_v:
        v_base = diffnet.init_mlp([latent_dim, *aux_hidden, 2 * latent_dim], rng, activation)
    if reverse_uses_x and not data_dim:
        raise ValueError("reverse_uses_x needs data_dim")
    r_in = latent_dim + (data_dim if reverse_uses_x else 0)
    reverse = diffnet.init_mlp([r_in, *aux_hidden, 2 * latent_dim], rng, activation)
    return _zeroed(FlowPosterior(steps, mode, v_base, reverse, reverse_uses_x), zero_output)


def _zeroed(flow, zero_output):
    if zero_output:
        for net in flow.nets():
            net.weights[-1][...] = 0.0
            net.biases[-1][...] = 0.0
    return flow


def _sum_to(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _gauss_logpdf(x, mu, logvar):
    d = x - mu
    return np.sum(-0.5 * LOG_2PI - 0.5 * logvar - 0.5 * d * d * np.exp(-logvar), axis=-1)


def _reverse_input(flow, x, z):
    if not flow.reverse_uses_x:
        return z
    x = np.broadcast_to(np.asarray(x, dtype=float), z.shape[:-1] + (np.shape(x)[-1],))
    return np.concatenate([x, z], axis=-1)


@dataclass
class FlowSample:
    z: np.ndarray
    log_q: np.ndarray
    log_r: np.ndarray
    v: np.ndarray | None = None


def transform_vjp(flow, base, eps_z, eps_v=None, x=None):
    """Draw ``z_T`` (and ``v_T``) from base noise and return a pullback.

    ``log_q`` is the density of the sampled variables under q (of the pair
    in auxiliary mode); ``log_r`` is the reverse-model score (zero unless
    auxiliary).  ``pullback(gz, glq, glr)`` returns ``(gmu, glogvar,
    flow_grads)`` with base gradients summed to the base shape and
    ``flow_grads`` ordered like ``flow.parameters()`` (empty for FFG).
    """
    mu, logvar = base.mu, base.logvar
    sd = np.exp(0.5 * logvar)
    z0 = mu + sd * eps_z
    log_q0 = np.sum(-0.5 * LOG_2PI - 0.5 * logvar - 0.5 * eps_z * eps_z, axis=-1)

    def base_grads(gz0, glq):
        gmu = _sum_to(gz0, np.shape(mu))
        glv = _sum_to(gz0 * eps_z * 0.5 * sd - 0.5 * glq[..., None], np.shape(logvar))
        return gmu, glv

    if flow is None:
        def pullback(gz, glq, glr=None):
            return (*base_grads(gz, np.asarray(glq, dtype=float)), [])
        return FlowSample(z0, log_q0, np.zeros_like(log_q0)), pullback

    if flow.mode is FlowMode.SPLIT_LATENT:
        h = z0.shape[-1] // 2
        a, b = z0[..., :h], z0[..., h:]
        log_q = log_q0
        v_tape = None
    else:
        if eps_v is None:
            raise ValueError("auxiliary flow needs eps_v")
        a = z0
        if flow.v_base is None:
            b = eps_v
            log_qv = np.sum(-0.5 * LOG_2PI - 0.5 * eps_v * eps_v, axis=-1)
            v_tape = None
        else:
            vout, v_tape = diffnet.forward(flow.v_base, z0)
            dv = z0.shape[-1]
            v_mu, v_lv = vout[..., :dv], vout[..., dv:]
            v_sd = np.exp(0.5 * v_lv)
            b = v_mu + v_sd * eps_v
            log_qv = np.sum(-0.5 * LOG_2PI - 0.5 * v_lv - 0.5 * eps_v * eps_v, axis=-1)
        log_q = log_q0 + log_qv

    pulls = []
    for step in flow.steps:
        (a, b, ld), pb = couple_forward_vjp(step, a, b)
        pulls.append(pb)
        log_q = log_q - ld

    if flow.mode is FlowMode.SPLIT_LATENT:
        z_t, v_t = np.concatenate([a, b], axis=-1), None
        log_r = np.zeros_like(log_q)
        r_tape = None
    else:
        z_t, v_t = a, b
        rin = _reverse_input(flow, x, z_t)
        rout, r_tape = diffnet.forward(flow.reverse, rin)
        dv = v_t.shape[-1]
        r_mu, r_lv = rout[..., :dv], rout[..., dv:]
        log_r = _gauss_logpdf(v_t, r_mu, r_lv)

    def pullback(gz, glq, glr=None):
        glq = np.asarray(glq, dtype=float)
        grads_r, grads_v = [], []
        if flow.mode is FlowMode.SPLIT_LATENT:
            ga, gb = gz[..., :h], gz[..., h:]
        else:
            glr_ = np.zeros_like(glq) if glr is None else np.asarray(glr, dtype=float)
            diff = v_t - r_mu
            prec = np.exp(-r_lv)
            g = glr_[..., None]
            gb = -g * diff * prec
            up = np.concatenate([g * diff * prec, g * (-0.5 + 0.5 * diff * diff * prec)], axis=-1)
            grads_r, drin = diffnet.backward(flow.reverse, r_tape, up)
            ga = gz + drin[..., -dv:]
        step_grads = []
        for pb in reversed(pulls):
            ga, gb, g_step = pb(ga, gb, -glq)
            step_grads.append(g_step)
        step_grads.reverse()
        if flow.mode is FlowMode.SPLIT_LATENT:
            gz0 = np.concatenate([ga, gb], axis=-1)
        else:
            gz0 = ga
            if flow.v_base is not None:
                up = np.concatenate([gb, gb * eps_v * 0.5 * v_sd - 0.5 * glq[..., None]], axis=-1)
                grads_v, dz0 = diffnet.backward(flow.v_base, v_tape, up)
                gz0 = gz0 + dz0
        gmu, glv = base_grads(gz0, glq)
        flat = [g for gs in step_grads for g in gs] + list(grads_v) + list(grads_r)
        return gmu, glv, flat

    return FlowSample(z_t, log_q, log_r, v_t), pullback


def sample_q_flow(flow, base, eps):
    """``(z_T, log q_T(z_T))`` for a split-latent flow; ``flow=None`` is plain FFG."""
    if flow is not None and flow.mode is not FlowMode.SPLIT_LATENT:
        raise ValueError("sample_q_flow needs a split-latent flow")
    s, _ = transform_vjp(flow, base, eps)
    return s.z, s.log_q


def sample_q_af(flow, base, eps_z, eps_v, x=None):
    """``(z_T, v_T, log q(z_T, v_T), log r(v_T | .))`` for an auxiliary flow."""
    if flow is None or flow.mode is not FlowMode.AUXILIARY:
        raise ValueError("sample_q_af needs an auxiliary flow")
    s, _ = transform_vjp(flow, base, eps_z, eps_v, x)
    return s.z, s.v, s.log_q, s.log_r


def log_r(flow, x, z, v):
    rout = flow.reverse(_reverse_input(flow, x, z))
    dv = np.shape(v)[-1]
    return _gauss_logpdf(v, rout[..., :dv], rout[..., dv:])


def flow_log_density(flow, base, z):
    """``log q_T(z)`` of a split-latent flow via the exact inverse."""
    if flow is None:
        return _gauss_logpdf(z, base.mu, base.logvar)
    if flow.mode is not FlowMode.SPLIT_LATENT:
        raise ValueError("marginal density only available for split-latent flows")
    h = z.shape[-1] // 2
    a, b = z[..., :h], z[..., h:]
    for step in reversed(flow.steps):
        a, b = couple_inverse(step, a, b)
    z0 = np.concatenate([a, b], axis=-1)
    total_ld = 0.0
    a, b = z0[..., :h], z0[..., h:]
    for step in flow.steps:
        a, b, ld = couple_forward(step, a, b)
        total_ld = total_ld + ld
    return _gauss_logpdf(z0, base.mu, base.logvar) - total_ld


def flow_to_dict(flow):
    return {
        "mode": flow.mode.value,
        "steps": [[mlp_to_dict(n) for n in s.nets()] for s in flow.steps],
        "v_base": None if flow.v_base is None else mlp_to_dict(flow.v_base),
        "reverse": None if flow.reverse is None else mlp_to_dict(flow.reverse),
        "reverse_uses_x": flow.reverse_uses_x,
    }


def flow_from_dict(d):
    return FlowPosterior(
        steps=[CouplingStep(*(mlp_from_dict(n) for n in s)) for s in d["steps"]],
        mode=FlowMode(d["mode"]),
        v_base=None if d["v_base"] is None else mlp_from_dict(d["v_base"]),
        reverse=None if d["reverse"] is None else mlp_from_dict(d["reverse"]),
        reverse_uses_x=bool(d["reverse_uses_x"]),
    )


__all__ = [
    "FfgParams", "CouplingStep", "FlowMode", "FlowPosterior", "FlowSample", "SCALE_CLAMP",
    "init_coupling", "init_flow", "couple_forward", "couple_forward_vjp", "couple_inverse",
    "transform_vjp", "sample_q_flow", "sample_q_af", "log_r", "flow_log_density",
    "flow_to_dict", "flow_from_dict",
]
