"""Small reverse-mode core for MLP-shaped computations.

Every network in the package is an :class:`Mlp`: a stack of affine layers
with a pointwise nonlinearity between them.  ``forward`` records what
``backward`` needs on a :class:`GradTape`; gradients come back as a flat
list ordered like :meth:`Mlp.parameters`, which is also the layout the
Adam update works on.

Inputs may carry any number of leading batch axes; parameter gradients are
summed over them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("elu", "tanh", "identity", "sigmoid")


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value.

    ``where`` names the stage (e.g. ``"layer 2"`` or ``"pixel 17"``).
    """

    def __init__(self, message, where=None):
        super().__init__(message if where is None else f"{message} ({where})")
        self.where = where


def _act(name, h):
    if name == "elu":
        return np.where(h > 0, h, np.expm1(np.minimum(h, 0.0)))
    if name == "tanh":
        return np.tanh(h)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * h))
    if name == "identity":
        return h
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, h, y):
    # derivative expressed through pre-activation h and output y
    if name == "elu":
        return np.where(h > 0, 1.0, y + 1.0)
    if name == "tanh":
        return 1.0 - y * y
    if name == "sigmoid":
        return y * (1.0 - y)
    if name == "identity":
        return np.ones_like(h)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Mlp:
    """Feedforward map ``x -> y``.

    ``weights[l]`` has shape ``(out_l, in_l)`` and ``biases[l]`` shape
    ``(out_l,)``.  ``activation`` is applied after every hidden layer and
    ``output_activation`` after the last one.
    """

    weights: list
    biases: list
    activation: str = "elu"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {l}: weight {w.shape} / bias {b.shape} mismatch")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input width {w.shape[1]} does not "
                                 f"match previous output {self.weights[l - 1].shape[0]}")
        for name in (self.activation, self.output_activation):
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def sizes(self):
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def parameters(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live arrays."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.activation, self.output_activation)

    def __call__(self, x):
        return forward(self, x)[0]


@dataclass
class GradTape:
    """Per-layer inputs, pre-activations and outputs of one forward pass."""

    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


def xavier_init(fan_in, fan_out, rng):
    """Glorot-uniform weight matrix of shape ``(fan_out, fan_in)``."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be positive")
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def init_mlp(sizes, rng, activation="elu", output_activation="identity"):
    """Build an :class:`Mlp` with Xavier weights and zero biases.

    >>> net = init_mlp([3, 5, 2], np.random.default_rng(0))
    >>> net.sizes
    [3, 5, 2]
    """
    weights = [xavier_init(i, o, rng) for i, o in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(o) for o in sizes[1:]]
    return Mlp(weights, biases, activation, output_activation)


def zero_mlp(sizes, activation="elu", output_activation="identity"):
    weights = [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(o) for o in sizes[1:]]
    return Mlp(weights, biases, activation, output_activation)


def forward(net, x, check=True):
    """Evaluate ``net`` at ``x`` (shape ``(..., in_dim)``).

    Returns ``(y, tape)``.  With ``check`` on, raises :class:`NumericalError`
    naming the first layer whose output is not finite.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.in_dim:
        raise ValueError(f"input width {x.shape[-1]} != {net.in_dim}")
    tape = GradTape()
    h = x
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        tape.inputs.append(h)
        pre = h @ w.T + b
        act = net.output_activation if l == last else net.activation
        h = _act(act, pre)
        if check and not np.all(np.isfinite(h)):
            raise NumericalError("non-finite activation", f"layer {l}")
        tape.pre.append(pre)
        tape.outputs.append(h)
    return h, tape


def backward(net, tape, upstream, need_input=True):
    """Vector-Jacobian product of ``upstream . y`` for a recorded pass.

    Returns ``(grads, dx)`` where ``grads`` is ordered like
    :meth:`Mlp.parameters` and ``dx`` has the input's shape (``None`` when
    ``need_input`` is false).
    """
    upstream = np.asarray(upstream, dtype=float)
    if len(tape.outputs) != len(net.weights) or upstream.shape != tape.outputs[-1].shape:
        raise ValueError("tape does not match network / upstream shape")
    grads = [None] * (2 * len(net.weights))
    g = upstream
    last = len(net.weights) - 1
    for l in range(last, -1, -1):
        act = net.output_activation if l == last else net.activation
        if act != "identity":
            g = g * _act_grad(act, tape.pre[l], tape.outputs[l])
        inp = tape.inputs[l]
        g2 = g.reshape(-1, g.shape[-1])
        grads[2 * l] = g2.T @ inp.reshape(-1, inp.shape[-1])
        grads[2 * l + 1] = g2.sum(axis=0)
        if l or need_input:
            g = g @ net.weights[l]
    return grads, (g if need_input else None)


def add_grads(acc, new):
    """Accumulate ``new`` into ``acc`` (lists of arrays); ``None`` starts fresh."""
    if acc is None:
        return [g.copy() for g in new]
    for a, g in zip(acc, new):
        a += g
    return acc


def finite_difference_grad(f, params, eps=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. arrays in ``params``.

    ``params`` entries are perturbed in place and restored; ``f`` takes no
    arguments and must read the live arrays.
    """
    out = []
    for p in params:
        g = np.zeros_like(p, dtype=float)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = f()
            flat[i] = old - eps
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * eps)
        out.append(g)
    return out


@dataclass
class AdamState:
    """Bias-corrected Adam moments for a fixed list of parameter arrays."""

    m: list
    v: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params, lr=1e-3, **kw):
        return cls([np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(state, params, grads, maximize=False):
    """Apply one Adam update to ``params`` in place.

    Descends by default; ``maximize=True`` ascends.  Non-finite gradients
    leave everything untouched and raise :class:`NumericalError`.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state disagree in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient {i} shape {g.shape} != {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient, update rejected", f"parameter {i}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    sign = 1.0 if maximize else -1.0
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p += sign * state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
