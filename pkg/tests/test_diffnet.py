import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaegaps import diffnet
from vaegaps.diffnet import (
    AdamState,
    Mlp,
    NumericalError,
    adam_step,
    backward,
    finite_difference_grad,
    forward,
    init_mlp,
    xavier_init,
)


def _rel_err(a, b):
    a, b = np.concatenate([np.ravel(x) for x in a]), np.concatenate([np.ravel(x) for x in b])
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(b)))


def check_net_grads(net, x, rng):
    """Compare backward() against central differences for a random linear readout."""
    y, tape = forward(net, x)
    c = rng.standard_normal(y.shape)
    grads, dx = backward(net, tape, c)
    params = net.parameters()
    fd = finite_difference_grad(lambda: float(np.sum(c * forward(net, x)[0])), params)
    x_arr = np.array(x, dtype=float)
    fd_x = finite_difference_grad(lambda: float(np.sum(c * forward(net, x_arr)[0])), [x_arr])
    return _rel_err(grads, fd), _rel_err([dx], fd_x)


class TestForward:
    def test_identity_layer(self):
        net = Mlp([np.eye(3)], [np.zeros(3)], "identity", "identity")
        x = np.array([0.5, -1.0, 2.0])
        np.testing.assert_array_equal(net(x), x)

    def test_batch_axes(self):
        rng = np.random.default_rng(0)
        net = init_mlp([3, 4, 2], rng)
        x = rng.standard_normal((5, 7, 3))
        y = net(x)
        assert y.shape == (5, 7, 2)
        np.testing.assert_allclose(y[2, 3], net(x[2, 3]))

    @pytest.mark.parametrize("act", diffnet.ACTIVATIONS)
    def test_activation_values(self, act):
        h = np.linspace(-3, 3, 13)
        net = Mlp([np.eye(13)], [np.zeros(13)], "identity", act)
        expected = {"elu": np.where(h > 0, h, np.exp(h) - 1), "tanh": np.tanh(h),
                    "identity": h, "sigmoid": 1 / (1 + np.exp(-h))}[act]
        np.testing.assert_allclose(net(h), expected, atol=1e-12)

    def test_non_finite_names_layer(self):
        net = Mlp([np.array([[1e308]]), np.array([[1e308]])], [np.zeros(1), np.zeros(1)],
                  "identity", "identity")
        with np.errstate(over="ignore"), pytest.raises(NumericalError) as info:
            forward(net, np.array([10.0]))
        assert info.value.where == "layer 0"

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            Mlp([np.zeros((2, 3)), np.zeros((2, 3))], [np.zeros(2), np.zeros(2)])
        with pytest.raises(ValueError):
            Mlp([np.zeros((2, 3))], [np.zeros(2)], "relu")


class TestBackward:
    @pytest.mark.parametrize("act", ["elu", "tanh", "sigmoid", "identity"])
    def test_matches_finite_differences(self, act):
        rng = np.random.default_rng(1)
        net = init_mlp([3, 5, 4, 2], rng, act, "tanh")
        for b in net.biases:
            b += 0.1 * rng.standard_normal(b.shape)
        x = rng.standard_normal((4, 3))
        err_p, err_x = check_net_grads(net, x, rng)
        assert err_p < 1e-4 and err_x < 1e-4

    @settings(max_examples=15, deadline=None)
    @given(st.lists(st.integers(1, 5), min_size=2, max_size=4), st.integers(0, 10_000),
           st.sampled_from(diffnet.ACTIVATIONS))
    def test_random_nets(self, sizes, seed, act):
        rng = np.random.default_rng(seed)
        net = init_mlp(sizes, rng, act)
        x = rng.standard_normal((2, sizes[0]))
        err_p, err_x = check_net_grads(net, x, rng)
        assert err_p < 1e-4 and err_x < 1e-4

    def test_no_input_grad(self):
        rng = np.random.default_rng(2)
        net = init_mlp([2, 3, 1], rng)
        y, tape = forward(net, np.ones(2))
        _, dx = backward(net, tape, np.ones(1), need_input=False)
        assert dx is None


class TestXavier:
    def test_shape_and_bounds(self):
        w = xavier_init(30, 20, np.random.default_rng(0))
        assert w.shape == (20, 30)
        assert np.all(np.abs(w) <= np.sqrt(6 / 50))

    def test_symmetric_about_zero(self):
        w = xavier_init(200, 300, np.random.default_rng(3)).ravel()
        se = w.std() / np.sqrt(w.size)
        assert abs(w.mean()) < 3 * se

    def test_seeded(self):
        a = xavier_init(4, 5, np.random.default_rng(7))
        b = xavier_init(4, 5, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            xavier_init(0, 3, np.random.default_rng(0))


class TestAdam:
    def test_zero_gradient_fresh_state_is_identity(self):
        p = [np.array([1.0, -2.0]), np.array([[0.5]])]
        before = [x.copy() for x in p]
        state = AdamState.for_params(p)
        for _ in range(5):
            adam_step(state, p, [np.zeros(2), np.zeros((1, 1))])
        for a, b in zip(p, before):
            np.testing.assert_array_equal(a, b)

    def test_first_step_moves_by_lr(self):
        p = [np.array([0.0, 0.0])]
        state = AdamState.for_params(p, lr=0.01)
        adam_step(state, p, [np.array([3.0, -0.2])])
        np.testing.assert_allclose(p[0], [-0.01, 0.01], rtol=1e-6)

    def test_maximize_ascends(self):
        p = [np.array([0.0])]
        state = AdamState.for_params(p, lr=0.1)
        adam_step(state, p, [np.array([1.0])], maximize=True)
        assert p[0][0] > 0

    def test_minimizes_quadratic(self):
        p = [np.array([3.0, -4.0])]
        state = AdamState.for_params(p, lr=0.05)
        for _ in range(2000):
            adam_step(state, p, [2 * p[0]])
        np.testing.assert_allclose(p[0], 0.0, atol=1e-3)

    def test_rejects_non_finite(self):
        p = [np.array([1.0])]
        state = AdamState.for_params(p)
        with pytest.raises(NumericalError):
            adam_step(state, p, [np.array([np.nan])])
        assert p[0][0] == 1.0 and state.step == 0
