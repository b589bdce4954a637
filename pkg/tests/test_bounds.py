import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logsumexp

from vaegaps.bounds import (
    BoundKind,
    Posterior,
    amortized_posterior,
    annealed_objective,
    aux_elbo,
    elbo,
    iwae,
    log_mean_exp,
    objective_vjp,
)
from vaegaps.diffnet import finite_difference_grad, init_mlp
from vaegaps.flows import FlowMode, init_flow
from vaegaps.harness.data import synthesize_gauss
from vaegaps.model import FfgParams, Likelihood, VaeModel, log_joint, log_q_ffg, sample_reparam


@pytest.fixture(scope="module")
def gauss():
    ds = synthesize_gauss(5, 2, 4, noise_var=0.5, seed=0)
    return ds, ds.oracle.model()


class TestLogMeanExp:
    @given(st.lists(st.floats(-500, 500), min_size=1, max_size=30))
    def test_matches_scipy(self, xs):
        v = np.array(xs)
        assert log_mean_exp(v) == pytest.approx(logsumexp(v) - np.log(v.size), abs=1e-9)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=10), st.floats(-1e4, 1e4))
    def test_shift(self, xs, c):
        v = np.array(xs)
        assert log_mean_exp(v + c) == pytest.approx(log_mean_exp(v) + c, abs=1e-8)

    def test_large_values_do_not_overflow(self):
        assert log_mean_exp(np.array([1000.0, 1000.0])) == pytest.approx(1000.0)

    def test_neg_inf(self):
        assert log_mean_exp(np.array([-np.inf, 0.0])) == pytest.approx(np.log(0.5))
        assert log_mean_exp(np.array([-np.inf, -np.inf])) == -np.inf

    def test_axis(self):
        v = np.arange(6.0).reshape(2, 3)
        np.testing.assert_allclose(log_mean_exp(v, axis=1), logsumexp(v, axis=1) - np.log(3))

    def test_empty(self):
        with pytest.raises(ValueError):
            log_mean_exp(np.array([]))


class TestElbo:
    def test_optimal_ffg_closed_form(self, gauss):
        ds, m = gauss
        x = ds.images[0]
        est = elbo(m, amortized_posterior(m, x), x, 20_000, np.random.default_rng(0))
        exact = ds.oracle.log_marginal(x) - ds.oracle.kl_optimal_ffg()
        assert est.kind is BoundKind.ELBO
        assert abs(est.value - exact) < 4 * est.std_error

    def test_exact_posterior_has_zero_variance(self):
        # with one latent dimension the optimal Gaussian is the posterior itself
        ds = synthesize_gauss(3, 1, 3, noise_var=0.3, seed=1)
        m = ds.oracle.model()
        x = ds.images[0]
        est = elbo(m, amortized_posterior(m, x), x, 50, np.random.default_rng(1))
        assert est.value == pytest.approx(ds.oracle.log_marginal(x), abs=1e-10)
        assert est.std_error < 1e-10

    def test_batching_is_invisible(self, gauss):
        ds, m = gauss
        x = ds.images[1]
        q = amortized_posterior(m, x)
        a = elbo(m, q, x, 250, np.random.default_rng(2), batch=1000)
        b = elbo(m, q, x, 250, np.random.default_rng(2), batch=60)
        assert a.value == pytest.approx(b.value, abs=1e-12)
        with pytest.raises(ValueError):
            elbo(m, q, x, 0, np.random.default_rng(0))

    def test_batch_of_points(self, gauss):
        ds, m = gauss
        x = ds.images[:3]
        est = elbo(m, amortized_posterior(m, x), x, 500, np.random.default_rng(3))
        assert np.shape(est.value) == (3,)

    def test_matches_direct_monte_carlo(self, gauss):
        ds, m = gauss
        x = ds.images[2]
        q = FfgParams(np.array([0.1, -0.3]), np.array([-1.0, -0.5]))
        z = sample_reparam(q, np.random.default_rng(4).standard_normal((1000, 2)))
        direct = np.mean(log_joint(m, x, z) - log_q_ffg(z, q))
        est = elbo(m, Posterior(q), x, 1000, np.random.default_rng(4))
        assert est.value == pytest.approx(direct, abs=1e-10)


class TestIwae:
    def test_ordering(self, gauss):
        ds, m = gauss
        x = ds.images[0]
        q = Posterior(FfgParams(np.zeros(2), np.zeros(2)))
        rng = np.random.default_rng(5)
        values = [np.mean([iwae(m, q, x, k, rng, n_boot=0).value for _ in range(200)])
                  for k in (1, 10, 100)]
        assert values[0] < values[1] < values[2] < ds.oracle.log_marginal(x)

    def test_large_k_approaches_log_marginal(self, gauss):
        ds, m = gauss
        x = ds.images[0]
        est = iwae(m, amortized_posterior(m, x), x, 20_000, np.random.default_rng(6))
        assert est.value == pytest.approx(ds.oracle.log_marginal(x), abs=5e-3)
        assert 0 < est.std_error < 0.01

    def test_k1_equals_single_sample_elbo(self, gauss):
        ds, m = gauss
        x = ds.images[0]
        q = amortized_posterior(m, x)
        a = iwae(m, q, x, 1, np.random.default_rng(7)).value
        b = elbo(m, q, x, 1, np.random.default_rng(7)).value
        assert a == b

    def test_single_combination_across_batches(self, gauss):
        ds, m = gauss
        x = ds.images[0]
        q = amortized_posterior(m, x)
        a = iwae(m, q, x, 300, np.random.default_rng(8), batch=1000, n_boot=0).value
        b = iwae(m, q, x, 300, np.random.default_rng(8), batch=100, n_boot=0).value
        assert a == pytest.approx(b, abs=1e-12)


class TestAnnealed:
    def test_lambda_one_is_elbo(self, gauss):
        ds, m = gauss
        x = ds.images[0]
        q = amortized_posterior(m, x)
        a = annealed_objective(m, q, x, 100, 1.0, np.random.default_rng(9))
        b = elbo(m, q, x, 100, np.random.default_rng(9)).value
        assert a == pytest.approx(b, abs=1e-12)

    def test_linear_in_lambda(self, gauss):
        ds, m = gauss
        x = ds.images[0]
        q = amortized_posterior(m, x)
        vals = [annealed_objective(m, q, x, 50, lam, np.random.default_rng(10))
                for lam in (0.0, 0.25, 1.0)]
        assert vals[1] == pytest.approx(0.75 * vals[0] + 0.25 * vals[2], abs=1e-10)

    def test_lambda_zero_is_expected_log_joint(self, gauss):
        ds, m = gauss
        x = ds.images[0]
        q = amortized_posterior(m, x)
        eps = np.random.default_rng(11).standard_normal((50, 2))
        direct = log_joint(m, x, sample_reparam(q.base, eps)).mean()
        assert annealed_objective(m, q, x, 50, 0.0, np.random.default_rng(11)) == pytest.approx(direct)

    def test_rejects_out_of_range(self, gauss):
        ds, m = gauss
        with pytest.raises(ValueError):
            annealed_objective(m, amortized_posterior(m, ds.images[0]), ds.images[0], 5, 1.5,
                               np.random.default_rng(0))


class TestFlowBounds:
    def test_identity_flow_matches_elbo(self, gauss):
        ds, m = gauss
        x = ds.images[0]
        base = amortized_posterior(m, x).base
        flow = init_flow(2, FlowMode.SPLIT_LATENT, np.random.default_rng(0), zero_output=True)
        a = elbo(m, Posterior(base, flow), x, 100, np.random.default_rng(12))
        b = elbo(m, Posterior(base), x, 100, np.random.default_rng(12))
        assert a.kind is BoundKind.FLOW_ELBO
        assert a.value == pytest.approx(b.value, abs=1e-12)

    def test_aux_bound_below_log_marginal(self, gauss):
        ds, m = gauss
        x = ds.images[0]
        flow = init_flow(2, FlowMode.AUXILIARY, np.random.default_rng(1), hidden=(8,),
                         aux_hidden=(8,))
        for p in flow.parameters():
            p *= 0.3
        q = Posterior(amortized_posterior(m, x).base, flow)
        est = aux_elbo(m, q, x, 5000, np.random.default_rng(13))
        assert np.isfinite(est.value)
        assert est.value + 3 * est.std_error < ds.oracle.log_marginal(x)
        with pytest.raises(ValueError):
            aux_elbo(m, Posterior(q.base), x, 10, np.random.default_rng(0))


@pytest.mark.parametrize("mode", [None, FlowMode.SPLIT_LATENT, FlowMode.AUXILIARY])
def test_objective_gradients(mode):
    rng = np.random.default_rng(14)
    model = VaeModel(2, init_mlp([2, 5, 4], rng, "tanh"), init_mlp([4, 5, 4], rng),
                     Likelihood.BERNOULLI_LOGITS)
    x = np.array([1.0, 0.0, 1.0, 1.0])
    flow = None if mode is None else init_flow(2, mode, rng, hidden=(4,), aux_hidden=(4,))
    if flow is not None:
        for p in flow.parameters()[::2]:
            p *= 0.5
    q = Posterior(FfgParams(rng.standard_normal(2) * 0.3, rng.standard_normal(2) * 0.3), flow, x)
    eps_z, eps_v = q.draw_noise(3, rng)
    g = rng.standard_normal(3)
    _, pull = objective_vjp(model, x, q, eps_z, eps_v, lam=0.7)
    grads = pull(g)

    def f():
        return float(g @ objective_vjp(model, x, q, eps_z, eps_v, lam=0.7)[0])

    params = model.decoder.parameters() + [q.base.mu, q.base.logvar]
    ours = list(grads.decoder) + [grads.mu, grads.logvar]
    if flow is not None:
        params += flow.parameters()
        ours += list(grads.flow)
    for a, b in zip(ours, finite_difference_grad(f, params)):
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-7)
