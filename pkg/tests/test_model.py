import json

import numpy as np
import pytest

from vaegaps.diffnet import Mlp, NumericalError, finite_difference_grad, init_mlp, zero_mlp
from vaegaps.harness.data import synthesize_gauss
from vaegaps.model import (
    LOG_2PI,
    FfgParams,
    Likelihood,
    VaeModel,
    encode,
    encode_vjp,
    expected_log_joint_gaussian,
    ffg_entropy,
    linear_gaussian_parts,
    load_checkpoint,
    log_joint,
    log_joint_and_grad,
    log_likelihood,
    log_likelihood_vjp,
    log_prior,
    log_q_ffg,
    sample_reparam,
    save_checkpoint,
    true_posterior_grid,
)


def small_model(rng, likelihood=Likelihood.BERNOULLI_LOGITS, d=2, D=6):
    out = D * (2 if likelihood is Likelihood.DIAGONAL_GAUSSIAN else 1)
    return VaeModel(d, init_mlp([d, 7, out], rng, "tanh"), init_mlp([D, 5, 2 * d], rng), likelihood)


class TestDensities:
    def test_prior_is_standard_ffg(self):
        z = np.random.default_rng(0).standard_normal((10, 3))
        np.testing.assert_allclose(log_prior(z), log_q_ffg(z, FfgParams(np.zeros(3), np.zeros(3))))

    def test_ffg_density_closed_form(self):
        q = FfgParams(np.array([1.0, -1.0]), np.log(np.array([0.5, 2.0])))
        z = np.array([0.3, 0.7])
        expected = sum(-0.5 * np.log(2 * np.pi * v) - 0.5 * (zi - m) ** 2 / v
                       for zi, m, v in zip(z, [1.0, -1.0], [0.5, 2.0]))
        assert log_q_ffg(z, q) == pytest.approx(expected, abs=1e-12)

    def test_reparam_moments(self):
        rng = np.random.default_rng(1)
        q = FfgParams(np.array([2.0]), np.array([np.log(9.0)]))
        z = sample_reparam(q, rng.standard_normal((200_000, 1)))
        assert z.mean() == pytest.approx(2.0, abs=0.03)
        assert z.var() == pytest.approx(9.0, rel=0.02)

    def test_entropy(self):
        q = FfgParams(np.zeros(2), np.array([0.0, 1.0]))
        assert ffg_entropy(q) == pytest.approx(LOG_2PI + 1 + 0.5)


class TestLikelihood:
    def test_bernoulli_matches_direct(self):
        rng = np.random.default_rng(2)
        m = small_model(rng)
        x = (rng.random(6) < 0.5).astype(float)
        z = rng.standard_normal(2)
        logits = m.decoder(z)
        p = 1 / (1 + np.exp(-logits))
        direct = np.sum(x * np.log(p) + (1 - x) * np.log(1 - p))
        assert log_likelihood(m, x, z) == pytest.approx(direct, abs=1e-10)

    def test_gaussian_matches_direct(self):
        rng = np.random.default_rng(3)
        m = small_model(rng, Likelihood.DIAGONAL_GAUSSIAN)
        x = rng.standard_normal(6)
        z = rng.standard_normal(2)
        out = m.decoder(z)
        mean, lv = out[:6], out[6:]
        direct = np.sum(-0.5 * (LOG_2PI + lv) - 0.5 * (x - mean) ** 2 / np.exp(lv))
        assert log_likelihood(m, x, z) == pytest.approx(direct, abs=1e-10)

    def test_extreme_logits_stay_finite(self):
        dec = Mlp([np.zeros((1, 1))], [np.array([800.0])], "identity", "identity")
        m = VaeModel(1, dec, zero_mlp([1, 2]), Likelihood.BERNOULLI_LOGITS)
        assert log_likelihood(m, np.array([1.0]), np.zeros(1)) == pytest.approx(0.0, abs=1e-12)
        assert log_likelihood(m, np.array([0.0]), np.zeros(1)) == pytest.approx(-800.0)

    def test_non_finite_names_pixel(self):
        # pixel 2 has variance exp(-1000): its density underflows
        dec = Mlp([np.zeros((6, 1))], [np.array([0.0, 0.0, 0.0, 0.0, 0.0, -1000.0])],
                  "identity", "identity")
        m = VaeModel(1, dec, zero_mlp([3, 2]), Likelihood.DIAGONAL_GAUSSIAN)
        x = np.array([0.0, 1.0, 1.0])
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericalError) as info:
            log_likelihood(m, x, np.zeros(1))
        assert "pixel 2" in str(info.value)

    @pytest.mark.parametrize("lik", list(Likelihood))
    def test_gradients(self, lik):
        rng = np.random.default_rng(4)
        m = small_model(rng, lik)
        x = rng.random(6) if lik is Likelihood.DIAGONAL_GAUSSIAN else (rng.random(6) < 0.5) * 1.0
        z = rng.standard_normal((3, 2))
        g = rng.standard_normal(3)
        _, pull = log_likelihood_vjp(m, x, z)
        dz, dparams = pull(g)
        fd = finite_difference_grad(lambda: float(g @ log_likelihood(m, x, z)),
                                    m.decoder.parameters() + [z])
        for a, b in zip(list(dparams) + [dz], fd):
            np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-7)

    def test_log_joint_grad(self):
        rng = np.random.default_rng(5)
        m = small_model(rng)
        x = (rng.random(6) < 0.5) * 1.0
        z = rng.standard_normal(2)
        value, grad = log_joint_and_grad(m, x, z)
        assert value == pytest.approx(log_joint(m, x, z))
        fd = finite_difference_grad(lambda: float(log_joint(m, x, z)), [z])[0]
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-8)


class TestEncoder:
    def test_encode_vjp(self):
        rng = np.random.default_rng(6)
        m = small_model(rng)
        x = rng.random((4, 6))
        q, pull = encode_vjp(m, x)
        gmu, glv = rng.standard_normal((2, 4, 2))
        grads = pull(gmu, glv)

        def f():
            e = encode(m, x)
            return float(np.sum(gmu * e.mu) + np.sum(glv * e.logvar))

        fd = finite_difference_grad(f, m.encoder.parameters())
        for a, b in zip(grads, fd):
            np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-8)

    def test_shape_checks(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            VaeModel(3, init_mlp([3, 4], rng), init_mlp([4, 5], rng))


class TestPosteriorGrid:
    def test_normalized(self):
        m = small_model(np.random.default_rng(7))
        _, _, dens = true_posterior_grid(m, np.ones(6), n=80)
        cell = (8.0 / 80) ** 2
        assert dens.sum() * cell == pytest.approx(1.0, abs=1e-10)

    def test_matches_linear_gaussian_posterior(self):
        ds = synthesize_gauss(5, 2, 4, noise_var=0.5, seed=1)
        m = ds.oracle.model()
        x = ds.images[0]
        z1, z2, dens = true_posterior_grid(m, x, -5, 5, 200)
        cell = (10 / 200) ** 2
        zz = np.stack(np.meshgrid(z1, z2, indexing="ij"), -1)
        mean_grid = np.einsum("ijk,ij->k", zz, dens) * cell
        mean, cov = ds.oracle.posterior(x)
        np.testing.assert_allclose(mean_grid, mean, atol=1e-4)

    def test_requires_2d(self):
        m = small_model(np.random.default_rng(0), d=3)
        with pytest.raises(ValueError):
            true_posterior_grid(m, np.ones(6))


class TestLinearGaussianClosedForms:
    def test_parts_detected(self):
        ds = synthesize_gauss(3, 2, 4, seed=2)
        a, b, nv = linear_gaussian_parts(ds.oracle.model())
        np.testing.assert_allclose(a, ds.oracle.a)
        np.testing.assert_allclose(nv, ds.oracle.noise_var)
        assert linear_gaussian_parts(small_model(np.random.default_rng(0))) is None

    def test_expected_log_joint_monte_carlo(self):
        ds = synthesize_gauss(3, 2, 4, seed=3)
        m = ds.oracle.model()
        x = ds.images[0]
        q = FfgParams(np.array([0.2, -0.4]), np.array([-0.5, 0.3]))
        z = sample_reparam(q, np.random.default_rng(0).standard_normal((400_000, 2)))
        mc = log_joint(m, x, z)
        assert expected_log_joint_gaussian(m, x, q) == pytest.approx(
            mc.mean(), abs=4 * mc.std() / np.sqrt(mc.size))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        m = small_model(rng)
        path = tmp_path / "m.json"
        save_checkpoint(m, path, seed=3, config={"a": 1})
        m2, doc = load_checkpoint(path)
        assert doc["seed"] == 3 and doc["config"] == {"a": 1} and doc["init"] == "glorot_uniform"
        for a, b in zip(m.decoder.parameters() + m.encoder.parameters(),
                        m2.decoder.parameters() + m2.encoder.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_version_checked(self, tmp_path):
        m = small_model(np.random.default_rng(0))
        path = tmp_path / "m.json"
        save_checkpoint(m, path)
        doc = json.loads(path.read_text())
        doc["version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(ValueError):
            load_checkpoint(path)
