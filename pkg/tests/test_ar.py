"""Autoregressive rollout: exactness on the GP marginal map, ordering
behaviour, cost accounting, and de-noising."""

import numpy as np
import pytest

from nplab import ar, gp
from nplab import data as dat
from nplab import models as M

KERNEL = gp.EQ(0.25)
NOISE = 0.05


class CountingMap:
    def __init__(self, pmap):
        self.pmap = pmap
        self.calls = 0

    def __call__(self, x_c, y_c, x_t):
        self.calls += 1
        return self.pmap(x_c, y_c, x_t)


class TestArSample:
    def test_single_target_uses_plain_marginal(self):
        pmap = gp.diagonal_map(KERNEL, NOISE)
        x_c, y_c = np.array([0.0]), np.array([1.0])
        x_t = np.array([0.3])
        pred = pmap(x_c, y_c, x_t)
        rng = np.random.default_rng(4)
        draws = np.array([ar.ar_sample(pmap, x_c, y_c, x_t, rng)[0] for _ in range(4000)])
        assert draws.mean() == pytest.approx(pred.mean[0], abs=0.03)
        assert draws.var() == pytest.approx(pred.var[0] + NOISE, rel=0.1)

    def test_same_seed_identical(self):
        pmap = gp.diagonal_map(KERNEL, NOISE)
        x_c, y_c = np.array([-0.5, 0.5]), np.array([0.2, -0.1])
        x_t = np.linspace(-1, 1, 6)
        s1 = ar.ar_sample(pmap, x_c, y_c, x_t, np.random.default_rng(8))
        s2 = ar.ar_sample(pmap, x_c, y_c, x_t, np.random.default_rng(8))
        np.testing.assert_array_equal(s1, s2)

    def test_cost_is_one_pass_per_target(self, rng):
        counting = CountingMap(gp.diagonal_map(KERNEL, NOISE))
        ar.ar_sample(counting, np.zeros(0), np.zeros(0), rng.uniform(-1, 1, 7), rng)
        assert counting.calls == 7

    def test_output_aligned_with_input_order(self, rng):
        # A map whose mean is the query input itself and variance is tiny:
        # the sample must come back ordered like x_t regardless of the
        # internal visiting order.
        def identity_map(x_c, y_c, x_t):
            n = np.asarray(x_t).shape[0]
            return gp.MeanFieldPrediction(np.asarray(x_t, float), np.full(n, 1e-18), 0.0)

        x_t = rng.uniform(-2, 2, 9)
        out = ar.ar_sample(identity_map, np.zeros(0), np.zeros(0), x_t, rng)
        np.testing.assert_allclose(out, x_t, atol=1e-6)

    def test_rollout_covariance_matches_joint_on_gp(self):
        # The chained exact marginals reproduce the full joint; the sample
        # covariance over many rollouts must match the posterior joint with
        # noise folded in.
        rng = np.random.default_rng(21)
        x_c = np.array([-1.0, 0.2])
        y_c = gp.sample_prior(KERNEL, x_c, NOISE, rng)
        x_t = np.array([-0.2, 0.1, 0.45])
        joint = gp.posterior(KERNEL, x_c, y_c, x_t, NOISE)
        pmap = gp.diagonal_map(KERNEL, NOISE)
        draws = np.array([ar.ar_sample(pmap, x_c, y_c, x_t, rng) for _ in range(100_000)])
        emp_cov = np.cov(draws.T)
        ref = joint.noisy_cov
        scale = np.sqrt(np.outer(np.diag(ref), np.diag(ref)))
        assert np.max(np.abs(emp_cov - ref) / scale) < 0.05
        np.testing.assert_allclose(draws.mean(axis=0), joint.mean, atol=0.02)


class TestArLoglik:
    def test_single_target_equals_plain_loglik(self, rng):
        pmap = gp.diagonal_map(KERNEL, NOISE)
        x_c, y_c = np.array([0.1]), np.array([0.7])
        x_t, y_t = np.array([0.4]), np.array([0.2])
        chained = ar.ar_loglik(pmap, x_c, y_c, x_t, y_t, [0])
        plain = M.predict_loglik(pmap(x_c, y_c, x_t), y_t)
        assert chained == pytest.approx(plain, rel=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_oracle_map_matches_joint_any_ordering(self, seed):
        rng = np.random.default_rng(seed)
        n_c = int(rng.integers(0, 5))
        x_c = rng.uniform(-2, 2, n_c)
        y_c = gp.sample_prior(KERNEL, x_c, NOISE, rng) if n_c else np.zeros(0)
        x_t = rng.uniform(-2, 2, 5)
        y_t = rng.standard_normal(5)
        reference = gp.joint_logpdf(gp.posterior(KERNEL, x_c, y_c, x_t, NOISE), y_t)
        pmap = gp.diagonal_map(KERNEL, NOISE)
        for _ in range(3):
            ordering = rng.permutation(5)
            value = ar.ar_loglik(pmap, x_c, y_c, x_t, y_t, ordering)
            assert value == pytest.approx(reference, abs=1e-8)

    def test_model_map_orderings_differ_but_finite(self, rng):
        model = M.build_model(M.ModelConfig(variant="cnp", seed=9, enc_dim=8, enc_width=8,
                                            enc_layers=1, dec_width=8, dec_layers=2))
        task = dat.sample_task(dat.PROCESSES["eq"], dat.SPLITS["int"], rng, n_context=5)
        x_t, y_t = task.x_t[:4], task.y_t[:4]
        pmap = model.as_prediction_map()
        v1 = ar.ar_loglik(pmap, task.x_c, task.y_c, x_t, y_t, [0, 1, 2, 3])
        v2 = ar.ar_loglik(pmap, task.x_c, task.y_c, x_t, y_t, [3, 2, 1, 0])
        assert np.isfinite(v1) and np.isfinite(v2)

    def test_bad_ordering_rejected(self, rng):
        pmap = gp.diagonal_map(KERNEL, NOISE)
        with pytest.raises(ValueError, match="permutation"):
            ar.ar_loglik(pmap, [], [], [0.0, 1.0], [0.0, 0.0], [0, 0])


class TestRecoverSmooth:
    def test_noise_free_sample_reproduced(self):
        rng = np.random.default_rng(3)
        x_s = np.linspace(-2, 2, 120)
        f = gp.sample_prior(KERNEL, x_s, 0.0, rng)
        pmap = gp.diagonal_map(KERNEL, NOISE)
        recovered = ar.recover_smooth(pmap, x_s, f, x_s)
        rmse = np.sqrt(np.mean((recovered - f) ** 2))
        assert rmse < 0.05

    def test_empty_sample_gives_prior_mean(self, rng):
        pmap = gp.diagonal_map(KERNEL, NOISE)
        out = ar.recover_smooth(pmap, [], [], rng.uniform(-1, 1, 5))
        np.testing.assert_array_equal(out, np.zeros(5))
