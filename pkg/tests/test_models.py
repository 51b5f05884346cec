"""Contracts of the five model families: shapes, symmetries, likelihoods,
prior behaviour, and checkpointing."""

import numpy as np
import pytest

from nplab import autodiff as ad
from nplab import data as dat
from nplab import gp
from nplab import models as M

TINY = dict(enc_dim=8, enc_width=8, enc_layers=1, dec_width=8, dec_layers=2,
            rank=3, points_per_unit=8.0, unet_channels=4, unet_levels=2)


def make_task(rng, n_c=6, n_t=5, lo=-2.0, hi=2.0):
    x_c = rng.uniform(lo, hi, n_c)
    y_c = rng.standard_normal(n_c)
    x_t = rng.uniform(lo, hi, n_t)
    y_t = rng.standard_normal(n_t)
    return dat.Task(x_c, y_c, x_t, y_t)


@pytest.fixture(params=M.VARIANTS)
def tiny_model(request):
    return M.build_model(M.ModelConfig(variant=request.param, seed=11, **TINY))


class TestShapes:
    def test_prediction_shapes(self, tiny_model, rng):
        task = make_task(rng)
        pred = tiny_model.predict(task.x_c, task.y_c, task.x_t)
        assert np.asarray(pred.mean).shape == (5,)
        if isinstance(pred, gp.MeanFieldPrediction):
            assert pred.var.shape == (5,)
        elif isinstance(pred, M.LowRankGaussianPrediction):
            assert pred.factor.shape == (5, TINY["rank"])
            assert pred.het_noise_var.shape == (5,)
        else:
            assert pred.cov.shape == (5, 5)

    def test_default_rank_is_64(self):
        model = M.build_model(M.ModelConfig(variant="gnp", seed=0))
        task = make_task(np.random.default_rng(0))
        pred = model.predict(task.x_c, task.y_c, task.x_t)
        assert pred.factor.shape == (5, 64)

    def test_variances_strictly_positive(self, tiny_model, rng):
        task = make_task(rng)
        pred = tiny_model.predict(task.x_c, task.y_c, task.x_t)
        if isinstance(pred, gp.MeanFieldPrediction):
            assert np.all(pred.var > 0)
            assert pred.noise_var > 0
        else:
            joint = pred.as_joint()
            assert np.all(np.diag(joint.cov) > 0)

    def test_empty_context_is_finite(self, tiny_model, rng):
        task = dat.Task([], [], rng.uniform(-1, 1, 4), np.zeros(4))
        pred = tiny_model.predict(task.x_c, task.y_c, task.x_t)
        assert np.all(np.isfinite(np.asarray(pred.mean)))


class TestSymmetries:
    def test_context_permutation_invariance_exact(self, tiny_model, rng):
        task = make_task(rng, n_c=9)
        base = tiny_model.predict(task.x_c, task.y_c, task.x_t)
        perm = rng.permutation(9)
        moved = tiny_model.predict(task.x_c[perm], task.y_c[perm], task.x_t)
        np.testing.assert_array_equal(np.asarray(moved.mean), np.asarray(base.mean))

    def test_target_permutation_equivariance_exact(self, tiny_model, rng):
        task = make_task(rng, n_t=6)
        base = tiny_model.predict(task.x_c, task.y_c, task.x_t)
        perm = rng.permutation(6)
        moved = tiny_model.predict(task.x_c, task.y_c, task.x_t[perm])
        np.testing.assert_array_equal(np.asarray(moved.mean), np.asarray(base.mean)[perm])
        if isinstance(base, M.LowRankGaussianPrediction):
            np.testing.assert_array_equal(moved.factor, base.factor[perm])

    @pytest.mark.parametrize("variant", ["convcnp", "convgnp", "fullconvgnp"])
    def test_grid_aligned_shift_untrained(self, variant, rng):
        cfg = dict(seed=4) if variant != "fullconvgnp" else dict(
            seed=4, points_per_unit=16.0, unet_channels=4, unet_levels=2)
        model = M.build_model(M.ModelConfig(variant=variant, **cfg))
        task = make_task(rng, n_c=7, n_t=5, lo=-1.0, hi=1.0)
        tau = 3.0 / model.config.points_per_unit
        base = model.predict(task.x_c, task.y_c, task.x_t)
        moved = model.predict(task.x_c + tau, task.y_c, task.x_t + tau)
        assert np.max(np.abs(np.asarray(moved.mean) - np.asarray(base.mean))) < 1e-6

    def test_convolutional_shift_equivariance_any_offset(self, rng):
        # The grid is anchored to the data span, so translation equivariance
        # holds for arbitrary offsets, not only whole grid cells.
        model = M.build_model(M.ModelConfig(variant="convcnp", seed=4))
        task = make_task(rng, n_c=6, n_t=5)
        for tau in (0.3137, -1.01):
            base = model.predict(task.x_c, task.y_c, task.x_t)
            moved = model.predict(task.x_c + tau, task.y_c, task.x_t + tau)
            assert np.max(np.abs(np.asarray(moved.mean) - np.asarray(base.mean))) < 1e-2


class TestPriorBehaviour:
    def test_convgnp_prior_kernel_map_constant(self):
        # No context: a translation-equivariant feature map forces the
        # implied covariance to be constant away from grid edges.
        model = M.build_model(M.ModelConfig(variant="convgnp", seed=5, points_per_unit=16.0,
                                            unet_channels=8, unet_levels=2))
        anchors = np.array([-4.0, 4.0])
        pairs = np.array([[-0.5, -0.1], [0.0, 0.4], [0.3, 0.7]])
        covs = []
        for a, b in pairs:
            x_t = np.concatenate([[a, b], anchors])
            pred = model.predict([], [], x_t)
            covs.append(pred.factor[0] @ pred.factor[1])
        assert np.max(np.abs(np.diff(covs))) < 1e-3

    def test_fullconvgnp_prior_covariance_not_constant(self):
        model = M.build_model(M.ModelConfig(variant="fullconvgnp", seed=5))
        x_t = np.array([-1.5, 0.0, 1.0, 1.5])
        pred = model.predict([], [], x_t)
        var_mid = pred.cov[1, 1]
        off = pred.cov[1, 3]  # distance 1.5 apart
        assert var_mid > off

    def test_fullconvgnp_cov_symmetric_psd(self, rng):
        model = M.build_model(M.ModelConfig(variant="fullconvgnp", seed=6,
                                            points_per_unit=16.0, unet_channels=4,
                                            unet_levels=2))
        task = make_task(rng, n_c=4, n_t=6, lo=-1.0, hi=1.0)
        pred = model.predict(task.x_c, task.y_c, task.x_t)
        np.testing.assert_allclose(pred.cov, pred.cov.T, atol=1e-9)
        assert np.min(np.linalg.eigvalsh(pred.cov)) > -1e-9

    def test_fullconvgnp_grid_cap_enforced(self):
        model = M.build_model(M.ModelConfig(variant="fullconvgnp", seed=0))
        x_t = np.linspace(-3.5, 3.5, 8)  # 7-unit span at ppu 32 overflows 128
        with pytest.raises(M.ResourceError, match="cap"):
            model.predict([], [], x_t)


class TestLoglik:
    def test_meanfield_peak_value(self):
        n = 7
        pred = gp.MeanFieldPrediction(np.zeros(n), np.full(n, 0.75), 0.25)
        expected = n * (-0.5 * np.log(2 * np.pi))
        assert M.predict_loglik(pred, np.zeros(n)) == pytest.approx(expected, rel=1e-12)

    def test_lowrank_zero_factor_reduces_to_meanfield(self, rng):
        n = 5
        mean = rng.standard_normal(n)
        het = rng.uniform(0.2, 1.0, n)
        y = rng.standard_normal(n)
        lowrank = M.LowRankGaussianPrediction(mean, np.zeros((n, 3)), het)
        direct = -0.5 * np.sum(np.log(2 * np.pi * het) + (y - mean) ** 2 / het)
        assert M.predict_loglik(lowrank, y) == pytest.approx(direct, rel=1e-12)

    def test_lowrank_matches_dense_oracle(self, rng):
        n, r = 6, 3
        mean = rng.standard_normal(n)
        factor = rng.standard_normal((n, r))
        het = rng.uniform(0.1, 0.5, n)
        y = rng.standard_normal(n)
        pred = M.LowRankGaussianPrediction(mean, factor, het)
        cov = factor @ factor.T + np.diag(het)
        oracle = gp.joint_logpdf(gp.GaussianJoint(mean, cov, 0.0), y)
        assert M.predict_loglik(pred, y) == pytest.approx(oracle, abs=1e-8)

    def test_batch_of_one_matches_single(self, tiny_model, rng):
        task = make_task(rng, n_c=4)
        with ad.no_grad():
            batched = M.batch_loglik(tiny_model.batch_forward([task]), task.y_t[None]).data[0]
        single = M.predict_loglik(tiny_model.predict(task.x_c, task.y_c, task.x_t), task.y_t)
        assert batched == pytest.approx(single, rel=1e-9)

    @pytest.mark.parametrize("variant", ["cnp", "gnp"])
    def test_deepset_batching_is_exact(self, variant, rng):
        # Grid-free models: batching with padded contexts is a pure
        # vectorisation, so per-task values match bit for bit.
        model = M.build_model(M.ModelConfig(variant=variant, seed=3, **TINY))
        tasks = [make_task(rng, n_c=k + 1) for k in range(3)]
        y_t = np.stack([t.y_t for t in tasks])
        with ad.no_grad():
            batched = M.batch_loglik(model.batch_forward(tasks), y_t).data
        for i, task in enumerate(tasks):
            single = M.predict_loglik(model.predict(task.x_c, task.y_c, task.x_t), task.y_t)
            assert batched[i] == pytest.approx(single, rel=1e-12)


class TestGradients:
    def test_cnp_loglik_gradient(self, rng):
        model = M.build_model(M.ModelConfig(variant="cnp", seed=2, **TINY))
        task = make_task(rng, n_c=3, n_t=2)

        def f():
            pred = model.batch_forward([task])
            return ad.neg(ad.tmean(M.batch_loglik(pred, task.y_t[None])))

        assert ad.grad_check(f, model.parameters()) < 1e-4


class TestCheckpointing:
    def test_save_load_round_trip(self, tiny_model, tmp_path, rng):
        task = make_task(rng)
        before = tiny_model.predict(task.x_c, task.y_c, task.x_t)
        path = tmp_path / "model.ckpt"
        tiny_model.save(path)
        loaded = M.load_model(path)
        assert loaded.variant == tiny_model.variant
        after = loaded.predict(task.x_c, task.y_c, task.x_t)
        np.testing.assert_array_equal(np.asarray(after.mean), np.asarray(before.mean))

    def test_metadata_block_present(self, tmp_path):
        model = M.build_model(M.ModelConfig(variant="cnp", seed=1, **TINY))
        path = tmp_path / "model.ckpt"
        model.save(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "npcheckpoint v1"
        assert any(line == "@meta variant=cnp" for line in lines[1:12])

    def test_shape_mismatch_rejected(self, tmp_path):
        small = M.build_model(M.ModelConfig(variant="cnp", seed=1, **TINY))
        path = tmp_path / "model.ckpt"
        small.save(path)
        arrays, _ = ad.load_checkpoint(path)
        big = M.build_model(M.ModelConfig(variant="cnp", seed=1))
        with pytest.raises(ValueError):
            big.load_arrays(arrays)
