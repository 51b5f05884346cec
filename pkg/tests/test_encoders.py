"""Grid construction, deep-set pooling, and Gaussian set convolutions."""

import numpy as np
import pytest

from nplab import encoders as enc


class TestMakeGrid:
    def test_covers_span_with_exact_spacing(self, rng):
        disc = enc.Discretisation(points_per_unit=64.0, margin=0.1)
        x = rng.uniform(-2, 2, 40)
        x[0], x[1] = -2.0, 2.0
        grid = enc.make_grid(disc, x)
        assert grid[0] <= -2.1 + 1e-12
        assert grid[-1] >= 2.1 - 1e-9 / 64
        steps = np.diff(grid)
        assert np.max(np.abs(steps - 1.0 / 64)) < 1e-12

    def test_single_point(self):
        disc = enc.Discretisation(points_per_unit=64.0, margin=0.1)
        grid = enc.make_grid(disc, [0.0])
        assert grid[0] == pytest.approx(-0.1)
        assert grid[-1] >= 0.1 - 1e-9

    def test_empty_input_spans_margin_about_zero(self):
        disc = enc.Discretisation(points_per_unit=8.0, margin=0.5)
        grid = enc.make_grid(disc, [])
        assert grid[0] == pytest.approx(-0.5)
        assert grid[-1] >= 0.5 - 1e-9

    def test_invalid_discretisation(self):
        with pytest.raises(ValueError):
            enc.Discretisation(points_per_unit=0.0, margin=0.1)
        with pytest.raises(ValueError):
            enc.Discretisation(points_per_unit=8.0, margin=0.0)

    def test_functional_encoding_validates_grid(self):
        with pytest.raises(ValueError, match="uniform"):
            enc.FunctionalEncoding(np.array([0.0, 0.1, 0.3]), np.zeros((2, 3)))
        with pytest.raises(ValueError, match="match"):
            enc.FunctionalEncoding(np.array([0.0, 0.1]), np.zeros((2, 3)))


class TestDeepSetEncode:
    @staticmethod
    def phi(x, y):
        return np.array([x, y, x * y, 1.0])

    def test_empty_set_is_zero_vector(self):
        z = enc.deepset_encode([], [], self.phi, width=4)
        np.testing.assert_array_equal(z, np.zeros(4))

    def test_singleton(self):
        z = enc.deepset_encode([2.0], [3.0], self.phi)
        np.testing.assert_array_equal(z, [2.0, 3.0, 6.0, 1.0])

    def test_permutation_invariance_exact(self, rng):
        x = rng.standard_normal(12)
        y = rng.standard_normal(12)
        z1 = enc.deepset_encode(x, y, self.phi)
        perm = rng.permutation(12)
        z2 = enc.deepset_encode(x[perm], y[perm], self.phi)
        np.testing.assert_array_equal(z1, z2)  # bit exact via canonical sort


class TestSetConvEncode:
    disc = enc.Discretisation(points_per_unit=16.0, margin=0.5)

    def test_empty_context_all_zero(self):
        grid = enc.make_grid(self.disc, [0.0])
        out = enc.setconv_encode([], [], grid, lengthscale=0.125, divide=False)
        np.testing.assert_array_equal(out.channels, np.zeros((2, grid.shape[0])))

    def test_zero_value_leaves_density_signature(self):
        # The case that distinguishes "no data" from "observed zero".
        grid = enc.make_grid(self.disc, [0.0])
        out = enc.setconv_encode([0.0], [0.0], grid, lengthscale=0.125, divide=False)
        data, density = out.channels
        np.testing.assert_array_equal(data, np.zeros_like(data))
        nearest = np.argmin(np.abs(grid))
        spacing = grid[1] - grid[0]
        assert density[nearest] >= np.exp(-spacing**2 / (2 * 0.125**2)) - 1e-12
        assert density[nearest] > 0.99

    def test_division_yields_locally_constant_estimate(self):
        grid = enc.make_grid(self.disc, [0.3])
        out = enc.setconv_encode([0.3], [3.0], grid, lengthscale=0.125, divide=True)
        data, density = out.channels
        near = np.abs(grid - 0.3) < 0.1
        # Single point: ratio of data to density is the observed value where
        # density is appreciable.
        np.testing.assert_allclose(data[near], 3.0, atol=1e-4)

    def test_channels_match_direct_sums(self, rng):
        x = rng.uniform(-1, 1, 7)
        y = rng.standard_normal(7)
        ls = 0.2
        grid = enc.make_grid(self.disc, x)
        out = enc.setconv_encode(x, y, grid, lengthscale=ls, divide=False)
        w = np.exp(-0.5 * ((grid[None, :] - x[:, None]) / ls) ** 2)
        np.testing.assert_allclose(out.channels[0], (y[:, None] * w).sum(axis=0), atol=1e-12)
        np.testing.assert_allclose(out.channels[1], w.sum(axis=0), atol=1e-12)

    def test_permutation_invariance_exact(self, rng):
        x = rng.uniform(-1, 1, 9)
        y = rng.standard_normal(9)
        grid = enc.make_grid(self.disc, x)
        a = enc.setconv_encode(x, y, grid, 0.125, divide=True).channels
        perm = rng.permutation(9)
        b = enc.setconv_encode(x[perm], y[perm], grid, 0.125, divide=True).channels
        np.testing.assert_array_equal(a, b)

    def test_density_positive_at_nearest_grid_point(self, rng):
        x = rng.uniform(-1, 1, 5)
        grid = enc.make_grid(self.disc, x)
        out = enc.setconv_encode(x, np.ones(5), grid, 0.125, divide=False)
        for xi in x:
            assert out.channels[1][np.argmin(np.abs(grid - xi))] > 0


class TestSetConvDecode:
    def test_zero_values_decode_to_zero(self, rng):
        grid = np.linspace(-1, 1, 33)
        out = enc.setconv_decode(np.zeros((3, 33)), grid, rng.uniform(-1, 1, 5), 0.1)
        np.testing.assert_array_equal(out, np.zeros((3, 5)))

    def test_small_lengthscale_approaches_indicator(self):
        grid = np.linspace(-1, 1, 33)
        values = np.zeros((1, 33))
        values[0, 10] = 1.0
        out = enc.setconv_decode(values, grid, grid, lengthscale=1e-3)
        assert out[0, 10] == pytest.approx(1.0, abs=1e-6)
        assert np.max(np.abs(np.delete(out[0], 10))) < 1e-6

    def test_matches_direct_summation(self, rng):
        grid = np.linspace(-1, 1, 65)
        values = rng.standard_normal((2, 65))
        queries = rng.uniform(-0.8, 0.8, 6)
        ls = 0.15
        out = enc.setconv_decode(values, grid, queries, ls)
        w = np.exp(-0.5 * ((queries[None, :] - grid[:, None]) / ls) ** 2)
        np.testing.assert_allclose(out, values @ w, atol=1e-12)


class TestGridShiftEquivariance:
    def test_channels_shift_with_inputs(self, rng):
        # Shifting data and grid by whole grid cells permutes channel values.
        disc = enc.Discretisation(points_per_unit=16.0, margin=0.5)
        x = rng.uniform(-1, 1, 6)
        y = rng.standard_normal(6)
        grid = enc.make_grid(disc, x)
        shift = 5 * disc.spacing
        base = enc.setconv_encode(x, y, grid, 0.125, divide=True).channels
        moved = enc.setconv_encode(x + shift, y, grid + shift, 0.125, divide=True).channels
        assert np.max(np.abs(moved - base)) < 1e-12
