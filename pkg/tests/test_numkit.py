import math

import numpy as np
import pytest

from aflsim.numkit import (RngStream, SingularSystemError, coordinate_median,
                           gaussian_sample, l2_norm, percentile, solve_dense)


class TestL2Norm:
    def test_345_triangle(self):
        assert l2_norm([3.0, 4.0]) == 5.0

    def test_zero_vector(self):
        assert l2_norm([0.0, 0.0, 0.0]) == 0.0

    def test_unit_entries(self):
        assert l2_norm([1.0, 1.0, 1.0, 1.0]) == 2.0

    def test_rejects_nan(self):
        with pytest.raises(ValueError, match="non-finite"):
            l2_norm([1.0, float("nan")])

    def test_rejects_inf(self):
        with pytest.raises(ValueError, match="non-finite"):
            l2_norm([float("inf"), 0.0])


class TestCoordinateMedian:
    def test_per_coordinate_sort(self):
        out = coordinate_median([[1, 5], [2, 6], [9, 0]])
        assert np.array_equal(out, [2, 5])

    def test_single_vector(self):
        assert np.array_equal(coordinate_median([[4, 4]]), [4, 4])

    def test_even_count_mean_of_middle(self):
        assert np.array_equal(coordinate_median([[0, 0], [10, 2]]), [5, 1])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            coordinate_median([])

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValueError):
            coordinate_median([[1, 2], [1, 2, 3]])

    def test_permutation_invariant(self):
        rng = np.random.default_rng(7)
        vs = [rng.standard_normal(5) for _ in range(6)]
        base = coordinate_median(vs)
        for _ in range(10):
            order = rng.permutation(6)
            assert np.array_equal(coordinate_median([vs[i] for i in order]), base)

    def test_odd_count_membership_and_range(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            vs = [rng.standard_normal(4) for _ in range(7)]
            med = coordinate_median(vs)
            stacked = np.stack(vs)
            for j in range(4):
                col = stacked[:, j]
                assert med[j] in col
                assert col.min() <= med[j] <= col.max()


class TestPercentile:
    def test_nearest_rank(self):
        assert percentile([1, 2, 3, 4, 5], 0.8) == 4

    def test_singleton(self):
        assert percentile([7], 0.5) == 7

    def test_alpha_one_is_max(self):
        assert percentile([10, 20], 1.0) == 20

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            percentile([], 0.5)

    def test_alpha_bounds(self):
        with pytest.raises(ValueError):
            percentile([1.0], 0.0)
        with pytest.raises(ValueError):
            percentile([1.0], 1.5)

    def test_monotone_in_alpha(self):
        rng = np.random.default_rng(9)
        values = list(rng.standard_normal(37))
        alphas = np.linspace(0.05, 1.0, 20)
        outs = [percentile(values, a) for a in alphas]
        assert all(b >= a for a, b in zip(outs, outs[1:]))


class TestSolveDense:
    def test_diagonal(self):
        x = solve_dense([[2.0, 0.0], [0.0, 4.0]], [2.0, 4.0])
        assert np.allclose(x, [1.0, 1.0])

    def test_identity(self):
        x = solve_dense([[1.0, 0.0], [0.0, 1.0]], [5.0, -3.0])
        assert np.allclose(x, [5.0, -3.0])

    def test_ridge_only(self):
        x = solve_dense([[0.0, 0.0], [0.0, 0.0]], [1.0, 1.0], ridge=1e-6)
        assert np.allclose(x, [1e6, 1e6])

    def test_singular_raises(self):
        with pytest.raises(SingularSystemError, match="singular system"):
            solve_dense([[1.0, 1.0], [1.0, 1.0]], [1.0, 2.0])

    def test_residual_bound_well_conditioned(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            m = rng.standard_normal((6, 6)) + 6 * np.eye(6)
            rhs = rng.standard_normal(6)
            x = solve_dense(m, rhs)
            assert np.linalg.norm(m @ x - rhs) <= 1e-8 * (np.linalg.norm(rhs) + 1)

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            solve_dense([[1.0, 2.0]], [1.0])
        with pytest.raises(ValueError):
            solve_dense([[1.0, 0.0], [0.0, 1.0]], [1.0, 2.0, 3.0])


class TestRng:
    def test_same_seed_same_gaussians(self):
        a = gaussian_sample(RngStream(123), 0.0, 1.0, 50)
        b = gaussian_sample(RngStream(123), 0.0, 1.0, 50)
        assert np.array_equal(a, b)

    def test_zero_std(self):
        assert np.array_equal(gaussian_sample(RngStream(1), 0.0, 0.0, 3), [0, 0, 0])

    def test_degenerate_mean_only(self):
        assert np.array_equal(gaussian_sample(RngStream(1), 5.0, 0.0, 2), [5, 5])

    def test_negative_std_rejected(self):
        with pytest.raises(ValueError):
            gaussian_sample(RngStream(1), 0.0, -1.0, 3)

    def test_law_of_large_numbers(self):
        draws = gaussian_sample(RngStream(1), 0.0, 1.0, 10000)
        assert abs(draws.mean()) < 0.05
        assert abs(draws.std() - 1.0) < 0.05

    def test_spawned_streams_differ(self):
        a, b = RngStream(5).spawn(2)
        assert not np.array_equal(a.normal(0, 1, 20), b.normal(0, 1, 20))

    def test_spawn_reproducible(self):
        a1, _ = RngStream(5).spawn(2)
        a2, _ = RngStream(5).spawn(2)
        assert np.array_equal(a1.normal(0, 1, 20), a2.normal(0, 1, 20))
