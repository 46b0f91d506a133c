"""Stream determinism, sampler correctness against Monte-Carlo/analytic
oracles, and the finite-difference oracles themselves."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedsim.numkit import (
    fd_grad_oracle,
    fd_hvp_oracle,
    make_rng_stream,
    sample_categorical,
    sample_dirichlet,
    sample_gamma,
)


class TestStreams:
    def test_same_key_replays_identically(self):
        a = make_rng_stream(7, [0]).random(100)
        b = make_rng_stream(7, [0]).random(100)
        assert np.array_equal(a, b)

    def test_distinct_labels_diverge(self):
        a = make_rng_stream(7, [0]).random(100)
        b = make_rng_stream(7, [1]).random(100)
        assert not np.array_equal(a, b)

    def test_distinct_seeds_diverge(self):
        a = make_rng_stream(7, [0]).random(100)
        b = make_rng_stream(8, [0]).random(100)
        assert not np.array_equal(a, b)

    def test_label_path_matters(self):
        assert make_rng_stream(3, []).stream_id != make_rng_stream(3, [0]).stream_id
        assert make_rng_stream(3, [0, 1]).stream_id != make_rng_stream(3, [1, 0]).stream_id

    def test_string_labels_supported(self):
        a = make_rng_stream(3, ["select", 4]).random(10)
        b = make_rng_stream(3, ["client", 4]).random(10)
        assert not np.array_equal(a, b)

    def test_derive_extends_path(self):
        root = make_rng_stream(11, ["train"])
        child = root.derive("client", 2)
        assert child.labels == ("train", "client", 2)
        again = make_rng_stream(11, ["train", "client", 2])
        assert np.array_equal(child.random(20), again.random(20))

    def test_bad_labels_rejected(self):
        with pytest.raises(ValueError):
            make_rng_stream(1, [-4])
        with pytest.raises(TypeError):
            make_rng_stream(1, [1.5])


class TestGamma:
    def test_unit_shape_mean_matches_exponential(self):
        # Gamma(1, 1) is Exponential(1); Monte-Carlo mean should sit near 1.
        rng = make_rng_stream(42, ["gamma1"])
        mean = np.mean([sample_gamma(1.0, rng) for _ in range(100_000)])
        assert mean == pytest.approx(1.0, abs=0.02)

    def test_shape_five_mean(self):
        rng = make_rng_stream(42, ["gamma5"])
        mean = np.mean([sample_gamma(5.0, rng) for _ in range(100_000)])
        assert mean == pytest.approx(5.0, abs=0.05)

    def test_small_shape_mean(self):
        # Exercises the boosting identity branch.
        rng = make_rng_stream(42, ["gamma-small"])
        mean = np.mean([sample_gamma(0.3, rng) for _ in range(100_000)])
        assert mean == pytest.approx(0.3, abs=0.02)

    @pytest.mark.parametrize("shape", [0.0, -1.0])
    def test_nonpositive_shape_rejected(self, shape):
        with pytest.raises(ValueError):
            sample_gamma(shape, make_rng_stream(0))


class TestDirichlet:
    def test_symmetric_huge_concentration_mean(self):
        rng = make_rng_stream(9, ["dir"])
        draws = np.array([sample_dirichlet([1e6, 1e6], rng) for _ in range(10_000)])
        assert np.allclose(draws.mean(axis=0), [0.5, 0.5], atol=0.01)

    def test_single_component_is_one(self):
        q = sample_dirichlet([2.7], make_rng_stream(0))
        assert q.tolist() == [1.0]

    def test_tiny_concentration_falls_back_to_one_hot(self):
        rng = make_rng_stream(5, ["tiny"])
        for _ in range(50):
            q = sample_dirichlet([1e-12, 1e-12, 1e-12], rng)
            assert sorted(q.tolist()) == [0.0, 0.0, 1.0]

    @pytest.mark.parametrize("alphas", [[], [1.0, 0.0], [1.0, -2.0]])
    def test_invalid_alphas_rejected(self, alphas):
        with pytest.raises(ValueError):
            sample_dirichlet(alphas, make_rng_stream(0))

    @given(
        st.lists(st.floats(min_value=1e-8, max_value=1e4), min_size=1, max_size=12),
        st.integers(min_value=0, max_value=2**32),
    )
    def test_output_is_simplex(self, alphas, seed):
        q = sample_dirichlet(alphas, make_rng_stream(seed, ["prop"]))
        assert np.all(q >= 0.0)
        assert abs(q.sum() - 1.0) <= 1e-12


class TestCategorical:
    def test_point_mass(self):
        rng = make_rng_stream(1)
        assert all(sample_categorical([0.0, 1.0, 0.0], rng) == 1 for _ in range(100))

    def test_single_class(self):
        assert sample_categorical([1.0], make_rng_stream(2)) == 0

    def test_empirical_frequency_matches_q(self):
        rng = make_rng_stream(3, ["cat"])
        q = [0.25, 0.75]
        draws = np.array([sample_categorical(q, rng) for _ in range(100_000)])
        freq = np.bincount(draws, minlength=2) / draws.size
        assert np.allclose(freq, q, atol=0.01)

    @pytest.mark.parametrize("q", [[0.5, 0.4], [-0.1, 1.1], []])
    def test_invalid_simplex_rejected(self, q):
        with pytest.raises(ValueError):
            sample_categorical(q, make_rng_stream(0))


class TestFiniteDifferenceOracles:
    def test_grad_of_sum_of_squares(self):
        g = fd_grad_oracle(lambda w: float(w @ w), np.array([1.0, 2.0]), 1e-5)
        assert np.allclose(g, [2.0, 4.0], atol=1e-6)

    def test_grad_of_constant_is_zero(self):
        g = fd_grad_oracle(lambda w: 3.5, np.array([0.3, -0.7, 2.0]), 1e-5)
        assert np.allclose(g, 0.0, atol=1e-9)

    def test_grad_requires_positive_step(self):
        with pytest.raises(ValueError):
            fd_grad_oracle(lambda w: 0.0, np.zeros(2), 0.0)

    def test_quadratic_convergence_until_noise_floor(self):
        # Central differences are O(h^2): halving h cuts the error by ~4.
        w = np.array([0.4, -1.2, 0.9])

        def f(u):
            return float(np.sum(np.sin(u)) + np.exp(u[0] * 0.5))

        exact = np.cos(w)
        exact[0] += 0.5 * np.exp(w[0] * 0.5)
        errors = [
            np.max(np.abs(fd_grad_oracle(f, w, h) - exact)) for h in (1e-2, 5e-3, 2.5e-3)
        ]
        assert errors[0] / errors[1] >= 3.0
        assert errors[1] / errors[2] >= 3.0

    def test_hvp_of_diagonal_quadratic(self):
        diag = np.array([1.0, 2.0])
        hv = fd_hvp_oracle(lambda w: diag * w, np.array([0.3, 0.4]), np.ones(2), 1e-4)
        assert np.allclose(hv, [1.0, 2.0], atol=1e-7)

    def test_hvp_zero_direction(self):
        diag = np.array([1.0, 2.0])
        hv = fd_hvp_oracle(lambda w: diag * w, np.ones(2), np.zeros(2), 1e-4)
        assert np.allclose(hv, 0.0)

    def test_hvp_dimension_mismatch(self):
        with pytest.raises(ValueError):
            fd_hvp_oracle(lambda w: w, np.ones(3), np.ones(2), 1e-4)
