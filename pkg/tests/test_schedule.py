"""Schedule construction, round-trips, forward noising moments, time grids."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condlab import schedule as sch


class TestLinear:
    def test_endpoints(self):
        s = sch.build_linear(1e-4, 2e-2, 1000)
        assert s.beta[0] == 1e-4
        assert s.beta[-1] == 2e-2
        assert s.kind == "linear"

    def test_alpha_bar_starts_at_one(self):
        s = sch.build_linear(1e-4, 2e-2, 50)
        assert s.alpha_bar[0] == 1.0

    def test_recurrence_exact(self):
        s = sch.build_linear(1e-4, 2e-2, 1000)
        # cumprod guarantees this at 64-bit exactly
        recon = np.cumprod(1.0 - s.beta)
        assert np.array_equal(s.alpha_bar[1:], recon)

    def test_log_alpha_bar_close_to_minus_beta_sum(self):
        s = sch.build_linear(1e-4, 2e-2, 1000)
        lhs = math.log(s.alpha_bar[-1])
        rhs = -float(np.sum(s.beta))
        assert abs(lhs - rhs) / abs(rhs) < 0.01

    def test_strictly_decreasing(self):
        s = sch.build_linear(1e-4, 2e-2, 200)
        assert np.all(np.diff(s.alpha_bar) < 0)

    def test_rejects_bad_ranges(self):
        with pytest.raises(ValueError):
            sch.build_linear(0.0, 0.02, 10)
        with pytest.raises(ValueError):
            sch.build_linear(0.03, 0.02, 10)
        with pytest.raises(ValueError):
            sch.build_linear(1e-4, 1.0, 10)
        with pytest.raises(ValueError):
            sch.build_linear(1e-4, 2e-2, 0)

    def test_single_step(self):
        s = sch.build_linear(1e-4, 2e-2, 1)
        assert s.beta.shape == (1,)
        assert s.beta[0] == 1e-4

    def test_immutable(self):
        s = sch.build_linear(1e-4, 2e-2, 10)
        with pytest.raises(ValueError):
            s.beta[0] = 0.5


class TestCosine:
    def test_alpha_bar_starts_at_one(self):
        s = sch.build_cosine(100)
        assert s.alpha_bar[0] == 1.0

    def test_monotone_decreasing(self):
        s = sch.build_cosine(100)
        assert np.all(np.diff(s.alpha_bar) < 0)

    def test_round_trip_exact(self):
        s = sch.build_cosine(1000)
        recon = np.cumprod(1.0 - s.beta)
        assert np.array_equal(s.alpha_bar[1:], recon)

    def test_beta_range(self):
        s = sch.build_cosine(1000)
        assert np.all(s.beta > 0)
        assert np.all(s.beta <= 0.999)

    def test_clip_engages_at_the_end(self):
        # The raw profile pushes the last betas above the clip for large N.
        s = sch.build_cosine(1000)
        assert s.beta[-1] == 0.999


class TestContinuousConsistency:
    def test_linear_small(self):
        s = sch.build_linear(1e-4, 2e-2, 1000)
        assert sch.continuous_consistency(s) < 0.02

    def test_constant_beta_analytic(self):
        beta = 0.05
        b = np.full(10, beta)
        ab = np.concatenate([[1.0], np.cumprod(1 - b)])
        s = sch.NoiseSchedule(N=10, beta=b, alpha_bar=ab, kind="linear")
        want = abs(beta + math.log(1 - beta)) / beta
        assert abs(sch.continuous_consistency(s) - want) < 1e-12

    def test_single_step_no_error(self):
        s = sch.build_linear(1e-3, 1e-3, 1)
        val = sch.continuous_consistency(s)
        assert np.isfinite(val)


class TestForwardSample:
    def test_k_zero_identity(self):
        s = sch.build_linear(1e-4, 2e-2, 10)
        x0 = np.array([1.0, -2.0])
        eps = np.array([5.0, 5.0])
        out = sch.forward_sample(s, x0, 0, eps)
        assert np.array_equal(out, x0)

    def test_zero_eps(self):
        s = sch.build_linear(1e-4, 2e-2, 10)
        x0 = np.array([1.0, -2.0])
        out = sch.forward_sample(s, x0, 7, np.zeros(2))
        assert np.allclose(out, math.sqrt(s.alpha_bar[7]) * x0)

    def test_affine_coefficients_on_unit_vectors(self):
        s = sch.build_linear(1e-4, 2e-2, 100)
        for k in (1, 50, 100):
            a = sch.forward_sample(s, np.ones(1), k, np.zeros(1))[0]
            b = sch.forward_sample(s, np.zeros(1), k, np.ones(1))[0]
            assert abs(a - math.sqrt(s.alpha_bar[k])) < 1e-15
            assert abs(b - math.sqrt(1 - s.alpha_bar[k])) < 1e-15

    def test_shape_mismatch(self):
        s = sch.build_linear(1e-4, 2e-2, 10)
        with pytest.raises(ValueError):
            sch.forward_sample(s, np.ones(3), 5, np.ones(4))

    def test_gaussian_moments(self):
        # x0 ~ N(m, s0^2): marginal of x_k is N(sqrt(ab) m, ab s0^2 + 1 - ab).
        s = sch.build_linear(1e-4, 2e-2, 1000)
        rng = np.random.default_rng(0)
        m, s0 = 1.3, 0.7
        n = 100_000
        k = 400
        x0 = rng.normal(m, s0, size=(n, 1))
        eps = rng.normal(size=(n, 1))
        xk = sch.forward_sample(s, x0, k, eps)[:, 0]
        ab = s.alpha_bar[k]
        want_mean = math.sqrt(ab) * m
        want_var = ab * s0**2 + 1 - ab
        se_mean = math.sqrt(want_var / n)
        se_var = want_var * math.sqrt(2.0 / (n - 1))
        assert abs(xk.mean() - want_mean) < 3 * se_mean
        assert abs(xk.var(ddof=1) - want_var) < 3 * se_var

    def test_per_row_k(self):
        s = sch.build_linear(1e-4, 2e-2, 100)
        x0 = np.ones((3, 2))
        eps = np.zeros((3, 2))
        ks = np.array([1, 50, 100])
        out = sch.forward_sample(s, x0, ks, eps)
        for i, k in enumerate(ks):
            assert np.allclose(out[i], math.sqrt(s.alpha_bar[k]))

    def test_terminal_close_to_standard_normal(self):
        # Bounded data pushed to k=N under the linear schedule.
        s = sch.build_linear(1e-4, 2e-2, 1000)
        rng = np.random.default_rng(3)
        n = 20_000
        x0 = rng.uniform(-1, 1, size=(n, 2))
        eps = rng.normal(size=(n, 2))
        xN = sch.forward_sample(s, x0, 1000, eps)
        ref = rng.normal(size=(n, 2))
        # sliced Wasserstein-1 with 32 directions
        dirs = rng.normal(size=(32, 2))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        dists = []
        for u in dirs:
            a = np.sort(xN @ u)
            b = np.sort(ref @ u)
            dists.append(np.mean(np.abs(a - b)))
        assert np.mean(dists) < 0.05


class TestTimeGrid:
    def test_uniform_two_points(self):
        g = sch.build_time_grid(2, "uniform")
        assert np.array_equal(g.points, [0.0, 1.0])

    def test_square_root_three_points(self):
        g = sch.build_time_grid(3, "square-root")
        assert np.allclose(g.points, [0.0, 0.25, 1.0])

    def test_square_root_densifies_near_zero(self):
        g = sch.build_time_grid(100, "square-root")
        gaps = np.diff(g.points)
        assert gaps[0] < gaps[-1]

    def test_rejects_small_K(self):
        with pytest.raises(ValueError):
            sch.build_time_grid(1, "uniform")

    def test_rejects_unknown_spacing(self):
        with pytest.raises(ValueError):
            sch.build_time_grid(10, "cubic")

    @given(st.integers(2, 300))
    @settings(max_examples=40, deadline=None)
    def test_grids_monotone_in_range(self, K):
        for spacing in ("uniform", "square-root"):
            g = sch.build_time_grid(K, spacing)
            assert g.points[0] == 0.0
            assert g.points[-1] == 1.0
            assert np.all(np.diff(g.points) > 0)
