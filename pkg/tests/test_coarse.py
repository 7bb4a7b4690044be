"""Tests for convex coarse sets, localization, set-truncated sampling,
hit-and-run, and the coarse mean estimator."""

import math

import numpy as np
import pytest
from scipy import optimize, stats

from selfsel import coarse, models
from selfsel.coarse import (
    Box,
    BoxListPartition,
    CoarseConfig,
    GridPartition,
    Polytope,
    PolytopeListPartition,
    Singleton,
    coarse_gradient,
    estimate_coarse_mean,
    hit_and_run,
    hit_and_run_many,
    localization_radius,
    localize,
    locate,
    sample_truncated_gaussian_on_set,
)
from selfsel.optimizer import PsgdConfig
from selfsel.stats_core import make_rng, std_cdf, std_logcdf, std_pdf

INF = np.inf


def half_lines_1d():
    return BoxListPartition(
        (Box(np.array([-INF]), np.array([0.0])), Box(np.array([0.0]), np.array([INF])))
    )


class TestSets:
    def test_box_validation(self):
        with pytest.raises(ValueError):
            Box(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
        b = Box(np.array([-INF, 0.0]), np.array([0.0, INF]))
        assert b.contains(np.array([-1.0, 5.0]))
        assert not b.contains(np.array([0.5, 5.0]))

    def test_polytope_needs_strict_interior(self):
        A = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        b = np.ones(4)
        with pytest.raises(ValueError):
            Polytope(A, b, np.array([1.0, 0.0]))  # on the boundary
        p = Polytope(A, b, np.zeros(2))
        assert p.contains(np.array([0.5, -0.5]))

    def test_singleton(self):
        s = Singleton(np.array([1.0, 2.0]))
        assert s.contains(np.array([1.0, 2.0]))
        np.testing.assert_array_equal(s.representative(), [1.0, 2.0])


class TestLocate:
    def test_boxlist_half_open(self):
        part = half_lines_1d()
        assert locate(part, np.array([0.0])) is part.cells[1]
        assert locate(part, np.array([-1e-12])) is part.cells[0]

    def test_polytope_list(self):
        A = np.array([[1.0]])
        left = Polytope(A, np.array([0.0]), np.array([-1.0]))
        right = Polytope(-A, np.array([0.0]), np.array([1.0]))
        part = PolytopeListPartition((left, right))
        assert locate(part, np.array([-0.5])) is left
        assert locate(part, np.array([0.5])) is right

    def test_missing_cell_raises(self):
        part = BoxListPartition((Box(np.array([0.0]), np.array([1.0])),))
        with pytest.raises(coarse.PartitionError):
            locate(part, np.array([5.0]))


class TestLocalize:
    def test_quadrant_intersection(self):
        b = Box(np.array([0.0, -INF]), np.array([INF, 0.0]))
        out = localize(b, 5.0)
        np.testing.assert_array_equal(out.lower, [0.0, -5.0])
        np.testing.assert_array_equal(out.upper, [5.0, 0.0])

    def test_disjoint_box_becomes_center_singleton(self):
        b = Box(np.array([10.0, 10.0]), np.array([11.0, 11.0]))
        out = localize(b, 5.0)
        assert isinstance(out, Singleton)
        np.testing.assert_allclose(out.point, [10.5, 10.5])

    def test_contained_set_unchanged(self):
        b = Box(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
        out = localize(b, 5.0)
        np.testing.assert_array_equal(out.lower, b.lower)
        np.testing.assert_array_equal(out.upper, b.upper)

    def test_half_infinite_disjoint_box_representative(self):
        b = Box(np.array([10.0]), np.array([INF]))
        out = localize(b, 5.0)
        assert isinstance(out, Singleton)
        np.testing.assert_allclose(out.point, [10.0])  # closest in-set point to 0

    def test_polytope_window_intersection(self):
        # unbounded strip around the x-axis
        A = np.array([[0.0, 1.0], [0.0, -1.0]])
        p = Polytope(A, np.array([1.0, 1.0]), np.zeros(2))
        out = localize(p, 3.0)
        assert isinstance(out, Polytope)
        assert out.contains(np.array([2.9, 0.5]))
        assert not out.contains(np.array([3.5, 0.0]))

    def test_polytope_outside_window_becomes_singleton(self):
        A = np.array([[-1.0, 0.0]])
        p = Polytope(A, np.array([-10.0]), np.array([11.0, 0.0]))  # x >= 10
        out = localize(p, 5.0)
        assert isinstance(out, Singleton)
        np.testing.assert_allclose(out.point, [11.0, 0.0])

    def test_singleton_passthrough(self):
        s = Singleton(np.array([100.0]))
        assert localize(s, 5.0) is s

    def test_localization_radius_formula(self):
        R = localization_radius(2.0, 200_000, 5, 1e-3)
        assert R == pytest.approx(2.0 + 10.0 * math.log(200_000 * 5 / 1e-3))


class TestSetSampling:
    def test_whole_space_is_plain_gaussian(self):
        b = Box(np.full(1, -INF), np.full(1, INF))
        rng = make_rng(0)
        z = np.array([sample_truncated_gaussian_on_set(np.zeros(1), b, rng)[0] for _ in range(20_000)])
        assert stats.kstest(z, "norm").statistic <= 0.015

    def test_positive_orthant_mean(self):
        d = 3
        b = Box(np.zeros(d), np.full(d, INF))
        rng = make_rng(1)
        n = 50_000
        z = np.stack([sample_truncated_gaussian_on_set(np.zeros(d), b, rng) for _ in range(n)])
        expect = std_pdf(0.0) / std_cdf(0.0)  # 0.7979 per coordinate
        se = z.std(axis=0) / math.sqrt(n)
        assert np.all(np.abs(z.mean(axis=0) - expect) <= 3 * se)

    def test_singleton_returns_point(self):
        s = Singleton(np.array([3.0, -1.0]))
        out = sample_truncated_gaussian_on_set(np.zeros(2), s, make_rng(2))
        np.testing.assert_array_equal(out, [3.0, -1.0])


class TestHitAndRun:
    def unit_box_polytope(self):
        A = np.vstack([np.eye(2), -np.eye(2)])
        b = np.array([1.0, 1.0, 0.0, 0.0])  # [0,1]^2
        return Polytope(A, b, np.full(2, 0.5))

    def test_iterates_feasible(self):
        poly = self.unit_box_polytope()
        rng = make_rng(3)
        for _ in range(50):
            z = hit_and_run(np.array([0.3, 0.8]), poly, poly.interior_point, 20, rng)
            assert np.all(poly.A @ z <= poly.b + 1e-9)

    def test_infeasible_start_rejected(self):
        poly = self.unit_box_polytope()
        with pytest.raises(ValueError):
            hit_and_run(np.zeros(2), poly, np.array([2.0, 2.0]), 5, make_rng(4))

    def test_one_dimensional_interval_single_step_exact(self):
        # chord == whole set, so one step yields the exact truncated normal
        A = np.array([[1.0], [-1.0]])
        poly = Polytope(A, np.array([1.0, 1.0]), np.zeros(1))  # [-1, 1]
        mu = np.array([0.4])
        rng = make_rng(5)
        n = 30_000
        z = np.array([hit_and_run(mu, poly, np.zeros(1), 1, rng)[0] for _ in range(n)])
        pa, pb = std_cdf(-1 - 0.4), std_cdf(1 - 0.4)
        cdf = lambda t: (std_cdf(t - 0.4) - pa) / (pb - pa)
        assert stats.kstest(z, cdf).statistic <= 0.02

    def test_box_polytope_matches_box_sampler(self):
        from selfsel.stats_core import sample_truncnorm_box

        poly = self.unit_box_polytope()
        mu = np.array([0.2, 0.6])
        rng = make_rng(6)
        n = 4000
        hnr = hit_and_run_many(mu, poly, poly.interior_point, 200, rng, size=n)
        box = np.stack(
            [sample_truncnorm_box(mu, np.zeros(2), np.ones(2), rng) for _ in range(n)]
        )
        for j in range(2):
            d = stats.ks_2samp(hnr[:, j], box[:, j]).statistic
            assert d <= 0.03, f"coordinate {j}: KS={d:.4f}"

    def test_triangle_first_moment_matches_rejection(self):
        # triangle with vertices (0,0), (1,0), (0,1); mu at the centroid
        A = np.array([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]])
        b = np.array([0.0, 0.0, 1.0])
        centroid = np.array([1 / 3, 1 / 3])
        poly = Polytope(A, b, centroid)
        rng = make_rng(7)
        n = 4000
        hnr = hit_and_run_many(centroid, poly, centroid, 200, rng, size=n)
        assert np.all(hnr @ A.T <= b + 1e-9)
        # rejection oracle
        kept = []
        while sum(len(k) for k in kept) < n:
            cand = centroid + rng.standard_normal((8 * n, 2))
            ok = np.all(cand @ A.T <= b, axis=1)
            kept.append(cand[ok])
        orc = np.concatenate(kept)[:n]
        for j in range(2):
            se = math.sqrt(hnr[:, j].var() / n + orc[:, j].var() / n)
            assert abs(hnr[:, j].mean() - orc[:, j].mean()) <= 4 * se


class TestCoarseGradient:
    def test_singleton_partition_gradient_is_residual(self):
        x = np.array([0.7, -0.2])
        obs = models.CoarseObservation(Singleton(x))
        mu = np.array([1.0, 1.0])
        g = coarse_gradient(mu, obs, R=10.0, rng=make_rng(8))
        np.testing.assert_allclose(g, mu - x)

    def test_stationary_at_truth_on_grid(self):
        rng = make_rng(9)
        mu_star = np.array([0.6, -0.3])
        part = GridPartition(width=1.0, offset=np.zeros(2))
        data = models.gen_coarse_observations(mu_star, part, 40_000, rng)
        R = 30.0
        grads = np.stack(
            [coarse_gradient(mu_star, data[i], R, rng) for i in range(len(data))]
        )
        mean = grads.mean(axis=0)
        se = grads.std(axis=0) / math.sqrt(len(data))
        assert np.all(np.abs(mean) <= 4 * se)

    def test_gradient_norm_bound_inside_window(self):
        rng = make_rng(10)
        R = 4.0
        cell = Box(np.array([1.0, 1.0]), np.array([2.0, 2.0]))  # inside B_inf(0, 4)
        mu = np.array([0.5, -0.5])
        for _ in range(100):
            g = coarse_gradient(mu, models.CoarseObservation(cell), R, rng)
            assert np.linalg.norm(g) <= np.linalg.norm(mu) + math.sqrt(2) * R + 1e-9


def coarse_nll_boxes(mu, lowers, uppers):
    """Monte-Carlo coarse NLL for box observations: mean of -log cell mass."""
    a = std_logcdf(uppers - mu)  # log Phi(hi - mu)
    # log(Phi(hi) - Phi(lo)) = log Phi(hi) + log1p(-exp(log Phi(lo) - log Phi(hi)))
    b = std_logcdf(lowers - mu)
    with np.errstate(divide="ignore"):
        log_mass = a + np.log1p(-np.exp(np.clip(b - a, None, -1e-300)))
    return float(-log_mass.sum(axis=1).mean())


class TestCoarseNllShape:
    def test_midpoint_convexity_on_grid(self):
        rng = make_rng(11)
        mu_star = np.array([0.4, -0.8])
        part = GridPartition(width=1.0, offset=np.zeros(2))
        data = models.gen_coarse_observations(mu_star, part, 20_000, rng)
        lowers = np.stack([s.lower for s in data.sets])
        uppers = np.stack([s.upper for s in data.sets])
        for _ in range(5):
            p = rng.standard_normal(2)
            q = rng.standard_normal(2)
            mid = 0.5 * (p + q)
            lp = coarse_nll_boxes(p, lowers, uppers)
            lq = coarse_nll_boxes(q, lowers, uppers)
            lm = coarse_nll_boxes(mid, lowers, uppers)
            # exact per-dataset convexity, so no SE slack is needed beyond fp noise
            assert lm <= 0.5 * (lp + lq) + 1e-9


class TestEstimator:
    def _config(self, seed, eps_dist=0.08, alpha_hint=0.5, t_cap=4000):
        eta = math.sqrt(2) * alpha_hint
        eps = eta**2 * eps_dist**2 / 2
        psgd = PsgdConfig(
            eps0=max(1.0, 2 * eps), eps=eps, eta=1.0, G=1.0,
            t_multiplier=40.0, gamma_divisor=math.sqrt(40.0) / 2.0,
            t_cap=t_cap, seed=seed,
        )
        return CoarseConfig(D=2.0, psgd=psgd, alpha_hint=alpha_hint)

    def test_grid_recovery_small(self):
        rng = make_rng(12)
        mu_star = np.array([0.8, -0.4])
        part = GridPartition(width=1.0, offset=np.zeros(2))
        data = models.gen_coarse_observations(mu_star, part, 30_000, rng)
        mu_hat, trace = estimate_coarse_mean(data, part, self._config(12), make_rng(13))
        assert not trace.non_identifiable
        assert np.linalg.norm(mu_hat - mu_star) <= 0.1
        assert trace.n_localized == 0  # everything already inside the window

    def test_whole_space_flagged_non_identifiable(self):
        whole = BoxListPartition((Box(np.full(2, -INF), np.full(2, INF)),))
        data = models.gen_coarse_observations(np.array([0.5, 0.5]), whole, 5_000, make_rng(14))
        mu_hat, trace = estimate_coarse_mean(data, whole, self._config(14, t_cap=500), make_rng(15))
        assert trace.non_identifiable
        assert np.linalg.norm(mu_hat) <= 2.0 + 1e-8  # stays feasible

    def test_half_line_matches_direct_mle(self):
        rng = make_rng(16)
        mu_star = np.array([0.5])
        part = half_lines_1d()
        n = 100_000
        data = models.gen_coarse_observations(mu_star, part, n, rng)
        mu_hat, _ = estimate_coarse_mean(
            data, part, self._config(16, eps_dist=0.02, t_cap=8000), make_rng(17)
        )
        # oracle: golden-section search on the exact 1-D NLL
        n_pos = sum(1 for s in data.sets if s.lower[0] == 0.0)
        n_neg = len(data) - n_pos

        def nll(mu):
            return -(n_pos * std_logcdf(mu) + n_neg * std_logcdf(-mu))

        direct = optimize.minimize_scalar(
            nll, bracket=(-1.0, 0.0, 2.0), method="golden"
        ).x
        assert abs(mu_hat[0] - mu_star[0]) <= 0.05
        assert abs(mu_hat[0] - direct) <= 0.02

    def test_singleton_observations_recover_sample_mean_target(self):
        rng = make_rng(18)
        mu_star = np.array([0.3, 0.3])
        pts = mu_star + rng.standard_normal((20_000, 2))
        data = models.CoarseDataset([Singleton(p) for p in pts])
        mu_hat, trace = estimate_coarse_mean(data, None, self._config(18), make_rng(19))
        assert np.linalg.norm(mu_hat - mu_star) <= 0.1

    def test_determinism(self):
        rng = make_rng(20)
        part = GridPartition(width=1.0, offset=np.zeros(2))
        data = models.gen_coarse_observations(np.array([0.2, 0.1]), part, 5_000, rng)
        cfg = self._config(20, t_cap=500)
        a, _ = estimate_coarse_mean(data, part, cfg, make_rng(21))
        b, _ = estimate_coarse_mean(data, part, cfg, make_rng(21))
        np.testing.assert_array_equal(a, b)
