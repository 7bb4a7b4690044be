"""Tests for the numerical verification harness itself."""

import json
import math

import numpy as np
import pytest

from selfsel import diagnostics as dg
from selfsel import likelihood as lk
from selfsel import models
from selfsel.stats_core import make_rng


@pytest.fixture(scope="module")
def small_instance():
    rng = make_rng(100)
    return models.random_instance(3, 2, 0.5, 1.5, rng)


class TestFdGradientCheck:
    def test_quadratic_is_machine_precision(self):
        A = np.diag([1.0, 2.0, 3.0])
        loss = lambda w: 0.5 * float(w @ A @ w)
        grad = lambda w: A @ w
        rep = dg.fd_gradient_check(loss, grad, np.array([0.3, -0.2, 1.0]))
        assert rep.passed and rep.statistic <= 1e-9

    def test_max_model_gradient(self, small_instance):
        obs = models.gen_max_observations(small_instance, 1, make_rng(101))[0]
        rep = dg.fd_gradient_check(
            lambda W: lk.nll_max(W, obs),
            lambda W: lk.exact_gradient_max(W, obs),
            small_instance.w_star,
        )
        assert rep.passed, rep.row()

    def test_second_price_gradient(self, small_instance):
        obs = models.gen_second_price_observations(small_instance, 1, make_rng(102))[0]
        rep = dg.fd_gradient_check(
            lambda W: lk.nll_second_price(W, obs),
            lambda W: lk.exact_gradient_second_price(W, obs),
            small_instance.w_star,
        )
        assert rep.passed, rep.row()

    def test_detects_wrong_gradient(self):
        loss = lambda w: 0.5 * float(w @ w)
        rep = dg.fd_gradient_check(loss, lambda w: 1.1 * w, np.ones(3))
        assert not rep.passed


class TestHessianMinEig:
    def test_k1_is_identity(self):
        rng = make_rng(103)
        w = rng.standard_normal((3, 1))
        w *= 1.2 / np.linalg.norm(w)
        spec = models.InstanceSpec(w_star=w, c=0.5, C=1.5)
        me = dg.hessian_min_eig_estimate("max", spec, spec.w_star, 10_000, make_rng(104))
        assert me == pytest.approx(1.0, abs=0.05)

    def test_nonnegative_at_truth(self, small_instance):
        me = dg.hessian_min_eig_estimate(
            "max", small_instance, small_instance.w_star, 20_000, make_rng(105)
        )
        assert me >= -0.02

    def test_nonnegative_near_truth(self, small_instance):
        rng = make_rng(106)
        V = rng.standard_normal((3, 2))
        V /= np.linalg.norm(V)
        me = dg.hessian_min_eig_estimate(
            "max", small_instance, small_instance.w_star + 0.1 * V, 20_000, make_rng(107)
        )
        assert me >= -0.02

    def test_second_price_nonnegative_at_truth(self, small_instance):
        me = dg.hessian_min_eig_estimate(
            "second-price", small_instance, small_instance.w_star, 20_000, make_rng(108)
        )
        assert me >= -0.02

    def test_sampled_covariance_route_agrees(self, small_instance):
        exact = dg.hessian_min_eig_estimate(
            "max", small_instance, small_instance.w_star, 2_000, make_rng(109)
        )
        sampled = dg.hessian_min_eig_estimate(
            "max", small_instance, small_instance.w_star, 2_000, make_rng(109), n_inner=600
        )
        assert sampled == pytest.approx(exact, abs=0.08)

    def test_refuses_large_problems(self, small_instance):
        with pytest.raises(ValueError):
            dg.hessian_min_eig_estimate(
                "max", small_instance, np.zeros((13, 5)), 10, make_rng(0)
            )


class TestStationarity:
    @pytest.mark.parametrize("model", ["max", "second-price"])
    def test_passes_at_truth(self, small_instance, model):
        rep = dg.stationarity_test(model, small_instance.w_star, 100_000, make_rng(110))
        assert rep.passed, rep.row()

    def test_fails_off_truth(self, small_instance):
        # power check: a visibly wrong parameter is flagged
        rng = make_rng(111)
        spec = small_instance

        data = models.gen_max_observations(spec, 100_000, rng)
        W = spec.w_star * 0.7
        grads = lk.exact_gradient_max_batch(W, data.x, data.y_max)
        mean, se = grads.mean(axis=0), grads.std(axis=0) / math.sqrt(len(data))
        assert np.max(np.abs(mean) / se) > 4.0

    def test_reproducible_bit_exact(self, small_instance):
        a = dg.stationarity_test("max", small_instance.w_star, 2_000, make_rng(112), seed=112)
        b = dg.stationarity_test("max", small_instance.w_star, 2_000, make_rng(112), seed=112)
        assert a == b
        assert a.to_json() == b.to_json()


class TestGrowthProbe:
    def test_zero_radius_exactly_zero(self, small_instance):
        pts = dg.growth_probe("max", small_instance.w_star, [0.0, 0.1], 5_000, make_rng(113))
        assert pts[0].gap == 0.0 and pts[0].se == 0.0

    @pytest.mark.parametrize("model", ["max", "second-price"])
    def test_gaps_nonnegative_and_monotone(self, small_instance, model):
        pts = dg.growth_probe(
            model, small_instance.w_star, [0.05, 0.1, 0.2, 0.3], 100_000, make_rng(114)
        )
        for p in pts:
            assert p.gap >= -4 * p.se, f"r={p.radius}"
        for lo, hi in zip(pts, pts[1:]):
            assert hi.gap >= lo.gap - 4 * (lo.se + hi.se), f"{lo.radius}->{hi.radius}"

    def test_report_json_schema(self, small_instance):
        rep = dg.stationarity_test("max", small_instance.w_star, 1_000, make_rng(115), seed=115)
        payload = json.loads(rep.to_json())
        assert set(payload) == {
            "name", "statistic", "threshold", "se", "passed", "sample_sizes", "seed",
        }
        assert payload["passed"] == (payload["statistic"] <= payload["threshold"])
