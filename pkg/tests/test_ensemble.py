from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from acvmc.ensemble import (
    ModelEnsemble,
    ModelSpec,
    MomentSpec,
    empirical_moments,
    monomial_ensemble,
    monomial_moments,
    tunable_ensemble,
    tunable_moments,
)
from acvmc.errors import DegenerateModelError, InconsistentMomentsError

from .oracles import REFERENCE_MONOMIAL_CORR, monomial_cov_fraction, quadrature_moments


class TestMonomialEnsemble:
    def test_five_four_models(self):
        ens = monomial_ensemble(5, 4)
        x = np.array([[0.3], [0.7]])
        for i, power in enumerate([5, 4, 3, 2, 1]):
            np.testing.assert_allclose(ens.evaluate(i, x), x[:, 0] ** power)
        assert ens.num_cv == 4
        np.testing.assert_array_equal(ens.costs, np.ones(5))

    def test_three_two(self):
        ens = monomial_ensemble(3, 2)
        x = np.array([[0.5]])
        np.testing.assert_allclose(ens.evaluate_all(x), [[0.125, 0.25, 0.5]])

    @pytest.mark.parametrize("args", [(1, 1), (3, 3), (2, 5), (4, 0)])
    def test_rejects_constant_or_empty(self, args):
        with pytest.raises(ValueError):
            monomial_ensemble(*args)

    def test_samples_inside_unit_interval(self, rng):
        pts = monomial_ensemble(5, 4).sample(rng, 1000)
        assert pts.shape == (1000, 1)
        assert np.all((pts >= 0) & (pts <= 1))


class TestMonomialMoments:
    def test_matches_reported_table(self):
        corr = monomial_moments(5, 4).corr_matrix()
        np.testing.assert_allclose(corr, REFERENCE_MONOMIAL_CORR, atol=1e-2)

    def test_cov_five_four_exact(self):
        m = monomial_moments(5, 4)
        assert monomial_cov_fraction(5, 4) == pytest.approx(1 / 15)
        np.testing.assert_allclose(m.cov_vector[0], 1 / 15, rtol=1e-15)

    def test_matches_quadrature(self):
        powers = [5, 4, 3, 2, 1]
        funcs = [lambda x, p=p: x[:, 0] ** p for p in powers]
        mean, cov = quadrature_moments(funcs, [[0.0, 1.0]])
        m = monomial_moments(5, 4)
        np.testing.assert_allclose(m.joint_cov(), cov, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(m.mean_q, mean[0], rtol=1e-13)
        np.testing.assert_allclose(m.means, mean[1:], rtol=1e-13)

    def test_self_correlation_is_one(self):
        np.testing.assert_allclose(np.diag(monomial_moments(6, 3).corr_matrix()), 1.0)

    @given(st.integers(2, 9).flatmap(lambda d: st.tuples(st.just(d), st.integers(1, d - 1))))
    def test_correlations_positive_and_definite(self, args):
        corr = monomial_moments(*args).corr_matrix()
        assert np.all(corr > 0) and np.all(corr <= 1 + 1e-15)
        assert np.linalg.eigvalsh(corr)[0] > 0


class TestTunable:
    def test_valid_interior(self):
        ens = tunable_ensemble(math.pi / 2, math.pi / 3, math.pi / 6)
        assert ens.input_dim == 2 and ens.num_cv == 2
        np.testing.assert_array_equal(ens.bounds, [[-1, 1], [-1, 1]])

    @pytest.mark.parametrize("t1", [math.pi / 6, math.pi / 2, 0.1, 2.0])
    def test_rejects_theta1_outside(self, t1):
        with pytest.raises(ValueError):
            tunable_ensemble(math.pi / 2, t1, math.pi / 6)
        with pytest.raises(ValueError):
            tunable_moments(math.pi / 2, t1, math.pi / 6)

    @pytest.mark.parametrize("t1", [0.6, 1.2, 1.5])
    def test_matches_quadrature(self, t1):
        ens = tunable_ensemble(math.pi / 2, t1, math.pi / 6)
        funcs = [m.evaluator for m in ens.models]
        mean, cov = quadrature_moments(funcs, ens.bounds, order=6)
        np.testing.assert_allclose(ens.moments.joint_cov(), cov, atol=1e-13)
        np.testing.assert_allclose(mean, 0.0, atol=1e-14)

    def test_unit_variances(self):
        m = tunable_moments(math.pi / 2, 1.0, math.pi / 6)
        np.testing.assert_array_equal(np.diag(m.joint_cov()), 1.0)

    def test_first_correlation_at_coincident_angle(self):
        m = tunable_moments(math.pi / 2, math.pi / 2 - 1e-9, math.pi / 6)
        np.testing.assert_allclose(m.rho[0], math.sqrt(77) / 9, rtol=1e-12)

    def test_second_correlation_independent_of_theta1(self):
        vals = [tunable_moments(math.pi / 2, t, math.pi / 6).rho[1] for t in np.linspace(0.6, 1.5, 7)]
        np.testing.assert_allclose(vals, vals[0], rtol=0, atol=1e-15)


class TestMomentSpec:
    def test_accessors(self):
        m = MomentSpec(4.0, [[1.0, 0.5], [0.5, 9.0]], [1.0, 3.0])
        np.testing.assert_allclose(m.std_q, 2.0)
        np.testing.assert_allclose(m.rho, [0.5, 0.5])
        np.testing.assert_allclose(m.tau, [0.5, 1.5])
        np.testing.assert_allclose(m.c_bar, [0.5, 1.5])

    def test_zero_variance_rejected(self):
        with pytest.raises(DegenerateModelError):
            MomentSpec(1.0, [[0.0]], [0.0])
        with pytest.raises(DegenerateModelError):
            MomentSpec(0.0, [[1.0]], [0.0])

    def test_asymmetric_rejected(self):
        with pytest.raises(InconsistentMomentsError):
            MomentSpec(1.0, [[1.0, 0.2], [0.1, 1.0]], [0.1, 0.1])

    def test_cauchy_schwarz_rejected(self):
        with pytest.raises(InconsistentMomentsError):
            MomentSpec(1.0, [[1.0]], [1.5])

    def test_joint_not_psd_rejected(self):
        # pairwise valid correlations that are jointly impossible
        with pytest.raises(InconsistentMomentsError):
            MomentSpec(1.0, [[1.0, -0.9], [-0.9, 1.0]], [0.9, 0.9])

    def test_round_trip_dict(self):
        m = monomial_moments(5, 2)
        back = MomentSpec.from_dict(m.to_dict())
        np.testing.assert_array_equal(back.joint_cov(), m.joint_cov())
        np.testing.assert_array_equal(back.costs, m.costs)


class TestEmpiricalMoments:
    def test_agrees_with_analytic(self):
        ens = monomial_ensemble(5, 4)
        est = empirical_moments(ens, 100_000, seed=2024)
        np.testing.assert_allclose(est.corr_matrix(), ens.moments.corr_matrix(), atol=3e-3)

    def test_deterministic(self):
        ens = monomial_ensemble(5, 4)
        a = empirical_moments(ens, 500, seed=7)
        b = empirical_moments(ens, 500, seed=7)
        np.testing.assert_array_equal(a.joint_cov(), b.joint_cov())
        np.testing.assert_array_equal(a.means, b.means)

    def test_unbiased_normalization(self):
        ens = monomial_ensemble(2, 1)
        rng = np.random.default_rng(3)
        pts = ens.sample(rng, 5)
        vals = ens.evaluate_all(pts)
        est = empirical_moments(ens, 5, seed=3)
        expected = ((vals[:, 0] - vals[:, 0].mean()) ** 2).sum() / 4
        np.testing.assert_allclose(est.var_q, expected, rtol=1e-14)

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            empirical_moments(monomial_ensemble(5, 4), 1, seed=0)

    def test_constant_model_flagged(self):
        models = (
            ModelSpec(0, 1.0, lambda x: x[:, 0]),
            ModelSpec(1, 0.1, lambda x: np.zeros(len(x))),
        )
        ens = ModelEnsemble(models, 1, np.array([[0.0, 1.0]]))
        with pytest.raises(DegenerateModelError):
            empirical_moments(ens, 2, seed=0)

    def test_error_shrinks_like_inverse_sqrt(self):
        ens = monomial_ensemble(5, 4)
        exact = ens.moments.corr_matrix()
        med = []
        for n in (1_000, 10_000, 100_000):
            errs = [
                np.max(np.abs(empirical_moments(ens, n, seed=s).corr_matrix() - exact))
                for s in range(20)
            ]
            med.append(np.median(errs))
        # each tenfold increase in n should shrink the error by about sqrt(10)
        ratios = np.array(med[:-1]) / np.array(med[1:])
        assert np.all((ratios > math.sqrt(10) / 2) & (ratios < 2 * math.sqrt(10))), ratios


class TestModelSpec:
    def test_cost_positive(self):
        with pytest.raises(ValueError):
            ModelSpec(0, 0.0, lambda x: x[:, 0])

    def test_with_costs(self):
        ens = monomial_ensemble(5, 2).with_costs([1.0, 0.1, 0.01])
        np.testing.assert_allclose(ens.costs, [1.0, 0.1, 0.01])
        np.testing.assert_allclose(ens.moments.costs, [1.0, 0.1, 0.01])
