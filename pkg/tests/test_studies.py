from __future__ import annotations

import math

import numpy as np
import pytest

from acvmc.ensemble import monomial_ensemble, monomial_moments, tunable_moments
from acvmc.studies import (
    CurveSpec,
    ReplicationStudy,
    curve_ratios,
    delta_cov_oracle,
    empirical_check,
    gap_scan,
    jackknife_cov,
    reduction_curves,
    variance_study,
)
from acvmc.theory import Allocation, Scheme, f_is, ocv_solve, solve, structure


def within(oracle, analytic_cov, analytic_q, n_sigma=4.0):
    z1 = np.abs(oracle.delta_cov - analytic_cov) / oracle.delta_cov_se
    z2 = np.abs(oracle.delta_q_cov - analytic_q) / oracle.delta_q_cov_se
    return max(z1.max(), z2.max()) < n_sigma


class TestJackknife:
    def test_normal_variance_se(self):
        z = np.random.default_rng(0).normal(size=(40_000, 1)) * 2.0
        cov, se = jackknife_cov(z)
        np.testing.assert_allclose(cov[0, 0], np.var(z, ddof=1), rtol=1e-10)
        # Gaussian theory: SE(s^2) = sigma^2 sqrt(2 / (n - 1))
        np.testing.assert_allclose(se[0, 0], 4.0 * math.sqrt(2 / 39_999), rtol=0.3)


class TestOracles:
    def test_mfmc_cross_terms_vanish(self):
        ens = monomial_ensemble(5, 2)
        alloc = Allocation(10, (2.0, 4.0))
        o = delta_cov_oracle(Scheme.MFMC, alloc, ens, 100_000, seed=0)
        assert abs(o.delta_cov[0, 1]) < 3 * o.delta_cov_se[0, 1]
        s = structure(Scheme.MFMC, ens.moments, alloc)
        assert within(o, s.delta_cov, s.delta_q_cov)

    def test_independent_tails_match_hadamard(self):
        ens = monomial_ensemble(5, 2)
        alloc = Allocation(10, (2.0, 4.0))
        o = delta_cov_oracle(Scheme.ACV_IS, alloc, ens, 100_000, seed=1)
        f = f_is(alloc)
        assert within(o, ens.moments.cov_matrix * f / 10, np.diag(f) * ens.moments.cov_vector / 10)

    def test_recursive_tridiagonal_entry(self):
        ens = monomial_ensemble(5, 2)
        alloc = Allocation(10, (2.0, 3.0))
        o = delta_cov_oracle(Scheme.WRDIFF, alloc, ens, 100_000, seed=2)
        want = -ens.moments.cov_matrix[0, 1] / 10
        assert abs(o.delta_cov[0, 1] - want) < 4 * o.delta_cov_se[0, 1]
        assert abs(o.delta_q_cov[1]) < 4 * o.delta_q_cov_se[1]


class TestVariance:
    def test_zero_weights_is_mc_variance(self):
        ens = monomial_ensemble(5, 2)
        study = ReplicationStudy(Scheme.ACV_MF, Allocation(10, (2.0, 4.0)), ens, 100_000)
        res = variance_study(study, [0.0, 0.0])
        np.testing.assert_allclose(res.variance, ens.moments.var_q / 10, rtol=0.05)
        assert res.variance_within(ens.moments.var_q / 10)

    def test_optimal_weights(self):
        ens = monomial_ensemble(5, 3)
        alloc = Allocation(10, (2.0, 4.0, 8.0))
        opt = solve(Scheme.ACV_MF, ens.moments, alloc)
        res = variance_study(ReplicationStudy(Scheme.ACV_MF, alloc, ens, 100_000, 4), opt.alpha)
        np.testing.assert_allclose(res.variance, opt.variance, rtol=0.05)

    def test_envelope_brackets_prediction(self):
        ens = monomial_ensemble(5, 1)
        res = variance_study(ReplicationStudy(Scheme.MFMC, Allocation(5, (3.0,)), ens, 1000), [0.0])
        lo, hi = res.chi2_envelope(1.0)
        assert lo < 1.0 < hi

    def test_rejects_wrong_weight_count(self):
        ens = monomial_ensemble(5, 2)
        with pytest.raises(ValueError):
            variance_study(ReplicationStudy(Scheme.ACV_MF, Allocation(10, (2.0, 4.0)), ens, 10), [0.0])

    def test_needs_two_replicates(self):
        with pytest.raises(ValueError):
            ReplicationStudy(Scheme.MC, Allocation(10, ()), monomial_ensemble(5, 1), 1)

    def test_empirical_check_passes_for_exact_formulas(self):
        ens = monomial_ensemble(5, 3)
        alloc = Allocation(10, (2.0, 4.0, 8.0), (2, 1))
        res = solve(Scheme.ACV_KL, ens.moments, alloc)
        chk = empirical_check(Scheme.ACV_KL, alloc, ens, res.alpha, 50_000, seed=6)
        assert chk.mean_ok and chk.variance_ok
        assert chk.oracle_pass_fraction() >= 0.95


class TestCurves:
    def spec(self):
        schemes = (Scheme.MFMC, Scheme.WRDIFF, Scheme.ACV_IS, Scheme.ACV_MF, Scheme.ACV_KL)
        return CurveSpec(tuple(range(30)), schemes, monomial_moments(5, 4))

    def test_ratios(self):
        assert curve_ratios(3, 2) == (8.0, 16.0, 32.0)

    def test_recursive_curves_bounded(self):
        m = monomial_moments(5, 4)
        floor = 1 - m.rho[0] ** 2
        for row in reduction_curves(self.spec()):
            if row.scheme in ("MFMC", "WRDIFF"):
                assert row.gamma >= floor

    def test_acv_reaches_ocv(self):
        m = monomial_moments(5, 4)
        ocv = ocv_solve(m, 4).gamma
        rows = [r for r in reduction_curves(self.spec()) if r.x == 29]
        for row in rows:
            if row.scheme in ("ACV_IS", "ACV_MF", "ACV_KL"):
                assert abs(row.gamma - ocv) < 1e-4

    def test_baselines_present(self):
        names = {r.scheme for r in reduction_curves(self.spec())}
        assert {"OCV-1", "OCV-4"} <= names

    def test_small_ratios_can_lose_to_ocv1(self):
        m = monomial_moments(5, 4)
        row = next(r for r in reduction_curves(self.spec()) if r.x == 0 and r.scheme == "ACV_IS")
        assert row.gamma > ocv_solve(m, 1).gamma

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            CurveSpec((), (Scheme.MFMC,), monomial_moments(5, 4))
        with pytest.raises(ValueError):
            CurveSpec((3, 1), (Scheme.MFMC,), monomial_moments(5, 4))


class TestGap:
    def test_peak_inside_interval(self):
        grid = np.linspace(math.pi / 6, math.pi / 2, 52)[1:-1]
        scan = gap_scan(grid, lambda t: tunable_moments(math.pi / 2, t, math.pi / 6))
        assert all(row.ratio >= 1 - 1e-12 for row in scan.rows)
        assert abs(scan.argmax_theta - 1.2) <= 0.1
        assert scan.rows[0].ratio < scan.max_ratio and scan.rows[-1].ratio < scan.max_ratio

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            gap_scan([], lambda t: None)
