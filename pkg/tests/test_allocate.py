from __future__ import annotations

import math

import numpy as np
import pytest

from acvmc import allocate as allocate_mod
from acvmc.allocate import (
    AllocationProblem,
    gradient_of_objective,
    mc_variance,
    optimize,
)
from acvmc.ensemble import monomial_moments, tunable_moments
from acvmc.errors import ConvergenceError, InfeasibleBudgetError
from acvmc.schemes import build_layout
from acvmc.theory import Allocation, Scheme, solve

COSTS4 = [10.0 ** (-i) for i in range(5)]
OPT = [Scheme.MFMC, Scheme.RDIFF, Scheme.WRDIFF, Scheme.ACV_IS, Scheme.ACV_MF, Scheme.ACV_KL]


def problem(scheme, budget=100.0, m=4, **kw):
    return AllocationProblem(monomial_moments(5, m), COSTS4[: m + 1], budget, scheme, **kw)


class TestMonteCarlo:
    def test_floor_of_budget(self):
        sol = optimize(problem(Scheme.MC, budget=37.5))
        assert sol.alloc.n == 37
        np.testing.assert_allclose(sol.predicted_variance, monomial_moments(5, 4).var_q / 37)
        assert sol.predicted_variance == mc_variance(monomial_moments(5, 4), 37.5)

    def test_gradient_in_n(self):
        g = gradient_of_objective(problem(Scheme.MC), (8.0, []))
        np.testing.assert_allclose(g.gradient, [-1 / 8])


class TestOptimize:
    @pytest.mark.parametrize("scheme", OPT)
    @pytest.mark.parametrize("budget", [10.0, 100.0, 1000.0])
    def test_feasible_and_within_budget(self, scheme, budget):
        sol = optimize(problem(scheme, budget))
        assert sol.achieved_cost <= budget * (1 + 1e-12)
        lay = build_layout(scheme, sol.alloc)
        np.testing.assert_allclose(lay.cost(COSTS4), sol.achieved_cost)
        res = solve(scheme, monomial_moments(5, 4), sol.alloc)
        np.testing.assert_allclose(res.variance, sol.predicted_variance, rtol=1e-12)
        assert len(sol.optimizer_trace) >= 8

    @pytest.mark.parametrize("scheme", OPT)
    def test_better_than_mc(self, scheme):
        sol = optimize(problem(scheme, 100.0))
        assert sol.predicted_variance < mc_variance(monomial_moments(5, 4), 100.0)

    @pytest.mark.parametrize("scheme", [Scheme.MFMC, Scheme.WRDIFF, Scheme.ACV_MF, Scheme.ACV_KL])
    def test_more_budget_never_hurts(self, scheme):
        budgets = [20.0, 50.0, 100.0, 300.0, 1000.0]
        var = [optimize(problem(scheme, b)).predicted_variance for b in budgets]
        assert np.all(np.diff(var) <= 1e-12), var

    def test_kl_search_beats_mf(self):
        for budget in (10.0, 100.0, 1000.0):
            kl = optimize(problem(Scheme.ACV_KL, budget)).predicted_variance
            mf = optimize(problem(Scheme.ACV_MF, budget)).predicted_variance
            assert kl <= mf * (1 + 1e-9)

    def test_kl_beats_recursive_schemes_on_monomial(self):
        for budget in (10.0, 100.0, 1000.0, 10000.0):
            kl = optimize(problem(Scheme.ACV_KL, budget)).predicted_variance
            for other in (Scheme.WRDIFF, Scheme.MFMC):
                assert kl < optimize(problem(other, budget)).predicted_variance

    def test_cheaper_cvs_help_more(self):
        m = monomial_moments(5, 4)
        mc = mc_variance(m, 100.0)
        expensive = optimize(AllocationProblem(m, [1, .5, .25, .125, .0625], 100.0, Scheme.ACV_KL))
        cheap = optimize(AllocationProblem(m, COSTS4, 100.0, Scheme.ACV_KL))
        assert mc / cheap.predicted_variance > mc / expensive.predicted_variance

    def test_monotone_ratios_respected(self):
        sol = optimize(problem(Scheme.ACV_IS, 100.0, monotone_ratios=True))
        assert np.all(np.diff(sol.alloc.r) >= 0)

    def test_deterministic(self):
        a = optimize(problem(Scheme.ACV_MF, 100.0, seed=4))
        b = optimize(problem(Scheme.ACV_MF, 100.0, seed=4))
        assert a.alloc == b.alloc

    def test_unweighted_never_beats_weighted(self):
        for t1 in np.linspace(0.7, 1.5, 5):
            m = tunable_moments(math.pi / 2, t1, math.pi / 6)
            costs = [1.0, 0.1, 0.01]
            w = optimize(AllocationProblem(m, costs, 100.0, Scheme.WRDIFF)).predicted_variance
            r = optimize(AllocationProblem(m, costs, 100.0, Scheme.RDIFF)).predicted_variance
            assert r >= w * (1 - 1e-12)


class TestFailures:
    def test_budget_below_one_of_each(self):
        with pytest.raises(InfeasibleBudgetError):
            problem(Scheme.ACV_MF, budget=1.0)

    def test_too_few_starts(self):
        with pytest.raises(ValueError):
            problem(Scheme.ACV_MF, n_starts=3)

    def test_cost_arity(self):
        with pytest.raises(ValueError):
            AllocationProblem(monomial_moments(5, 2), [1.0, 0.1], 10.0, Scheme.ACV_MF)

    def test_all_starts_failing(self, monkeypatch):
        def boom(*args, **kwargs):
            raise FloatingPointError("forced")

        monkeypatch.setattr(allocate_mod, "minimize", boom)
        with pytest.raises(ConvergenceError) as info:
            optimize(problem(Scheme.ACV_IS))
        assert len(info.value.traces) >= 8


def _fd_gradient(prob, n, r, kl, h_rel=1e-6):
    x = np.concatenate(([n], r))

    def f(z):
        return math.log(solve(prob.scheme, prob.moments, Allocation(z[0], tuple(z[1:]), kl)).variance)

    out = np.empty_like(x)
    for i in range(x.size):
        h = h_rel * max(abs(x[i]), 1.0)
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (f(up) - f(dn)) / (2 * h)
    return out


class TestGradient:
    @pytest.mark.parametrize("scheme", OPT)
    def test_matches_finite_differences(self, scheme, rng):
        prob = problem(scheme, 1e4)
        for _ in range(20):
            n = rng.uniform(2, 50)
            r = np.sort(rng.uniform(1.5, 30, size=4)) if scheme is not Scheme.ACV_IS else rng.uniform(1.5, 30, 4)
            kl = (3, 2) if scheme is Scheme.ACV_KL else None
            if scheme is Scheme.ACV_KL:
                r = np.sort(r)
            if scheme.recursive:
                r = np.cumsum(rng.uniform(0.5, 3, size=4)) + 1.0
            g = gradient_of_objective(prob, (n, r), kl)
            fd = _fd_gradient(prob, n, r, kl)
            assert np.max(np.abs(g.gradient - fd)) <= 1e-4 * np.max(np.abs(fd))
            assert not g.nondifferentiable

    def test_tie_is_flagged(self):
        g = gradient_of_objective(problem(Scheme.ACV_MF), (5.0, [2.0, 3.0, 3.0, 4.0]))
        assert g.nondifferentiable

    def test_boundary_is_flagged(self):
        g = gradient_of_objective(problem(Scheme.ACV_MF), (1.0, [2.0, 3.0, 4.0, 5.0]))
        assert g.on_boundary
        g = gradient_of_objective(problem(Scheme.ACV_MF), (2.0, [2.0, 3.0, 4.0, 5.0]))
        assert not g.on_boundary

    def test_kl_requires_pair(self):
        with pytest.raises(ValueError):
            gradient_of_objective(problem(Scheme.ACV_KL), (5.0, [2.0, 3.0, 4.0, 5.0]))
