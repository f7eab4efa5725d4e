"""Budget-constrained sample allocation.

The continuous problem minimizes ``log J = log(Var(Q) (1 - R^2(r)) / N)``
subject to ``N (w + sum_i w_i r_i) <= C`` and ``N >= 1``. Because J falls as N
grows, the cost constraint is active at the optimum, so N is eliminated via
``N = C / (w + sum_i w_i r_i)``. What remains is a smooth problem in
``y = log r`` that SLSQP solves from several starts. The continuous optimum
is then rounded up to sample counts and repaired until it fits the budget.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .ensemble import MomentSpec
from .errors import ConvergenceError, InfeasibleBudgetError, LayoutError
from .theory import (
    Allocation,
    Scheme,
    WeightsResult,
    kl_pairs,
    r2_with_gradient,
    solve,
    tol_ceil,
)

log = logging.getLogger(__name__)

MONO_GAP = math.log1p(1e-9)
KL_GAP = math.log1p(1e-6)
R_FLOOR = 1.0 + 1e-6
FEAS_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class AllocationProblem:
    """Inputs of one allocation solve.

    Attributes:
        moments: covariances of the models (costs are taken from ``costs``).
        costs: ``(w, w_1, ..., w_M)``.
        budget: total cost C in high-fidelity-evaluation units.
        scheme: estimator family.
        monotone_ratios: force ``r_1 <= r_2 <= ...``; ``None`` picks the
            per-scheme default (on for recursive schemes, off otherwise).
        kl_search: for ACV-KL, scan every ``(K, L)``; otherwise use ``kl``.
        kl: fixed ``(K, L)`` when ``kl_search`` is off.
        n_starts: number of optimizer starts (at least 8).
        seed: seed of the start generator.
    """

    moments: MomentSpec
    costs: np.ndarray
    budget: float
    scheme: Scheme
    monotone_ratios: bool | None = None
    kl_search: bool = True
    kl: tuple[int, int] | None = None
    n_starts: int = 8
    seed: int = 0

    def __post_init__(self):
        costs = np.asarray(self.costs, dtype=float).reshape(-1)
        object.__setattr__(self, "costs", costs)
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        m = self.num_cv
        if self.scheme is Scheme.MC:
            costs = costs[:1]
            object.__setattr__(self, "costs", costs)
        elif costs.size != m + 1:
            raise ValueError(f"expected {m + 1} costs, got {costs.size}")
        if np.any(costs <= 0) or not np.all(np.isfinite(costs)):
            raise ValueError("costs must be finite and positive")
        if self.n_starts < 8:
            raise ValueError("at least 8 optimizer starts are required")
        minimum = float(costs.sum()) if m else float(costs[0])
        if not self.budget >= minimum:
            raise InfeasibleBudgetError(
                f"budget {self.budget} is below one evaluation of every model ({minimum})"
            )

    @property
    def num_cv(self) -> int:
        return 0 if self.scheme is Scheme.MC else self.moments.num_cv

    @property
    def monotone(self) -> bool:
        if self.scheme in (Scheme.MFMC,):
            return True
        if self.monotone_ratios is None:
            return self.scheme.recursive
        return bool(self.monotone_ratios)


@dataclass(frozen=True, eq=False)
class AllocationSolution:
    """Integerized allocation and what it achieves.

    Attributes:
        alloc: integer N with ratios ``N_i / N`` (and ``(K, L)`` for ACV-KL).
        predicted_variance: estimator variance at ``alloc``.
        achieved_cost: ``w N + sum_i w_i N_i`` (never above the budget).
        optimizer_trace: one record per start (and per ``(K, L)`` candidate).
        weights: optimal (or fixed, for RDIFF) weights at ``alloc``.
        continuous: the relaxed optimum ``(N, r)`` before rounding.
    """

    alloc: Allocation
    predicted_variance: float
    achieved_cost: float
    optimizer_trace: list[dict] = field(repr=False)
    weights: WeightsResult | None = None
    continuous: tuple[float, tuple[float, ...]] | None = None

    @property
    def counts(self) -> tuple[int, tuple[int, ...]]:
        return self.alloc.counts()


@dataclass(frozen=True)
class GradientResult:
    """Value and gradient of ``log J`` at ``(N, r_1, ..., r_M)``."""

    value: float
    gradient: np.ndarray
    nondifferentiable: bool
    on_boundary: bool


def _log_j(problem: AllocationProblem, n: float, r: np.ndarray, kl) -> tuple[float, np.ndarray, bool]:
    """``log J`` and its gradient in ``(N, r)``."""
    d = r2_with_gradient(problem.scheme, problem.moments, r, kl)
    gamma = 1.0 - d.r_squared
    if not gamma > 0.0:
        gamma = 1e-300
    value = math.log(problem.moments.var_q) + math.log(gamma) - math.log(n)
    grad = np.concatenate(([-1.0 / n], -d.gradient / gamma))
    return value, grad, d.nondifferentiable


def gradient_of_objective(
    problem: AllocationProblem,
    point: tuple[float, Sequence[float]],
    kl: tuple[int, int] | None = None,
) -> GradientResult:
    """Analytic gradient of ``log J`` with respect to ``(N, r)``.

    Args:
        problem: allocation problem (scheme and moments).
        point: ``(N, r)``.
        kl: ``(K, L)`` for ACV-KL; defaults to ``problem.kl``.

    Returns:
        The value, gradient, a flag for ``min`` ties (where a one-sided
        derivative is returned) and a flag for points on a constraint boundary.
    """
    n, r = point
    r = np.asarray(r, dtype=float).reshape(-1)
    n = float(n)
    if r.size != problem.num_cv:
        raise ValueError(f"expected {problem.num_cv} ratios, got {r.size}")
    kl = kl or problem.kl
    if problem.scheme is Scheme.ACV_KL and kl is None:
        raise ValueError("ACV-KL needs (K, L) to define the objective")
    value, grad, kink = _log_j(problem, n, r, kl)
    cost = n * (problem.costs[0] + float(problem.costs[1:] @ r))
    tol = 1e-12 * max(1.0, problem.budget)
    boundary = n <= 1.0 or bool(np.any(r <= 1.0)) or cost >= problem.budget - tol
    if problem.monotone and r.size > 1:
        boundary |= bool(np.any(np.diff(r) <= 0.0))
    return GradientResult(value, grad, kink, boundary)


# --- continuous solve -------------------------------------------------------


def _constraints(problem: AllocationProblem, kl) -> list[dict]:
    w, wi, c = problem.costs[0], problem.costs[1:], problem.budget
    m = wi.size
    cons = [
        {
            "type": "ineq",
            "fun": lambda y: (c - w - wi @ np.exp(y)) / c,
            "jac": lambda y: -(wi * np.exp(y)) / c,
        }
    ]
    rows = []
    if problem.monotone:
        for i in range(1, m):
            row = np.zeros(m)
            row[i], row[i - 1] = 1.0, -1.0
            rows.append((row, MONO_GAP))
    if problem.scheme is Scheme.ACV_KL:
        l = kl[1]
        for i in range(l, m):
            row = np.zeros(m)
            row[i], row[l - 1] = 1.0, -1.0
            rows.append((row, KL_GAP))
    if rows:
        a = np.array([r for r, _ in rows])
        b = np.array([g for _, g in rows])
        cons.append({"type": "ineq", "fun": lambda y: a @ y - b, "jac": lambda y: a})
    if problem.scheme in (Scheme.WRDIFF, Scheme.RDIFF) and not problem.monotone:
        # eta_i = sum_{k<=i} (-1)^(i-k) r_k - (-1)^i must stay positive
        sign = np.array([[(-1.0) ** (i - k) if k <= i else 0.0 for k in range(m)] for i in range(m)])
        const = np.array([(-1.0) ** (i + 1) for i in range(m)])
        cons.append(
            {
                "type": "ineq",
                "fun": lambda y: sign @ np.exp(y) + const - 1e-6,
                "jac": lambda y: sign * np.exp(y),
            }
        )
    return cons


def _violation(problem: AllocationProblem, kl, y: np.ndarray, bounds) -> float:
    worst = 0.0
    for con in _constraints(problem, kl):
        worst = max(worst, float(np.max(-np.asarray(con["fun"](y)), initial=0.0)))
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    worst = max(worst, float(np.max(lo - y, initial=0.0)), float(np.max(y - hi, initial=0.0)))
    return worst


def _starts(problem: AllocationProblem, kl, bounds) -> list[np.ndarray]:
    """Deterministic log-uniform starts, identical for problems with equal seeds."""
    rng = np.random.default_rng(problem.seed)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    m = lo.size
    w, wi = problem.costs[0], problem.costs[1:]
    # each model receives an equal slice of the budget at N = 1
    top = np.clip(np.log((problem.budget - w) / (m * wi)), lo, hi)
    bottom = np.minimum(np.log(1.5), top)
    starts = []
    for _ in range(problem.n_starts):
        y = bottom + rng.random(m) * (top - bottom)
        if problem.monotone:
            y = np.sort(y)
        if problem.scheme is Scheme.ACV_KL:
            l = kl[1]
            y[l:] = np.maximum(y[l:], y[l - 1] + 2 * KL_GAP)
        starts.append(np.clip(y, lo, hi))
    return starts


def _solve_continuous(problem: AllocationProblem, kl, trace: list[dict]):
    """Best relaxed ``(N, r)`` over all starts.

    Raises:
        ConvergenceError: if no start ends at a finite, feasible point.
    """
    w, wi, c = problem.costs[0], problem.costs[1:], problem.budget
    hi = np.log((c - w) / wi)
    bounds = [(math.log(R_FLOOR), max(h, math.log(R_FLOOR))) for h in hi]
    cons = _constraints(problem, kl)
    const = math.log(problem.moments.var_q) - math.log(c)

    def fun(y):
        r = np.exp(y)
        total = w + wi @ r
        d = r2_with_gradient(problem.scheme, problem.moments, r, kl)
        gamma = max(1.0 - d.r_squared, 1e-300)
        val = const + math.log(gamma) + math.log(total)
        grad = (-d.gradient / gamma + wi / total) * r
        return val, grad

    best = None
    for idx, y0 in enumerate(_starts(problem, kl, bounds)):
        rec = {"kl": kl, "start": idx}
        try:
            with warnings.catch_warnings():
                # SLSQP clips trial steps to the bounds and warns each time
                warnings.filterwarnings("ignore", "Values in x were outside bounds")
                res = minimize(
                    fun,
                    y0,
                    jac=True,
                    method="SLSQP",
                    bounds=bounds,
                    constraints=cons,
                    options={"maxiter": 200, "ftol": 1e-12},
                )
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            rec.update(objective=math.nan, violation=math.inf, success=False, message=str(exc))
            trace.append(rec)
            continue
        viol = _violation(problem, kl, res.x, bounds)
        rec.update(
            objective=float(res.fun),
            violation=viol,
            success=bool(res.success),
            message=str(res.message),
            iterations=int(res.nit),
        )
        trace.append(rec)
        if not math.isfinite(res.fun) or viol > FEAS_TOL:
            continue
        if best is None or res.fun < best[0]:
            best = (float(res.fun), res.x)
    if best is None:
        raise ConvergenceError(f"no optimizer start converged for {problem.scheme.value}", trace)
    r = np.exp(best[1])
    n = c / (w + wi @ r)
    return n, r


# --- rounding ---------------------------------------------------------------


def _repair(problem: AllocationProblem, n: int, r: np.ndarray, kl) -> list[int]:
    """``ceil(r_i N)`` raised just enough to satisfy the scheme's strict orderings."""
    counts = [tol_ceil(ri * n) for ri in r]
    sch = problem.scheme
    prev = n
    for i in range(len(counts)):
        if sch is Scheme.MFMC:
            counts[i] = max(counts[i], prev + 1)
            prev = counts[i]
        elif sch in (Scheme.WRDIFF, Scheme.RDIFF):
            counts[i] = max(counts[i], prev + 1)
            prev = counts[i] - prev
        else:
            counts[i] = max(counts[i], n + 1)
            if sch is Scheme.ACV_KL and i >= kl[1]:
                counts[i] = max(counts[i], counts[kl[1] - 1] + 1)
    return counts


def _integerize(problem: AllocationProblem, n_cont: float, r: np.ndarray, kl):
    w, wi = problem.costs[0], problem.costs[1:]
    n = max(1, tol_ceil(n_cont))
    while n >= 1:
        counts = _repair(problem, n, r, kl)
        cost = w * n + float(wi @ np.asarray(counts, dtype=float))
        if cost <= problem.budget * (1.0 + 1e-12):
            return n, counts, cost
        n -= 1
    raise InfeasibleBudgetError(
        f"budget {problem.budget} cannot pay for an admissible {problem.scheme.value} allocation"
    )


def _finish(problem: AllocationProblem, n_cont, r, kl, trace):
    n, counts, cost = _integerize(problem, n_cont, r, kl)
    alloc = Allocation.from_counts(n, counts, kl)
    res = solve(problem.scheme, problem.moments, alloc)
    return AllocationSolution(alloc, res.variance, cost, trace, res, (float(n_cont), tuple(map(float, r))))


def optimize(problem: AllocationProblem) -> AllocationSolution:
    """Minimize the estimator variance under the budget, then round to sample counts.

    For ACV-KL with ``kl_search`` on, every admissible ``(K, L)`` is solved
    and the smallest rounded variance wins (ties: smallest K, then L).

    Raises:
        InfeasibleBudgetError: if no admissible integer allocation fits.
        ConvergenceError: if every optimizer start fails.
    """
    w = problem.costs[0]
    if problem.num_cv == 0:
        n = int(math.floor(problem.budget / w * (1.0 + 1e-12)))
        alloc = Allocation(n, ())
        res = solve(Scheme.MC, problem.moments, alloc)
        return AllocationSolution(alloc, res.variance, w * n, [], res, (float(n), ()))

    trace: list[dict] = []
    if problem.scheme is not Scheme.ACV_KL:
        n_cont, r = _solve_continuous(problem, None, trace)
        return _finish(problem, n_cont, r, None, trace)

    m = problem.num_cv
    if problem.kl_search:
        pairs = list(kl_pairs(m))
    else:
        pairs = [problem.kl or (m, m)]
    best = None
    for kl in pairs:
        try:
            n_cont, r = _solve_continuous(problem, kl, trace)
            sol = _finish(problem, n_cont, r, kl, trace)
        except (ConvergenceError, InfeasibleBudgetError, LayoutError) as exc:
            log.debug("ACV-KL candidate %s skipped: %s", kl, exc)
            continue
        if best is None or sol.predicted_variance < best.predicted_variance:
            best = sol
    if best is None:
        raise ConvergenceError("no (K, L) candidate produced a feasible allocation", trace)
    return AllocationSolution(
        best.alloc, best.predicted_variance, best.achieved_cost, trace, best.weights, best.continuous
    )


def mc_variance(moments: MomentSpec, budget: float, w: float = 1.0) -> float:
    """Plain Monte Carlo variance at ``floor(C / w)`` samples."""
    return moments.var_q / math.floor(budget / w * (1.0 + 1e-12))
