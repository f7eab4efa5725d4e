"""Two-step estimation when the model covariances are unknown.

Step one evaluates every model on a few shared pilot points and estimates
the moments. Step two spends the rest of the budget on an allocation
optimized for those estimated moments, then realizes the estimator on fresh
points. Pilot points are never reused by the estimator.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .allocate import AllocationProblem, optimize
from .ensemble import ModelEnsemble, MomentSpec, moments_from_values
from .errors import (
    AcvError,
    DegenerateModelError,
    InconsistentMomentsError,
    InfeasibleBudgetError,
    SingularCovarianceError,
)
from .schemes import EstimatorReport, build_layout, predicted_variance, simulate
from .theory import Scheme

log = logging.getLogger(__name__)

SINGULAR_TOL = 1e-10


@dataclass(frozen=True)
class PilotPlan:
    """Pilot size, total budget (pilot included) and the replicate's seed."""

    n_pilot: int
    total_budget: float
    seed: int | np.random.SeedSequence = 0

    def __post_init__(self):
        if self.n_pilot < 2:
            raise ValueError(f"n_pilot must be at least 2, got {self.n_pilot}")
        if not self.total_budget > 0:
            raise ValueError("total_budget must be positive")

    def pilot_cost(self, costs) -> float:
        return self.n_pilot * float(np.sum(costs))


@dataclass(frozen=True, eq=False)
class TwoStepReport(EstimatorReport):
    """Estimator report plus the pilot bookkeeping.

    Pilot points occupy global indices ``[0, pilot_points)``; the estimator's
    own points occupy ``[point_offset, point_offset + layout.total_points)``.
    """

    pilot_points: int = 0
    pilot_cost: float = 0.0
    point_offset: int = 0
    estimated_moments: MomentSpec | None = None

    def sample_sets_disjoint(self) -> bool:
        return self.point_offset >= self.pilot_points


def _estimate(ensemble: ModelEnsemble, values: np.ndarray) -> MomentSpec:
    est = moments_from_values(values, ensemble.costs)
    # every weight solve factors C; rounding can hide exact rank loss from a
    # Cholesky attempt, so test the correlation spectrum instead
    sd = np.sqrt(np.diag(est.cov_matrix))
    low = np.linalg.eigvalsh(est.cov_matrix / np.outer(sd, sd))[0]
    if not low > SINGULAR_TOL:
        raise SingularCovarianceError(
            f"estimated C is singular (smallest correlation eigenvalue {low:.3g})", block="C"
        )
    return est


def two_step(
    plan: PilotPlan,
    ensemble: ModelEnsemble,
    scheme: Scheme,
    n_starts: int = 8,
) -> TwoStepReport:
    """Pilot moment estimation, allocation under the remaining budget, realization.

    If the pilot covariance is singular or degenerate the pilot is doubled
    (drawing new points) while its cost still leaves an admissible budget.

    Raises:
        InfeasibleBudgetError: if the pilot leaves too little budget.
        SingularCovarianceError: if no affordable pilot yields usable moments.
    """
    scheme = Scheme(scheme)
    costs = ensemble.costs
    rng = np.random.default_rng(plan.seed)
    # pilot points come first in the stream, estimator points after
    values = ensemble.evaluate_all(ensemble.sample(rng, plan.n_pilot))
    n_pilot = plan.n_pilot
    minimum = costs[0] if scheme is Scheme.MC else float(costs.sum())
    while True:
        pilot_cost = n_pilot * float(costs.sum())
        if plan.total_budget - pilot_cost < minimum:
            raise InfeasibleBudgetError(
                f"pilot of {n_pilot} points costs {pilot_cost}; "
                f"{plan.total_budget - pilot_cost} left is below {minimum}"
            )
        try:
            est = _estimate(ensemble, values)
            break
        except (DegenerateModelError, InconsistentMomentsError, SingularCovarianceError) as exc:
            grow = n_pilot
            if plan.total_budget - 2 * n_pilot * float(costs.sum()) < minimum:
                raise SingularCovarianceError(
                    f"pilot moments unusable ({exc}) and a larger pilot is unaffordable", block="C"
                ) from exc
            log.info("pilot of %d unusable (%s); doubling", n_pilot, exc)
            extra = ensemble.evaluate_all(ensemble.sample(rng, grow))
            values = np.vstack([values, extra])
            n_pilot += grow

    remaining = plan.total_budget - pilot_cost
    opt_seed = int(rng.integers(2**32))
    sol = optimize(
        AllocationProblem(est, costs, remaining, scheme, seed=opt_seed, n_starts=n_starts)
    )
    weights = sol.weights.alpha if scheme is not Scheme.MC else np.zeros(0)
    layout = build_layout(scheme, sol.alloc)
    qbar, delta = simulate(layout, ensemble, rng, 1)
    estimate = float(qbar[0] + delta[0] @ weights)
    total_cost = pilot_cost + layout.cost(costs)
    if total_cost > plan.total_budget * (1.0 + 1e-12):
        raise AcvError(f"budget accounting broken: spent {total_cost} of {plan.total_budget}")
    return TwoStepReport(
        estimate=estimate,
        weights_used=np.asarray(weights, dtype=float),
        cost=total_cost,
        predicted_variance=predicted_variance(layout, weights, ensemble.moments),
        scheme=scheme,
        seed=plan.seed,
        allocation=sol.alloc,
        layout=layout,
        pilot_points=n_pilot,
        pilot_cost=pilot_cost,
        point_offset=n_pilot,
        estimated_moments=est,
    )


@dataclass(frozen=True, eq=False)
class PilotStudyRow:
    """Replication statistics of one two-step estimator.

    ``known_variance`` is the predicted variance of the same scheme allocated
    with exact moments and the full budget (no pilot).
    """

    scheme: Scheme
    estimates: np.ndarray
    mean: float
    mean_se: float
    variance: float
    known_variance: float
    exact_mean: float

    @property
    def bias(self) -> float:
        return self.mean - self.exact_mean

    @property
    def bias_ok(self) -> bool:
        return abs(self.bias) < 3.0 * self.mean_se


def pilot_study(
    ensemble: ModelEnsemble,
    schemes,
    n_pilot: int,
    budget: float,
    n_rep: int,
    seed: int,
    threads: int = 1,
    n_starts: int = 8,
) -> list[PilotStudyRow]:
    """Repeat :func:`two_step` ``n_rep`` times for each scheme.

    Replicate ``k`` uses the seed sequence ``(seed, spawn_key=(k,))`` for every
    scheme, so all schemes see the same pilot points (a paired comparison).
    """
    if ensemble.moments is None:
        raise ValueError("pilot studies need an ensemble with exact moments")
    schemes = [Scheme(s) for s in schemes]
    seeds = [np.random.SeedSequence(seed, spawn_key=(k,)) for k in range(n_rep)]
    rows = []
    for scheme in schemes:

        def one(ss, scheme=scheme):
            plan = PilotPlan(n_pilot, budget, ss)
            return two_step(plan, ensemble, scheme, n_starts=n_starts).estimate

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                est = np.array(list(pool.map(one, seeds)))
        else:
            est = np.array([one(ss) for ss in seeds])
        known = optimize(
            AllocationProblem(ensemble.moments, ensemble.costs, budget, scheme, n_starts=n_starts)
        ).predicted_variance
        var = float(est.var(ddof=1))
        rows.append(
            PilotStudyRow(
                scheme=scheme,
                estimates=est,
                mean=float(est.mean()),
                mean_se=float(np.sqrt(var / n_rep)),
                variance=var,
                known_variance=known,
                exact_mean=ensemble.moments.mean_q,
            )
        )
    return rows
