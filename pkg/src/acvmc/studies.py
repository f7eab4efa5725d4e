"""Replication harness, brute-force oracles and theory curves.

The oracles simulate many independent realizations of a layout and measure
``Cov(Delta, Delta)``, ``Cov(Delta, Qbar)`` and the estimator's mean and
variance directly, with delete-a-group jackknife standard errors. The curve
and gap tables are pure theory evaluations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import chi2, norm

from .ensemble import ModelEnsemble, MomentSpec
from .schemes import build_layout, predicted_variance, replicate
from .theory import Allocation, Scheme, kl_search, ocv_solve, solve, structure

JACKKNIFE_GROUPS = 50


@dataclass(frozen=True)
class ReplicationStudy:
    """Repeated independent realizations of one estimator."""

    scheme: Scheme
    alloc: Allocation
    ensemble: ModelEnsemble
    n_rep: int
    base_seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.n_rep < 2:
            raise ValueError(f"n_rep must be at least 2, got {self.n_rep}")
        object.__setattr__(self, "scheme", Scheme(self.scheme))


@dataclass(frozen=True)
class CurveSpec:
    """Ratios ``r_i = 2^(i + x)`` for each ``x`` in the grid."""

    x_grid: tuple[int, ...]
    schemes: tuple[Scheme, ...]
    moments: MomentSpec

    def __post_init__(self):
        grid = tuple(self.x_grid)
        if not grid:
            raise ValueError("x_grid must not be empty")
        if list(grid) != sorted(grid):
            raise ValueError("x_grid must be sorted")
        object.__setattr__(self, "x_grid", grid)
        object.__setattr__(self, "schemes", tuple(Scheme(s) for s in self.schemes))


@dataclass(frozen=True, eq=False)
class OracleResult:
    delta_cov: np.ndarray
    delta_q_cov: np.ndarray
    delta_cov_se: np.ndarray
    delta_q_cov_se: np.ndarray
    n_rep: int


@dataclass(frozen=True)
class VarianceResult:
    """Replication mean and variance of an estimator.

    ``variance_se`` is the delete-a-group jackknife error; ``chi2_se`` is the
    Gaussian-theory value ``sqrt(2 / (n - 1)) * variance``.
    """

    mean: float
    variance: float
    mean_se: float
    variance_se: float
    chi2_se: float
    n_rep: int

    def chi2_envelope(self, predicted: float, n_sigma: float = 3.0) -> tuple[float, float]:
        """Interval containing the sample variance with the ``n_sigma`` two-sided
        normal probability, when the true variance is ``predicted``."""
        dof = self.n_rep - 1
        tail = norm.sf(n_sigma)
        return (
            predicted * chi2.ppf(tail, dof) / dof,
            predicted * chi2.isf(tail, dof) / dof,
        )

    def variance_within(self, predicted: float, n_sigma: float = 3.0) -> bool:
        lo, hi = self.chi2_envelope(predicted, n_sigma)
        return lo <= self.variance <= hi


def _group_sums(z: np.ndarray, groups: int):
    n = z.shape[0]
    labels = np.arange(n) * groups // n
    s1 = np.zeros((groups, z.shape[1]))
    s2 = np.zeros((groups, z.shape[1], z.shape[1]))
    np.add.at(s1, labels, z)
    for g in range(groups):
        block = z[labels == g]
        s2[g] = block.T @ block
    counts = np.bincount(labels, minlength=groups)
    return s1, s2, counts


def jackknife_cov(z: np.ndarray, groups: int = JACKKNIFE_GROUPS):
    """Sample covariance of the columns of ``z`` and its jackknife standard error.

    Returns:
        Tuple ``(cov, se)`` of ``(p, p)`` arrays.
    """
    z = np.asarray(z, dtype=float)
    n = z.shape[0]
    groups = min(groups, n)
    center = z.mean(axis=0)
    zc = z - center  # improves the conditioning of the sums
    s1, s2, counts = _group_sums(zc, groups)
    t1, t2 = s1.sum(axis=0), s2.sum(axis=0)

    def cov_of(a1, a2, m):
        return (a2 - np.outer(a1, a1) / m) / (m - 1)

    full = cov_of(t1, t2, n)
    loo = np.array([cov_of(t1 - s1[g], t2 - s2[g], n - counts[g]) for g in range(groups)])
    se = np.sqrt((groups - 1) / groups * ((loo - loo.mean(axis=0)) ** 2).sum(axis=0))
    return full, se


def delta_cov_oracle(
    scheme: Scheme,
    alloc: Allocation,
    ensemble: ModelEnsemble,
    n_rep: int,
    seed: int,
    threads: int = 1,
) -> OracleResult:
    """Empirical ``Cov(Delta, Delta)`` and ``Cov(Delta, Qbar)`` from ``n_rep`` realizations.

    Raises:
        LayoutError: if the allocation is infeasible for the scheme.
    """
    layout = build_layout(scheme, alloc)
    qbar, delta = replicate(layout, ensemble, n_rep, seed, threads)
    cov, se = jackknife_cov(np.column_stack([qbar, delta]))
    return OracleResult(cov[1:, 1:], cov[1:, 0], se[1:, 1:], se[1:, 0], n_rep)


def variance_study(study: ReplicationStudy, weights: Sequence[float]) -> VarianceResult:
    """Mean and variance of the estimator over ``study.n_rep`` realizations."""
    weights = np.asarray(weights, dtype=float).reshape(-1)
    layout = build_layout(study.scheme, study.alloc)
    if weights.size != layout.num_cv:
        raise ValueError(f"expected {layout.num_cv} weights, got {weights.size}")
    qbar, delta = replicate(layout, study.ensemble, study.n_rep, study.base_seed, study.threads)
    est = qbar + delta @ weights
    n = est.size
    var, var_se = jackknife_cov(est[:, None])
    variance = float(var[0, 0])
    return VarianceResult(
        mean=float(est.mean()),
        variance=variance,
        mean_se=math.sqrt(variance / n),
        variance_se=float(var_se[0, 0]),
        chi2_se=math.sqrt(2.0 / (n - 1)) * variance,
        n_rep=n,
    )


def curve_ratios(num_cv: int, x: float) -> tuple[float, ...]:
    return tuple(2.0 ** (i + x) for i in range(1, num_cv + 1))


@dataclass(frozen=True)
class CurveRow:
    scheme: str
    x: float
    gamma: float
    kl: tuple[int, int] | None = None


def reduction_curves(spec: CurveSpec) -> list[CurveRow]:
    """gamma of every scheme at ``r_i = 2^(i+x)`` plus the OCV-k baselines.

    Baseline rows are named ``OCV-k`` and repeated at every x. N is fixed to 1
    since gamma does not depend on it.
    """
    moments = spec.moments
    m = moments.num_cv
    baselines = [(f"OCV-{k}", ocv_solve(moments, k).gamma) for k in range(1, m + 1)]
    rows: list[CurveRow] = []
    for x in spec.x_grid:
        alloc = Allocation(1, curve_ratios(m, x))
        for scheme in spec.schemes:
            if scheme is Scheme.ACV_KL and alloc.kl is None:
                k, l, res = kl_search(moments, alloc)
                rows.append(CurveRow(scheme.value, x, res.gamma, (k, l)))
            else:
                rows.append(CurveRow(scheme.value, x, solve(scheme, moments, alloc).gamma))
        rows.extend(CurveRow(name, x, gamma) for name, gamma in baselines)
    return rows


@dataclass(frozen=True)
class GapRow:
    theta1: float
    gamma_ocv: float
    gamma_ocv1: float
    ratio: float


@dataclass(frozen=True)
class GapScan:
    rows: tuple[GapRow, ...]
    argmax_theta: float
    max_ratio: float


def gap_scan(theta_grid: Sequence[float], moments_fn: Callable[[float], MomentSpec]) -> GapScan:
    """``gamma_OCV-1 / gamma_OCV`` over a grid of ``theta1`` and its maximum."""
    rows = []
    for t in theta_grid:
        mom = moments_fn(float(t))
        g_all = ocv_solve(mom, mom.num_cv).gamma
        g_one = ocv_solve(mom, 1).gamma
        rows.append(GapRow(float(t), g_all, g_one, g_one / g_all))
    if not rows:
        raise ValueError("theta grid is empty")
    best = max(rows, key=lambda r: r.ratio)
    return GapScan(tuple(rows), best.theta1, best.ratio)


@dataclass(frozen=True, eq=False)
class EmpiricalCheck:
    """Oracle and variance checks of one estimator from a single replication set."""

    scheme: Scheme
    alloc: Allocation
    weights: np.ndarray
    oracle: OracleResult | None
    analytic_delta_cov: np.ndarray | None
    analytic_delta_q_cov: np.ndarray | None
    variance: VarianceResult
    predicted_variance: float
    exact_mean: float

    def oracle_z(self) -> np.ndarray:
        """|analytic - empirical| / SE over the upper triangle and the Q column."""
        if self.oracle is None:
            return np.zeros(0)
        iu = np.triu_indices(self.oracle.delta_cov.shape[0])
        diff = np.concatenate(
            [
                (self.oracle.delta_cov - self.analytic_delta_cov)[iu],
                self.oracle.delta_q_cov - self.analytic_delta_q_cov,
            ]
        )
        se = np.concatenate([self.oracle.delta_cov_se[iu], self.oracle.delta_q_cov_se])
        return np.abs(diff) / se

    def oracle_pass_fraction(self, n_sigma: float = 3.0) -> float:
        z = self.oracle_z()
        return 1.0 if z.size == 0 else float(np.mean(z <= n_sigma))

    @property
    def mean_ok(self) -> bool:
        return abs(self.variance.mean - self.exact_mean) <= 3.0 * self.variance.mean_se

    @property
    def variance_ok(self) -> bool:
        return self.variance.variance_within(self.predicted_variance)

    def passed(self, min_fraction: float = 0.95) -> bool:
        return self.mean_ok and self.variance_ok and self.oracle_pass_fraction() >= min_fraction


def empirical_check(
    scheme: Scheme,
    alloc: Allocation,
    ensemble: ModelEnsemble,
    weights: Sequence[float],
    n_rep: int,
    seed: int,
    threads: int = 1,
    stream: int = 0,
) -> EmpiricalCheck:
    """Replicate an estimator and compare its moments with the exact ones.

    The ensemble must carry exact moments. One replication set feeds both the
    covariance oracle and the mean/variance check.
    """
    scheme = Scheme(scheme)
    moments = ensemble.moments
    if moments is None:
        raise ValueError("empirical checks need an ensemble with exact moments")
    layout = build_layout(scheme, alloc)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if weights.size != layout.num_cv:
        raise ValueError(f"expected {layout.num_cv} weights, got {weights.size}")
    qbar, delta = replicate(layout, ensemble, n_rep, seed, threads, stream=stream)
    oracle = analytic = None
    sub = moments.subset(layout.num_cv) if layout.num_cv else moments
    if layout.num_cv:
        cov, se = jackknife_cov(np.column_stack([qbar, delta]))
        oracle = OracleResult(cov[1:, 1:], cov[1:, 0], se[1:, 1:], se[1:, 0], n_rep)
        analytic = structure(scheme, sub, layout.effective_allocation())
    est = qbar + delta @ weights
    var, var_se = jackknife_cov(est[:, None])
    variance = float(var[0, 0])
    vres = VarianceResult(
        mean=float(est.mean()),
        variance=variance,
        mean_se=math.sqrt(variance / n_rep),
        variance_se=float(var_se[0, 0]),
        chi2_se=math.sqrt(2.0 / (n_rep - 1)) * variance,
        n_rep=n_rep,
    )
    return EmpiricalCheck(
        scheme=scheme,
        alloc=layout.effective_allocation(),
        weights=weights,
        oracle=oracle,
        analytic_delta_cov=None if analytic is None else analytic.delta_cov,
        analytic_delta_q_cov=None if analytic is None else analytic.delta_q_cov,
        variance=vres,
        predicted_variance=predicted_variance(layout, weights, sub),
        exact_mean=moments.mean_q,
    )
