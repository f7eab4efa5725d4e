"""Closed-form weights, covariance structures and variance reductions.

Every estimator here has the form ``Qbar(S) + sum_i alpha_i * Delta_i`` with
``Delta_i = Qbar_i(S_i^1) - muhat_i(S_i^2)``. Its variance is a quadratic in
alpha determined by ``Cov(Delta, Delta)`` and ``Cov(Delta, Qbar)``; the
functions below build those two objects for each sampling scheme and solve
for the minimizing weights.

Ratios ``r_i`` may be non-integer: all formulas are continuous in ``r`` and
rounding to sample counts happens only when a layout is built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .ensemble import MomentSpec
from .errors import InconsistentMomentsError, LayoutError, SingularCovarianceError

R2_TOL = 1e-9


class Scheme(str, Enum):
    MC = "MC"
    MFMC = "MFMC"
    RDIFF = "RDIFF"
    WRDIFF = "WRDIFF"
    ACV_IS = "ACV_IS"
    ACV_MF = "ACV_MF"
    ACV_KL = "ACV_KL"

    @property
    def recursive(self) -> bool:
        return self in (Scheme.MFMC, Scheme.RDIFF, Scheme.WRDIFF)


def tol_ceil(x: float) -> int:
    """Ceiling that ignores float noise below 1e-9 (so 2.0000000001 -> 2)."""
    return int(math.ceil(round(x, 9)))


@dataclass(frozen=True)
class Allocation:
    """High-fidelity count ``n`` and per-model sample ratios.

    ``n`` may be fractional while optimizing; layouts require an integer.

    Attributes:
        n: high-fidelity sample count N.
        ratios: ``r_i = N_i / N`` for the M control variates.
        kl: ``(K, L)`` for the ACV-KL family, ``None`` otherwise.
    """

    n: float
    ratios: tuple[float, ...] = ()
    kl: tuple[int, int] | None = None

    def __post_init__(self):
        ratios = tuple(float(r) for r in np.atleast_1d(np.asarray(self.ratios, dtype=float)))
        object.__setattr__(self, "ratios", ratios)
        if not (math.isfinite(self.n) and self.n >= 1):
            raise LayoutError(f"N must be a finite number >= 1, got {self.n}")
        bad = [i + 1 for i, r in enumerate(ratios) if not (math.isfinite(r) and r >= 1.0)]
        if bad:
            raise LayoutError(f"ratios must be finite and >= 1; violated for i={bad}")
        if self.kl is not None:
            k, l = (int(v) for v in self.kl)
            object.__setattr__(self, "kl", (k, l))
            if not 1 <= l <= k <= len(ratios):
                raise LayoutError(f"(K, L)=({k}, {l}) violates 1 <= L <= K <= M={len(ratios)}")

    @property
    def num_cv(self) -> int:
        return len(self.ratios)

    @property
    def r(self) -> np.ndarray:
        return np.array(self.ratios, dtype=float)

    @property
    def is_integral(self) -> bool:
        return float(self.n).is_integer()

    def counts(self) -> tuple[int, tuple[int, ...]]:
        """``(N, (N_1, ..., N_M))`` with ``N_i = ceil(r_i N)``."""
        if not self.is_integral:
            raise LayoutError(f"N={self.n} is not an integer")
        n = int(self.n)
        return n, tuple(tol_ceil(r * n) for r in self.ratios)

    def eta(self) -> np.ndarray:
        """Disjoint-partition sizes ``|S_i^2| / N`` implied by the ratios.

        Each level's samples split into the previous partition and a fresh
        one, so ``eta_i = r_i - eta_{i-1}`` with ``eta_0 = 1``.
        """
        eta = np.empty(self.num_cv)
        prev = 1.0
        for i, r in enumerate(self.ratios):
            prev = r - prev
            eta[i] = prev
        return eta

    def with_kl(self, k: int, l: int) -> "Allocation":
        return Allocation(self.n, self.ratios, (k, l))

    @classmethod
    def from_counts(
        cls, n: int, counts: Sequence[int], kl: tuple[int, int] | None = None
    ) -> "Allocation":
        return cls(n, tuple(c / n for c in counts), kl)

    @classmethod
    def from_eta(cls, n: float, eta: Sequence[float]) -> "Allocation":
        prev, ratios = 1.0, []
        for e in eta:
            ratios.append(e + prev)
            prev = e
        return cls(n, tuple(ratios))


@dataclass(frozen=True, eq=False)
class EstimatorStructure:
    """``Cov(Delta, Delta)`` and ``Cov(Delta, Qbar)`` at a given N.

    Attributes:
        delta_cov: ``(M, M)`` covariance of the discrepancies.
        delta_q_cov: ``(M,)`` covariance of each discrepancy with ``Qbar(S)``.
        n: the high-fidelity count the covariances refer to.
        f_matrix: F with ``delta_cov = (C o F) / N`` when the scheme factors.
    """

    delta_cov: np.ndarray
    delta_q_cov: np.ndarray
    n: float
    f_matrix: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class WeightsResult:
    alpha: np.ndarray
    r_squared: float
    gamma: float
    variance: float


def _result(alpha: np.ndarray, r2: float, moments: MomentSpec, n: float) -> WeightsResult:
    gamma = 1.0 - r2
    return WeightsResult(np.asarray(alpha, dtype=float), r2, gamma, gamma * moments.var_q / n)


def _checked_r2(raw: float) -> float:
    if not math.isfinite(raw) or raw < -R2_TOL or raw > 1.0 + R2_TOL:
        raise InconsistentMomentsError(f"R^2={raw!r} lies outside [0, 1]")
    return min(max(raw, 0.0), 1.0)


def _cholesky(mat: np.ndarray, block: str):
    try:
        return cho_factor(mat, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise SingularCovarianceError(f"{block} is not positive definite", block=block) from exc


def _check_arity(moments: MomentSpec, alloc: Allocation):
    if moments.num_cv != alloc.num_cv:
        raise ValueError(
            f"moments describe {moments.num_cv} control variates, allocation {alloc.num_cv}"
        )


def ocv_solve(moments: MomentSpec, use_first_k: int) -> WeightsResult:
    """Known-mean control variates using the first ``k`` models (N = 1 units).

    Raises:
        SingularCovarianceError: when the leading ``k x k`` block of C is singular.
    """
    m = moments.num_cv
    if not 1 <= use_first_k <= m:
        raise ValueError(f"use_first_k must lie in [1, {m}], got {use_first_k}")
    k = use_first_k
    cmat = moments.cov_matrix[:k, :k]
    c = moments.cov_vector[:k]
    fac = _cholesky(cmat, f"C[:{k}, :{k}]")
    alpha = -cho_solve(fac, c)
    r2 = _checked_r2(float(-alpha @ c) / moments.var_q)
    return _result(alpha, r2, moments, 1.0)


def acv_solve(structure: EstimatorStructure, moments: MomentSpec) -> WeightsResult:
    """Optimal weights ``-Cov(Delta,Delta)^{-1} Cov(Delta,Qbar)`` and the resulting R^2."""
    d = np.asarray(structure.delta_q_cov, dtype=float)
    if d.size == 0:
        return _result(np.zeros(0), 0.0, moments, structure.n)
    fac = _cholesky(np.asarray(structure.delta_cov, dtype=float), "Cov(Delta, Delta)")
    alpha = -cho_solve(fac, d)
    raw = float(-alpha @ d) * structure.n / moments.var_q
    return _result(alpha, _checked_r2(raw), moments, structure.n)


def fixed_weights_result(
    structure: EstimatorStructure, moments: MomentSpec, alpha: Sequence[float]
) -> WeightsResult:
    """Variance of the estimator for arbitrary (non-optimal) weights.

    The returned ``r_squared`` is ``1 - gamma`` and may be negative.
    """
    alpha = np.asarray(alpha, dtype=float)
    quad = alpha @ structure.delta_cov @ alpha + 2.0 * alpha @ structure.delta_q_cov
    r2 = -float(quad) * structure.n / moments.var_q
    return _result(alpha, r2, moments, structure.n)


def f_structure(moments: MomentSpec, alloc: Allocation, f_matrix: np.ndarray) -> EstimatorStructure:
    """Assemble ``(C o F)/N`` and ``(diag(F) o c)/N``."""
    _check_arity(moments, alloc)
    f = np.asarray(f_matrix, dtype=float)
    n = alloc.n
    return EstimatorStructure(
        delta_cov=(moments.cov_matrix * f) / n,
        delta_q_cov=(np.diag(f) * moments.cov_vector) / n,
        n=n,
        f_matrix=f,
    )


# --- MFMC -------------------------------------------------------------------


def _mfmc_f(r: np.ndarray) -> np.ndarray:
    prev = np.concatenate(([1.0], r[:-1]))
    return np.diag(1.0 / prev - 1.0 / r)


def _check_mfmc(r: np.ndarray, strict: bool):
    prev = np.concatenate(([1.0], r[:-1]))
    bad = np.flatnonzero(r <= prev) if strict else np.flatnonzero(r < prev)
    if bad.size:
        op = ">" if strict else ">="
        raise LayoutError(
            f"MFMC needs r_i {op} r_(i-1) (r_0 = 1); violated for i={[int(i) + 1 for i in bad]}"
        )


def mfmc_structure(moments: MomentSpec, alloc: Allocation) -> EstimatorStructure:
    """Nested sets: diagonal ``Cov(Delta, Delta)`` with ``(1/r_{i-1} - 1/r_i) C_ii / N``."""
    _check_arity(moments, alloc)
    r = alloc.r
    _check_mfmc(r, strict=True)
    return f_structure(moments, alloc, _mfmc_f(r))


def mfmc_solve(moments: MomentSpec, alloc: Allocation) -> WeightsResult:
    """Closed-form MFMC weights ``-c_i / C_ii`` and R^2.

    Equal consecutive ratios are allowed here (their term simply vanishes).
    """
    _check_arity(moments, alloc)
    r = alloc.r
    _check_mfmc(r, strict=False)
    prev = np.concatenate(([1.0], r[:-1]))
    alpha = -moments.cov_vector / np.diag(moments.cov_matrix)
    r2 = float(np.sum((1.0 / prev - 1.0 / r) * moments.rho**2))
    return _result(alpha, _checked_r2(r2), moments, alloc.n)


# --- recursive difference ---------------------------------------------------


def _wrdiff_scaled(cmat: np.ndarray, c: np.ndarray, eta: np.ndarray):
    """``N Cov(Delta, Delta)`` and ``N Cov(Delta, Qbar)`` for partition sizes eta."""
    m = eta.size
    prev = np.concatenate(([1.0], eta[:-1]))
    dmat = np.diag(np.diag(cmat) * (1.0 / prev + 1.0 / eta))
    idx = np.arange(m - 1)
    off = -cmat[idx, idx + 1] / eta[:-1]
    dmat[idx, idx + 1] = off
    dmat[idx + 1, idx] = off
    dvec = np.zeros(m)
    if m:
        dvec[0] = c[0]
    return dmat, dvec


def _wrdiff_eta(alloc: Allocation) -> np.ndarray:
    eta = alloc.eta()
    bad = np.flatnonzero(eta * alloc.n < 1.0 - 1e-9)
    if bad.size:
        raise LayoutError(
            "recursive difference needs every partition |S_i^2| >= 1; "
            f"violated for i={[int(i) + 1 for i in bad]} (eta={eta.tolist()})"
        )
    return eta


def wrdiff_structure(moments: MomentSpec, alloc: Allocation) -> EstimatorStructure:
    """Disjoint partitions: tridiagonal ``Cov(Delta, Delta)``.

    Diagonal ``C_ii (1/|S_{i-1}^2| + 1/|S_i^2|)``, off-diagonal
    ``-C_{i,i+1} / |S_i^2|``; only ``Delta_1`` correlates with ``Qbar``.
    """
    _check_arity(moments, alloc)
    eta = _wrdiff_eta(alloc)
    dmat, dvec = _wrdiff_scaled(moments.cov_matrix, moments.cov_vector, eta)
    return EstimatorStructure(dmat / alloc.n, dvec / alloc.n, alloc.n)


def wrdiff_solve(moments: MomentSpec, alloc: Allocation) -> WeightsResult:
    return acv_solve(wrdiff_structure(moments, alloc), moments)


def rdiff_r2(moments: MomentSpec, alloc: Allocation) -> WeightsResult:
    """Recursive difference with every weight fixed to -1; gamma may exceed 1."""
    structure = wrdiff_structure(moments, alloc)
    return fixed_weights_result(structure, moments, -np.ones(alloc.num_cv))


# --- F matrices -------------------------------------------------------------


def _require_above_one(r: np.ndarray, what: str):
    bad = np.flatnonzero(r <= 1.0)
    if bad.size:
        raise LayoutError(f"{what} needs r_i > 1; violated for i={[int(i) + 1 for i in bad]}")


def _f_is(r: np.ndarray) -> np.ndarray:
    g = 1.0 - 1.0 / r
    f = np.outer(g, g)
    np.fill_diagonal(f, g)
    return f


def _f_mf(r: np.ndarray) -> np.ndarray:
    return 1.0 - 1.0 / np.minimum.outer(r, r)


def _f_kl(r: np.ndarray, k: int, l: int) -> np.ndarray:
    inner = np.arange(r.size) < k
    both_in = np.logical_and.outer(inner, inner)
    both_out = np.logical_and.outer(~inner, ~inner)
    m = np.minimum.outer(r, r)
    rl = r[l - 1]
    tail = 1.0 / rl - 1.0 / m
    return np.where(both_in, 1.0 - 1.0 / m, np.where(both_out, tail, np.maximum(0.0, tail)))


def kl_violations(r: np.ndarray, k: int, l: int) -> list[str]:
    """Every reason ``(K, L)`` is inadmissible for ratios ``r`` (empty if admissible)."""
    out = []
    m = r.size
    if not 1 <= l <= k <= m:
        return [f"1 <= L <= K <= M violated by (K, L)=({k}, {l}), M={m}"]
    low = [i + 1 for i in range(m) if not r[i] > 1.0]
    if low:
        out.append(f"r_i > 1 violated for i={low}")
    below = [i + 1 for i in range(l, m) if not r[i] > r[l - 1]]
    if below:
        out.append(f"r_i > r_L (L={l}) violated for i={below}")
    return out


def f_is(alloc: Allocation) -> np.ndarray:
    """F for independent tails: ``1 - 1/r_i`` on the diagonal, product of those off it."""
    r = alloc.r
    _require_above_one(r, "ACV-IS")
    return _f_is(r)


def f_mf(alloc: Allocation) -> np.ndarray:
    """F for prefix-shared tails: ``1 - 1/min(r_i, r_j)``."""
    r = alloc.r
    _require_above_one(r, "ACV-MF")
    return _f_mf(r)


def f_kl(alloc: Allocation) -> np.ndarray:
    """F for the two-group scheme selected by ``alloc.kl``.

    With ``m = min(r_i, r_j)``: ``1 - 1/m`` when both ``i, j <= K``,
    ``1/r_L - 1/m`` when both exceed K, and ``max(0, 1/r_L - 1/m)`` across
    the groups. The diagonal follows from ``m = r_i``.
    """
    if alloc.kl is None:
        raise LayoutError("ACV-KL needs (K, L) on the allocation")
    k, l = alloc.kl
    problems = kl_violations(alloc.r, k, l)
    if problems:
        raise LayoutError(f"(K, L)=({k}, {l}) inadmissible: " + "; ".join(problems))
    return _f_kl(alloc.r, k, l)


def kl_pairs(m: int) -> Iterator[tuple[int, int]]:
    """All ``(K, L)`` with ``1 <= L <= K <= m``, ordered by K then L."""
    for k in range(1, m + 1):
        for l in range(1, k + 1):
            yield k, l


def kl_search(moments: MomentSpec, alloc: Allocation) -> tuple[int, int, WeightsResult]:
    """Scan every admissible ``(K, L)`` and keep the smallest variance.

    Ties go to the smallest K, then the smallest L.

    Raises:
        LayoutError: if no pair is admissible for ``alloc.ratios``.
    """
    _check_arity(moments, alloc)
    r = alloc.r
    best = None
    for k, l in kl_pairs(r.size):
        if kl_violations(r, k, l):
            continue
        res = acv_solve(f_structure(moments, alloc, _f_kl(r, k, l)), moments)
        if best is None or res.variance < best[2].variance:
            best = (k, l, res)
    if best is None:
        raise LayoutError(f"no admissible (K, L) for ratios {r.tolist()}")
    return best


# --- dispatch ---------------------------------------------------------------


def structure(scheme: Scheme, moments: MomentSpec, alloc: Allocation) -> EstimatorStructure:
    """Covariance structure of any scheme with control variates."""
    scheme = Scheme(scheme)
    if scheme is Scheme.MFMC:
        return mfmc_structure(moments, alloc)
    if scheme in (Scheme.WRDIFF, Scheme.RDIFF):
        return wrdiff_structure(moments, alloc)
    if scheme is Scheme.ACV_IS:
        return f_structure(moments, alloc, f_is(alloc))
    if scheme is Scheme.ACV_MF:
        return f_structure(moments, alloc, f_mf(alloc))
    if scheme is Scheme.ACV_KL:
        return f_structure(moments, alloc, f_kl(alloc))
    raise ValueError(f"{scheme.value} has no control-variate structure")


def solve(scheme: Scheme, moments: MomentSpec, alloc: Allocation) -> WeightsResult:
    """Weights and variance for ``scheme``; ACV-KL without ``kl`` runs the search."""
    scheme = Scheme(scheme)
    if scheme is Scheme.MC:
        return _result(np.zeros(0), 0.0, moments, alloc.n)
    if scheme is Scheme.MFMC:
        return mfmc_solve(moments, alloc)
    if scheme is Scheme.RDIFF:
        return rdiff_r2(moments, alloc)
    if scheme is Scheme.ACV_KL and alloc.kl is None:
        return kl_search(moments, alloc)[2]
    return acv_solve(structure(scheme, moments, alloc), moments)


# --- derivatives with respect to the ratios ---------------------------------


def _jac_is(r: np.ndarray) -> tuple[np.ndarray, bool]:
    m = r.size
    g = 1.0 - 1.0 / r
    gp = 1.0 / r**2
    jac = np.zeros((m, m, m))
    for k in range(m):
        jac[k, k, :] += gp[k] * g
        jac[k, :, k] += gp[k] * g
        jac[k, k, k] = gp[k]
    return jac, False


def _jac_kl(r: np.ndarray, k: int, l: int) -> tuple[np.ndarray, bool]:
    m = r.size
    idx = np.arange(m)
    ii, jj = np.meshgrid(idx, idx, indexing="ij")
    argmin = np.where(r[ii] <= r[jj], ii, jj)
    mins = r[argmin]
    inner = idx < k
    both_in = inner[ii] & inner[jj]
    both_out = ~inner[ii] & ~inner[jj]
    cross = ~both_in & ~both_out
    rl = r[l - 1]
    tail = 1.0 / rl - 1.0 / mins
    # cross entries with m = r_L are identically zero, not a kink
    cross_zero = cross & ((tail < 0.0) | (argmin == l - 1))
    kink = bool(np.any((ii != jj) & (r[ii] == r[jj])))
    kink |= bool(np.any(cross & (tail == 0.0) & (argmin != l - 1)))
    jac = np.zeros((m, m, m))
    for q in range(m):
        dmin = (argmin == q) / mins**2
        d_l = (1.0 / rl**2) if q == l - 1 else 0.0
        jac[q] = np.where(both_in, dmin, dmin - d_l)
        jac[q][cross_zero] = 0.0
    return jac, kink


def _jac_mfmc(r: np.ndarray) -> tuple[np.ndarray, bool]:
    m = r.size
    jac = np.zeros((m, m, m))
    for i in range(m):
        jac[i, i, i] = 1.0 / r[i] ** 2
        if i + 1 < m:
            jac[i, i + 1, i + 1] = -1.0 / r[i] ** 2
    return jac, False


@dataclass(frozen=True)
class R2Derivative:
    r_squared: float
    gradient: np.ndarray
    nondifferentiable: bool


def r2_with_gradient(
    scheme: Scheme,
    moments: MomentSpec,
    ratios: Sequence[float],
    kl: tuple[int, int] | None = None,
) -> R2Derivative:
    """R^2 and its gradient with respect to the ratios (continuous relaxation).

    Admissibility is not rechecked; callers keep the point strictly inside the
    scheme's feasible region. At ties inside ``min(r_i, r_j)`` a one-sided
    derivative is returned and ``nondifferentiable`` is set.
    """
    scheme = Scheme(scheme)
    r = np.asarray(ratios, dtype=float)
    var_q = moments.var_q
    cmat, c = moments.cov_matrix, moments.cov_vector
    if scheme is Scheme.MC or r.size == 0:
        return R2Derivative(0.0, np.zeros(r.size), False)

    if scheme in (Scheme.WRDIFF, Scheme.RDIFF):
        eta = Allocation(1.0, tuple(r)).eta()
        dmat, dvec = _wrdiff_scaled(cmat, c, eta)
        if scheme is Scheme.RDIFF:
            x = -np.ones(r.size)
            r2 = -(x @ dmat @ x + 2.0 * x @ dvec) / var_q
        else:
            x = np.linalg.solve(dmat, dvec)
            r2 = float(dvec @ x) / var_q
        # dR2/deta_q = -x^T (d dmat / d eta_q) x / Var(Q); same form for both weightings
        m = r.size
        diag = np.diag(cmat)
        geta = np.empty(m)
        for q in range(m):
            s = -diag[q] * x[q] ** 2
            if q + 1 < m:
                s += -diag[q + 1] * x[q + 1] ** 2 + 2.0 * cmat[q, q + 1] * x[q] * x[q + 1]
            geta[q] = -(s / eta[q] ** 2) / var_q
        # eta_q depends on r_p (p <= q) with sign (-1)^(q-p)
        grad = np.array([sum(geta[q] * (-1.0) ** (q - p) for q in range(p, m)) for p in range(m)])
        return R2Derivative(float(r2), grad, False)

    if scheme is Scheme.MFMC:
        f = _mfmc_f(r)
        jac, kink = _jac_mfmc(r)
    elif scheme is Scheme.ACV_IS:
        f = _f_is(r)
        jac, kink = _jac_is(r)
    elif scheme is Scheme.ACV_MF:
        f = _f_mf(r)
        jac, kink = _jac_kl(r, r.size, r.size)
    elif scheme is Scheme.ACV_KL:
        if kl is None:
            raise ValueError("ACV-KL gradient needs (K, L)")
        f = _f_kl(r, *kl)
        jac, kink = _jac_kl(r, *kl)
    else:
        raise ValueError(f"unsupported scheme {scheme}")
    g = cmat * f
    a = np.diag(f) * c
    x = np.linalg.solve(g, a)
    r2 = float(a @ x) / var_q
    diag_jac = np.einsum("kii->ki", jac)
    grad = (2.0 * (diag_jac * c) @ x - np.einsum("i,kij,j->k", x, jac * cmat, x)) / var_q
    return R2Derivative(r2, grad, kink)
