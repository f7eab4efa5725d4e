"""Model ensembles, their moments and the two analytic benchmark problems.

Every ensemble maps a point drawn from a product of bounded uniform laws to
one scalar output per model. Model 0 is the high-fidelity quantity of
interest; models 1..M are the control variates. Evaluators are vectorized:
they take an ``(n, input_dim)`` array and return ``n`` outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateModelError, InconsistentMomentsError

Evaluator = Callable[[np.ndarray], np.ndarray]

_PSD_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class MomentSpec:
    """Second-order statistics of an ensemble; enough to evaluate every formula.

    Attributes:
        var_q: variance of the high-fidelity output.
        cov_matrix: ``(M, M)`` covariance among the control variates.
        cov_vector: ``(M,)`` covariances between Q and each control variate.
        mean_q: mean of Q (only used to check unbiasedness).
        means: ``(M,)`` means of the control variates.
        costs: ``(M + 1,)`` cost per evaluation, high fidelity first.
    """

    var_q: float
    cov_matrix: np.ndarray
    cov_vector: np.ndarray
    mean_q: float = 0.0
    means: np.ndarray | None = None
    costs: np.ndarray | None = None

    def __post_init__(self):
        cm = np.atleast_2d(np.asarray(self.cov_matrix, dtype=float))
        cv = np.atleast_1d(np.asarray(self.cov_vector, dtype=float))
        m = cv.shape[0]
        if cm.shape != (m, m):
            raise InconsistentMomentsError(
                f"cov_matrix has shape {cm.shape}, expected ({m}, {m})"
            )
        means = np.zeros(m) if self.means is None else np.asarray(self.means, dtype=float)
        costs = np.ones(m + 1) if self.costs is None else np.asarray(self.costs, dtype=float)
        if means.shape != (m,):
            raise InconsistentMomentsError(f"means must have length {m}")
        if costs.shape != (m + 1,):
            raise InconsistentMomentsError(f"costs must have length {m + 1}")
        object.__setattr__(self, "var_q", float(self.var_q))
        object.__setattr__(self, "mean_q", float(self.mean_q))
        object.__setattr__(self, "cov_matrix", cm)
        object.__setattr__(self, "cov_vector", cv)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "costs", costs)
        for arr in (cm, cv, means, costs):
            arr.setflags(write=False)
        self._validate()

    def _validate(self):
        if not np.isfinite(self.var_q) or self.var_q <= 0.0:
            raise DegenerateModelError(f"Var[Q] must be positive, got {self.var_q}")
        diag = np.diag(self.cov_matrix)
        bad = np.flatnonzero(~(diag > 0.0) | ~np.isfinite(diag))
        if bad.size:
            raise DegenerateModelError(
                f"control variates {[int(i) + 1 for i in bad]} have zero variance"
            )
        if not np.all(np.isfinite(self.cov_matrix)) or not np.all(np.isfinite(self.cov_vector)):
            raise InconsistentMomentsError("moments contain non-finite entries")
        scale = max(1.0, float(np.max(np.abs(self.cov_matrix))))
        if not np.allclose(self.cov_matrix, self.cov_matrix.T, rtol=0.0, atol=1e-12 * scale):
            raise InconsistentMomentsError("cov_matrix is not symmetric")
        if np.any(self.costs <= 0.0):
            raise InconsistentMomentsError("model costs must be positive")
        bound = np.sqrt(self.var_q * diag) * (1.0 + 1e-10)
        viol = np.flatnonzero(np.abs(self.cov_vector) > bound)
        if viol.size:
            raise InconsistentMomentsError(
                f"|Cov(Q, Q_i)| exceeds sqrt(Var Q Var Q_i) for i={[int(i) + 1 for i in viol]}"
            )
        joint = self.joint_cov()
        d = np.sqrt(np.diag(joint))
        eig = np.linalg.eigvalsh(joint / np.outer(d, d))
        if eig[0] < -_PSD_TOL * (1 + len(d)):
            raise InconsistentMomentsError(
                f"joint covariance is not positive semidefinite (min eigenvalue {eig[0]:.3e})"
            )

    @property
    def num_cv(self) -> int:
        return int(self.cov_vector.shape[0])

    @property
    def std_q(self) -> float:
        return math.sqrt(self.var_q)

    @property
    def cv_std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_matrix))

    @property
    def rho(self) -> np.ndarray:
        """Correlation between Q and each control variate."""
        return self.cov_vector / (self.std_q * self.cv_std)

    @property
    def tau(self) -> np.ndarray:
        """Standard-deviation ratios sigma_i / sigma_Q."""
        return self.cv_std / self.std_q

    @property
    def c_bar(self) -> np.ndarray:
        return self.cov_vector / self.std_q

    def joint_cov(self) -> np.ndarray:
        """Covariance of (Q, Q_1, ..., Q_M)."""
        m = self.num_cv
        out = np.empty((m + 1, m + 1))
        out[0, 0] = self.var_q
        out[0, 1:] = out[1:, 0] = self.cov_vector
        out[1:, 1:] = self.cov_matrix
        return out

    def corr_matrix(self) -> np.ndarray:
        """Correlation matrix of (Q, Q_1, ..., Q_M)."""
        joint = self.joint_cov()
        d = np.sqrt(np.diag(joint))
        out = joint / np.outer(d, d)
        np.fill_diagonal(out, 1.0)
        return out

    def subset(self, k: int) -> "MomentSpec":
        """Moments restricted to the first ``k`` control variates."""
        return MomentSpec(
            var_q=self.var_q,
            cov_matrix=self.cov_matrix[:k, :k],
            cov_vector=self.cov_vector[:k],
            mean_q=self.mean_q,
            means=self.means[:k],
            costs=self.costs[: k + 1],
        )

    def with_costs(self, costs: Sequence[float]) -> "MomentSpec":
        return MomentSpec(
            var_q=self.var_q,
            cov_matrix=self.cov_matrix,
            cov_vector=self.cov_vector,
            mean_q=self.mean_q,
            means=self.means,
            costs=np.asarray(costs, dtype=float),
        )

    def scaled(self, factor: float) -> "MomentSpec":
        """Multiply every second moment by ``factor``."""
        return MomentSpec(
            var_q=self.var_q * factor,
            cov_matrix=self.cov_matrix * factor,
            cov_vector=self.cov_vector * factor,
            mean_q=self.mean_q,
            means=self.means,
            costs=self.costs,
        )

    @classmethod
    def from_joint(
        cls,
        joint_cov: np.ndarray,
        means: Sequence[float] | None = None,
        costs: Sequence[float] | None = None,
    ) -> "MomentSpec":
        joint = np.asarray(joint_cov, dtype=float)
        mu = np.zeros(joint.shape[0]) if means is None else np.asarray(means, dtype=float)
        return cls(
            var_q=joint[0, 0],
            cov_matrix=joint[1:, 1:],
            cov_vector=joint[0, 1:],
            mean_q=mu[0],
            means=mu[1:],
            costs=costs,
        )

    def to_dict(self) -> dict:
        return {
            "var_q": self.var_q,
            "cov_matrix": self.cov_matrix.tolist(),
            "cov_vector": self.cov_vector.tolist(),
            "mean_q": self.mean_q,
            "means": self.means.tolist(),
            "costs": self.costs.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MomentSpec":
        return cls(
            var_q=data["var_q"],
            cov_matrix=data["cov_matrix"],
            cov_vector=data["cov_vector"],
            mean_q=data.get("mean_q", 0.0),
            means=data.get("means"),
            costs=data.get("costs"),
        )


@dataclass(frozen=True)
class ModelSpec:
    id: int
    cost: float
    evaluator: Evaluator

    def __post_init__(self):
        if not self.cost > 0.0:
            raise ValueError(f"model {self.id}: cost must be positive, got {self.cost}")


@dataclass(frozen=True, eq=False)
class ModelEnsemble:
    """High-fidelity model plus ``M`` control variates over a uniform box.

    Attributes:
        models: ``M + 1`` model specs; ``models[0]`` is the quantity of interest.
        input_dim: length of each input point.
        bounds: ``(input_dim, 2)`` lower/upper bounds of the independent uniforms.
        moments: exact moments when known in closed form.
    """

    models: tuple[ModelSpec, ...]
    input_dim: int
    bounds: np.ndarray
    moments: MomentSpec | None = None
    name: str = "custom"

    def __post_init__(self):
        models = tuple(self.models)
        if len(models) < 1:
            raise ValueError("an ensemble needs at least the high-fidelity model")
        for i, m in enumerate(models):
            if m.id != i:
                raise ValueError(f"model at position {i} has id {m.id}")
        bounds = np.asarray(self.bounds, dtype=float).reshape(self.input_dim, 2)
        if np.any(~np.isfinite(bounds)) or np.any(bounds[:, 1] <= bounds[:, 0]):
            raise ValueError("uniform bounds must be finite with lower < upper")
        object.__setattr__(self, "models", models)
        object.__setattr__(self, "bounds", bounds)

    @property
    def num_cv(self) -> int:
        return len(self.models) - 1

    @property
    def costs(self) -> np.ndarray:
        return np.array([m.cost for m in self.models])

    def with_costs(self, costs: Sequence[float]) -> "ModelEnsemble":
        costs = list(costs)
        if len(costs) != len(self.models):
            raise ValueError(f"expected {len(self.models)} costs, got {len(costs)}")
        models = tuple(
            ModelSpec(m.id, float(c), m.evaluator) for m, c in zip(self.models, costs)
        )
        moments = None if self.moments is None else self.moments.with_costs(costs)
        return ModelEnsemble(models, self.input_dim, self.bounds, moments, self.name)

    def sample(self, rng: np.random.Generator, shape: int | tuple[int, ...]) -> np.ndarray:
        """Draw input points with trailing dimension ``input_dim``."""
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        u = rng.random(shape + (self.input_dim,))
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return lo + (hi - lo) * u

    def evaluate(self, i: int, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        flat = pts.reshape(-1, self.input_dim)
        out = np.asarray(self.models[i].evaluator(flat), dtype=float)
        return out.reshape(pts.shape[:-1])

    def evaluate_all(self, points: np.ndarray) -> np.ndarray:
        """Values of every model at every point, shape ``(..., M + 1)``."""
        return np.stack([self.evaluate(i, points) for i in range(len(self.models))], axis=-1)


class _Monomial:
    def __init__(self, power: int):
        self.power = power

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x[:, 0] ** self.power

    def __repr__(self):
        return f"w**{self.power}"


class _TunableTerm:
    def __init__(self, amplitude: float, angle: float, power: int):
        self.amplitude = amplitude
        self.cos = math.cos(angle)
        self.sin = math.sin(angle)
        self.power = power

    def __call__(self, x: np.ndarray) -> np.ndarray:
        p = self.power
        return self.amplitude * (self.cos * x[:, 0] ** p + self.sin * x[:, 1] ** p)


def monomial_ensemble(degree_high: int, num_cv: int) -> ModelEnsemble:
    """Q = w**degree_high and Q_i = w**(degree_high - i), with w ~ U(0, 1).

    Costs are placeholders equal to 1; use :meth:`ModelEnsemble.with_costs`.
    """
    _check_monomial(degree_high, num_cv)
    models = tuple(
        ModelSpec(i, 1.0, _Monomial(degree_high - i)) for i in range(num_cv + 1)
    )
    return ModelEnsemble(
        models,
        input_dim=1,
        bounds=np.array([[0.0, 1.0]]),
        moments=monomial_moments(degree_high, num_cv),
        name=f"monomial({degree_high},{num_cv})",
    )


def _check_monomial(degree_high: int, num_cv: int):
    if int(degree_high) != degree_high or int(num_cv) != num_cv:
        raise ValueError("degree_high and num_cv must be integers")
    if degree_high < 1 or num_cv < 1:
        raise ValueError("degree_high and num_cv must be at least 1")
    if num_cv >= degree_high:
        raise ValueError(
            f"num_cv={num_cv} >= degree_high={degree_high} would include a constant model"
        )


def monomial_moments(degree_high: int, num_cv: int) -> MomentSpec:
    """Exact moments from E[w^a] = 1/(a+1) for w ~ U(0, 1)."""
    _check_monomial(degree_high, num_cv)
    powers = np.array([degree_high - i for i in range(num_cv + 1)], dtype=float)
    a, b = np.meshgrid(powers, powers, indexing="ij")
    joint = 1.0 / (a + b + 1.0) - 1.0 / ((a + 1.0) * (b + 1.0))
    return MomentSpec.from_joint(joint, means=1.0 / (powers + 1.0))


TUNABLE_AMPLITUDES = (math.sqrt(11.0), math.sqrt(7.0), math.sqrt(3.0))


def _check_tunable(theta: float, theta1: float, theta2: float):
    if not theta2 < theta1 < theta:
        raise ValueError(
            f"theta1={theta1} must lie strictly between theta2={theta2} and theta={theta}"
        )


def tunable_ensemble(theta: float, theta1: float, theta2: float) -> ModelEnsemble:
    """Three unit-variance models over (x, y) ~ U(-1, 1)^2 with tunable correlations."""
    _check_tunable(theta, theta1, theta2)
    a, a1, a2 = TUNABLE_AMPLITUDES
    models = (
        ModelSpec(0, 1.0, _TunableTerm(a, theta, 5)),
        ModelSpec(1, 1.0, _TunableTerm(a1, theta1, 3)),
        ModelSpec(2, 1.0, _TunableTerm(a2, theta2, 1)),
    )
    return ModelEnsemble(
        models,
        input_dim=2,
        bounds=np.array([[-1.0, 1.0], [-1.0, 1.0]]),
        moments=tunable_moments(theta, theta1, theta2),
        name=f"tunable({theta:.6g},{theta1:.6g},{theta2:.6g})",
    )


def tunable_moments(theta: float, theta1: float, theta2: float) -> MomentSpec:
    _check_tunable(theta, theta1, theta2)
    a, a1, a2 = TUNABLE_AMPLITUDES
    # E[x^(p+q)] = 1/(p+q+1) for even p+q under U(-1, 1)
    c01 = a * a1 / 9.0 * math.cos(theta - theta1)
    c02 = a * a2 / 7.0 * math.cos(theta - theta2)
    c12 = a1 * a2 / 5.0 * math.cos(theta1 - theta2)
    joint = np.array(
        [
            [1.0, c01, c02],
            [c01, 1.0, c12],
            [c02, c12, 1.0],
        ]
    )
    return MomentSpec.from_joint(joint, means=np.zeros(3))


def moments_from_values(values: np.ndarray, costs: Sequence[float] | None = None) -> MomentSpec:
    """Sample moments of an ``(n, M + 1)`` array of shared-point evaluations."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples to estimate a covariance, got {n}")
    joint = np.atleast_2d(np.cov(values, rowvar=False, ddof=1))
    return MomentSpec.from_joint(joint, means=values.mean(axis=0), costs=costs)


def empirical_moments(
    ensemble: ModelEnsemble, n: int, seed: int | np.random.Generator | None = None
) -> MomentSpec:
    """Moments estimated from ``n`` shared input points (unbiased covariance).

    Raises:
        ValueError: if ``n < 2``.
        DegenerateModelError: if a model shows zero sample variance.
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples to estimate a covariance, got {n}")
    rng = np.random.default_rng(seed)
    points = ensemble.sample(rng, n)
    return moments_from_values(ensemble.evaluate_all(points), ensemble.costs)
