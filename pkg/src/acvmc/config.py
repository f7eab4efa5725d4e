"""Run configuration for the command-line front end.

Configurations are JSON documents validated by the pydantic models below;
``schema/run_config.schema.json`` is generated from :class:`RunConfig`.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .ensemble import ModelEnsemble, MomentSpec, monomial_ensemble, tunable_ensemble
from .theory import Scheme

STUDIES = ("curves", "allocate", "empirical", "pilot", "gap", "moments")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MonomialProblem(_Strict):
    """``Q = w^degree_high``, ``Q_i = w^(degree_high - i)`` with ``w ~ U(0, 1)``."""

    kind: Literal["monomial"] = "monomial"
    degree_high: int = Field(5, ge=2)
    num_cv: int = Field(4, ge=1)
    costs: Optional[list[float]] = Field(
        None, description="(w, w_1, ..., w_M); defaults to w_i = 10^-i"
    )

    @model_validator(mode="after")
    def _check(self):
        if self.num_cv >= self.degree_high:
            raise ValueError("num_cv must be below degree_high")
        if self.costs is not None and len(self.costs) != self.num_cv + 1:
            raise ValueError(f"costs needs {self.num_cv + 1} entries")
        return self

    def resolved_costs(self) -> list[float]:
        if self.costs is not None:
            return list(self.costs)
        return [10.0 ** (-i) for i in range(self.num_cv + 1)]


class TunableProblem(_Strict):
    """Three unit-variance models; cost ratio ``w`` gives costs ``(1, 1/w, 1/w^2)``."""

    kind: Literal["tunable"] = "tunable"
    theta: float = math.pi / 2
    theta1: float = 1.2
    theta2: float = math.pi / 6
    w: float = Field(10.0, gt=0)
    theta1_grid: Optional[list[float]] = Field(
        None, description="theta1 values scanned by allocate (defaults to [theta1])"
    )

    @model_validator(mode="after")
    def _check(self):
        for t in [self.theta1] + list(self.theta1_grid or []):
            if not self.theta2 < t < self.theta:
                raise ValueError(f"theta1={t} must lie strictly between theta2 and theta")
        return self

    def resolved_costs(self) -> list[float]:
        return [1.0, 1.0 / self.w, 1.0 / self.w**2]


class MomentsModel(_Strict):
    var_q: float = Field(gt=0)
    cov_matrix: list[list[float]]
    cov_vector: list[float]
    mean_q: float = 0.0
    means: Optional[list[float]] = None


class ExternalProblem(_Strict):
    """User-supplied moments (inline or from a JSON file) and costs; no evaluators."""

    kind: Literal["external"] = "external"
    costs: list[float]
    moments: Optional[MomentsModel] = None
    moments_file: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if (self.moments is None) == (self.moments_file is None):
            raise ValueError("give exactly one of moments or moments_file")
        if self.moments_file is not None and not Path(self.moments_file).is_file():
            raise ValueError(f"moments_file {self.moments_file!r} does not exist")
        return self

    def resolved_costs(self) -> list[float]:
        return list(self.costs)


Problem = Annotated[
    Union[MonomialProblem, TunableProblem, ExternalProblem], Field(discriminator="kind")
]


class FixedAllocation(_Strict):
    mode: Literal["fixed"] = "fixed"
    n: int = Field(ge=1)
    ratios: list[float]
    kl: Optional[tuple[int, int]] = None


class OptimizeAllocation(_Strict):
    mode: Literal["optimize"] = "optimize"
    budget: float = Field(gt=0)
    monotone_ratios: Optional[bool] = None
    n_starts: int = Field(8, ge=8)


Allocation = Annotated[Union[FixedAllocation, OptimizeAllocation], Field(discriminator="mode")]


class RunConfig(_Strict):
    """One CLI invocation.

    Only the fields of the selected study are used; the rest keep defaults.
    """

    problem: Problem = Field(default_factory=MonomialProblem)
    estimators: list[Scheme] = Field(
        default_factory=lambda: [
            Scheme.MFMC,
            Scheme.WRDIFF,
            Scheme.ACV_IS,
            Scheme.ACV_MF,
            Scheme.ACV_KL,
        ]
    )
    allocation: Allocation = Field(default_factory=lambda: OptimizeAllocation(budget=100.0))
    study: Optional[Literal["curves", "allocate", "empirical", "pilot", "gap", "moments"]] = None
    seed: int = Field(0, ge=0, lt=2**64)
    threads: int = Field(1, ge=1)
    output: Optional[str] = None
    x_grid: list[int] = Field(default_factory=lambda: list(range(30)))
    n_rep: int = Field(100_000, ge=2)
    n_pilot: int = Field(20, ge=2)
    n_samples: int = Field(100_000, ge=2, description="points for empirical moments")
    gap_points: int = Field(50, ge=1)

    @field_validator("x_grid")
    @classmethod
    def _sorted(cls, v):
        if not v or v != sorted(v):
            raise ValueError("x_grid must be nonempty and sorted")
        return v

    def costs(self) -> list[float]:
        return self.problem.resolved_costs()

    def moments(self, theta1: float | None = None) -> MomentSpec:
        p = self.problem
        if isinstance(p, ExternalProblem):
            data = p.moments.model_dump() if p.moments else json.loads(Path(p.moments_file).read_text())
            return MomentSpec.from_dict({**data, "costs": p.costs})
        ens = self.ensemble(theta1)
        return ens.moments

    def ensemble(self, theta1: float | None = None) -> ModelEnsemble:
        p = self.problem
        if isinstance(p, MonomialProblem):
            ens = monomial_ensemble(p.degree_high, p.num_cv)
        elif isinstance(p, TunableProblem):
            ens = tunable_ensemble(p.theta, p.theta1 if theta1 is None else theta1, p.theta2)
        else:
            raise ValueError("an external problem has moments but no model evaluators")
        return ens.with_costs(p.resolved_costs())


def load_config(path: str | Path) -> RunConfig:
    return RunConfig.model_validate_json(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    return cfg.model_dump_json(indent=2) + "\n"


def json_schema() -> dict:
    return RunConfig.model_json_schema()
