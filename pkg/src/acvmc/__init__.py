"""Approximate control-variate Monte Carlo estimators.

The subpackages build, in order: model ensembles and their moments
(:mod:`acvmc.ensemble`), closed-form weights and variance reductions
(:mod:`acvmc.theory`), concrete sampling layouts (:mod:`acvmc.schemes`),
budget-constrained allocation (:mod:`acvmc.allocate`), pilot-sample
estimation (:mod:`acvmc.pilot`) and replication studies (:mod:`acvmc.studies`).
"""

from __future__ import annotations

from .allocate import AllocationProblem, AllocationSolution, gradient_of_objective, optimize
from .ensemble import (
    ModelEnsemble,
    ModelSpec,
    MomentSpec,
    empirical_moments,
    monomial_ensemble,
    monomial_moments,
    tunable_ensemble,
    tunable_moments,
)
from .errors import (
    AcvError,
    ConvergenceError,
    DegenerateModelError,
    InconsistentMomentsError,
    InfeasibleBudgetError,
    LayoutError,
    SingularCovarianceError,
)
from .pilot import PilotPlan, two_step
from .schemes import EstimatorReport, SchemeLayout, audit_layout, build_layout, realize
from .theory import (
    Allocation,
    EstimatorStructure,
    Scheme,
    WeightsResult,
    acv_solve,
    f_is,
    f_kl,
    f_mf,
    kl_search,
    mfmc_solve,
    mfmc_structure,
    ocv_solve,
    rdiff_r2,
    solve,
    wrdiff_solve,
    wrdiff_structure,
)

__version__ = "0.1.0"
