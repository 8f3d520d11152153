"""Symmetry-family model fitting for r^T contingency tables.

Fits complete-symmetry, quasi-symmetry, f-divergence ordinal
quasi-symmetry, marginal-homogeneity, marginal-moment, and marginal
logistic models by constrained maximum likelihood, and computes the
associated goodness-of-fit, Wald, and partitioned test statistics.
"""

from .divergence import KL, PEARSON, FSpec, f_divergence, get_fspec, validate_fspec
from .inference import (
    NestingError,
    SingularityError,
    TestReport,
    chisq_sf,
    conditional_test,
    g_squared,
    wald_delta,
)
from .model_constraints import (
    ConstraintSystem,
    DesignMatrix,
    Orthocomplement,
    build_constraint,
    build_design,
    combine_constraints,
    constraint_me,
    constraint_mh,
    constraint_ml,
    constraint_oqsf,
    constraint_qs,
    constraint_s,
    degrees_of_freedom,
    orthocomplement,
)
from .solver import (
    FitResult,
    MlParams,
    OqsfParams,
    SolverConfig,
    fit,
    fit_loglinear_kl,
    recover_params,
)
from .tensor_table import (
    DomainError,
    Orbit,
    ProbVector,
    ScoreVector,
    Table,
    cell_of_index,
    conditional_orbit_prob,
    enumerate_orbits,
    equal_interval_scores,
    linear_index,
    marginal_dist,
    marginal_moment,
    orbit_index,
    orbit_of,
    symmetrize,
)

__version__ = "0.1.0"

__all__ = [
    "KL",
    "PEARSON",
    "FSpec",
    "f_divergence",
    "get_fspec",
    "validate_fspec",
    "NestingError",
    "SingularityError",
    "TestReport",
    "chisq_sf",
    "conditional_test",
    "g_squared",
    "wald_delta",
    "ConstraintSystem",
    "DesignMatrix",
    "Orthocomplement",
    "build_constraint",
    "build_design",
    "combine_constraints",
    "constraint_me",
    "constraint_mh",
    "constraint_ml",
    "constraint_oqsf",
    "constraint_qs",
    "constraint_s",
    "degrees_of_freedom",
    "orthocomplement",
    "FitResult",
    "MlParams",
    "OqsfParams",
    "SolverConfig",
    "fit",
    "fit_loglinear_kl",
    "recover_params",
    "DomainError",
    "Orbit",
    "ProbVector",
    "ScoreVector",
    "Table",
    "cell_of_index",
    "conditional_orbit_prob",
    "enumerate_orbits",
    "equal_interval_scores",
    "linear_index",
    "marginal_dist",
    "marginal_moment",
    "orbit_index",
    "orbit_of",
    "symmetrize",
]
