"""Symmetry-family models as differentiable constraint systems h(pi) = 0.

Every model is represented by a :class:`ConstraintSystem`: a map ``h`` from
a probability vector to a residual vector, its analytic Jacobian, and the
metadata needed to decode fitted parameters.  The score-based models share
one design matrix ``X`` whose columns are the (T-1) score-difference
columns plus one indicator column per orbit; the generalized ordinal
quasi-symmetry constraint projects ``F(pi / pi^S)`` onto the orthogonal
complement of span(X).
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Callable

import numpy as np
from scipy.linalg import null_space

from .divergence import KL, FSpec, get_fspec
from .tensor_table import (
    DomainError,
    OrbitIndex,
    ScoreVector,
    equal_interval_scores,
    orbit_index,
)


def _coords(r: int, T: int) -> np.ndarray:
    """(r^T, T) array of 1-based cell coordinates in row-major order."""
    grids = np.meshgrid(*([np.arange(1, r + 1)] * T), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def score_columns(r: int, T: int, u: ScoreVector) -> np.ndarray:
    """(r^T, T-1) matrix with entries u_{i_t} - u_{i_T} for t = 1..T-1."""
    coords = _coords(r, T)
    uu = u.u
    last = uu[coords[:, -1] - 1]
    return np.stack([uu[coords[:, t] - 1] - last for t in range(T - 1)], axis=1)


@dataclass(frozen=True)
class DesignMatrix:
    """Design of the ordinal quasi-symmetry family.

    ``X`` stacks the score-difference columns (orthogonal to nothing in
    particular, but contained in span(X) by construction) and the
    orbit-indicator block whose rows each sum to one.
    """

    r: int
    T: int
    u: ScoreVector
    X: np.ndarray
    n_score_cols: int

    @property
    def K(self) -> int:
        return self.X.shape[1]


def build_design(r: int, T: int, u: ScoreVector | None = None) -> DesignMatrix:
    """Assemble X = [score columns | orbit indicators], full column rank K."""
    if u is None:
        u = equal_interval_scores(r)
    if u.r != r:
        raise ValueError("score length must equal r")
    oi = orbit_index(r, T)
    sym = np.zeros((oi.n_cells, oi.n_orbits))
    sym[np.arange(oi.n_cells), oi.orbit_id] = 1.0
    X = np.hstack([score_columns(r, T, u), sym])
    K = (T - 1) + comb(r + T - 1, T)
    if np.linalg.matrix_rank(X) != K:
        raise ValueError("design matrix is rank deficient; check the scores")
    return DesignMatrix(r=r, T=T, u=u, X=X, n_score_cols=T - 1)


@dataclass(frozen=True)
class Orthocomplement:
    """Orthonormal basis U of the orthogonal complement of span(X)."""

    U: np.ndarray

    @property
    def d1(self) -> int:
        return self.U.shape[1]


def orthocomplement(design: DesignMatrix) -> Orthocomplement:
    """U with r^T - K orthonormal columns spanning null(X^T).

    Computed by SVD with singular values below 1e-10 times the largest
    treated as zero.  U is not unique; downstream statistics must be (and
    are tested to be) invariant to the basis choice.
    """
    X = design.X
    U = null_space(X.T, rcond=1e-10)
    expected = X.shape[0] - design.K
    if U.shape[1] != expected:
        raise ValueError(
            f"orthocomplement has dimension {U.shape[1]}, expected {expected}"
        )
    return Orthocomplement(U=U)


@dataclass(frozen=True)
class OqsfRecovery:
    """How to decode (beta, psi) from a fitted OQS[f]-family solution."""

    spec: FSpec
    u: ScoreVector
    design: DesignMatrix


@dataclass(frozen=True)
class MlRecovery:
    """How to decode the cumulative-logit shifts delta from a fitted solution."""


@dataclass(frozen=True)
class ConstraintSystem:
    """One model as {pi : h(pi) = 0} with analytic Jacobian.

    ``h`` maps a strictly valid probability array (flat, length r^T) to a
    ``dim``-vector; ``jacobian`` returns the (dim, r^T) matrix of partial
    derivatives at the same point.  Instances are immutable and the
    callables are pure, so systems are safe to share across threads.
    """

    model: str
    r: int
    T: int
    dim: int
    h: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    recover: OqsfRecovery | MlRecovery | None = None

    @property
    def n_cells(self) -> int:
        return self.r**self.T


def constraint_s(r: int, T: int) -> ConstraintSystem:
    """Complete symmetry: every orbit member equals its representative.

    The explicit pairwise form is linear and exact, so both h and the
    Jacobian are a constant sparse-difference matrix.
    """
    oi = orbit_index(r, T)
    rows = []
    for members in oi.members:
        rep = members[0]
        for m in members[1:]:
            row = np.zeros(oi.n_cells)
            row[m] = 1.0
            row[rep] = -1.0
            rows.append(row)
    A = np.array(rows) if rows else np.zeros((0, oi.n_cells))
    return _linear_system("s", r, T, A)


def constraint_mh(r: int, T: int) -> ConstraintSystem:
    """Marginal homogeneity: P(X_t = j) = P(X_1 = j) for t >= 2, j < r."""
    coords = _coords(r, T)
    rows = []
    for t in range(1, T):
        for j in range(1, r):
            rows.append(
                (coords[:, t] == j).astype(float) - (coords[:, 0] == j).astype(float)
            )
    return _linear_system("mh", r, T, np.array(rows))


def constraint_me(r: int, T: int, u: ScoreVector | None = None) -> ConstraintSystem:
    """Marginal moment equality: score-weighted means agree across axes."""
    if u is None:
        u = equal_interval_scores(r)
    W = score_columns(r, T, u).T
    return _linear_system("me", r, T, W)


def _linear_system(model: str, r: int, T: int, A: np.ndarray) -> ConstraintSystem:
    A = np.ascontiguousarray(A)
    A.setflags(write=False)

    def h(pi: np.ndarray) -> np.ndarray:
        return A @ pi

    def jacobian(pi: np.ndarray) -> np.ndarray:
        return A

    return ConstraintSystem(
        model=model, r=r, T=T, dim=A.shape[0], h=h, jacobian=jacobian
    )


def constraint_oqsf(
    r: int,
    T: int,
    u: ScoreVector | None = None,
    spec: FSpec = KL,
    u_basis: np.ndarray | None = None,
) -> ConstraintSystem:
    """Generalized ordinal quasi-symmetry: U^T F(pi / pi^S) = 0.

    ``pi^S`` is the orbit-mean symmetrization of ``pi`` and F = f'.  The
    Jacobian entries follow the chain rule through the orbit mean: for
    cells i, j in the same orbit A,

        d F(pi_i / pi^S_i) / d pi_j
            = (1/pi^S_i) (1 - pi^c_i) F'(pi_i/pi^S_i)      if j = i,
            = -(1/pi^S_i) pi^c_i F'(pi_i/pi^S_i)           otherwise,

    and zero across orbits, where pi^c is the conditional cell probability
    given the orbit.  ``u_basis`` overrides the orthocomplement basis (used
    to verify basis invariance); it must have orthonormal columns spanning
    the same space.
    """
    if u is None:
        u = equal_interval_scores(r)
    design = build_design(r, T, u)
    U = orthocomplement(design).U if u_basis is None else np.asarray(u_basis)
    oi = orbit_index(r, T)
    sizes_by_cell = oi.orbit_sizes[oi.orbit_id].astype(float)

    def _ratio_parts(pi: np.ndarray):
        totals = oi.orbit_totals(pi)
        if (totals <= 0.0).any():
            bad = int(np.argmin(totals))
            raise DomainError(
                f"orbit {oi.orbits[bad].representative} has zero total probability"
            )
        t_by_cell = totals[oi.orbit_id]
        pi_s = t_by_cell / sizes_by_cell
        rho = pi / pi_s
        pi_c = pi / t_by_cell
        return pi_s, rho, pi_c

    def h(pi: np.ndarray) -> np.ndarray:
        _, rho, _ = _ratio_parts(pi)
        return U.T @ spec.F(rho)

    def jacobian(pi: np.ndarray) -> np.ndarray:
        pi_s, rho, pi_c = _ratio_parts(pi)
        fp = spec.F_prime(rho)
        diag = fp / pi_s
        b = fp * pi_c / pi_s
        # (U^T M)_{k,i} = U_{ik} diag_i - sum_{j in A(i)} U_{jk} b_j
        orbit_sums = np.zeros((oi.n_orbits, U.shape[1]))
        np.add.at(orbit_sums, oi.orbit_id, U * b[:, None])
        return (U * diag[:, None]).T - orbit_sums[oi.orbit_id].T

    model = f"oqsf:{spec.name}"
    return ConstraintSystem(
        model=model,
        r=r,
        T=T,
        dim=U.shape[1],
        h=h,
        jacobian=jacobian,
        recover=OqsfRecovery(spec=spec, u=u, design=design),
    )


def constraint_qs(r: int, T: int) -> ConstraintSystem:
    """Quasi-symmetry: log(pi / pi^S) lies in the span of the QS design.

    The QS design replaces the score columns by per-axis category-indicator
    differences, so it contains the ordinal design for any scores.
    """
    oi = orbit_index(r, T)
    coords = _coords(r, T)
    cols = []
    for t in range(T - 1):
        for j in range(2, r + 1):
            cols.append(
                (coords[:, t] == j).astype(float) - (coords[:, -1] == j).astype(float)
            )
    sym = np.zeros((oi.n_cells, oi.n_orbits))
    sym[np.arange(oi.n_cells), oi.orbit_id] = 1.0
    X = np.hstack([np.stack(cols, axis=1), sym]) if cols else sym
    K = (T - 1) * (r - 1) + comb(r + T - 1, T)
    if np.linalg.matrix_rank(X) != K:
        raise ValueError("QS design matrix is rank deficient")
    U = null_space(X.T, rcond=1e-10)
    sizes_by_cell = oi.orbit_sizes[oi.orbit_id].astype(float)

    def _log_ratio_parts(pi: np.ndarray):
        if (pi <= 0.0).any():
            bad = int(np.argmin(pi))
            raise DomainError(f"cell {bad} has zero probability, log undefined")
        totals = oi.orbit_totals(pi)
        t_by_cell = totals[oi.orbit_id]
        return np.log(pi * sizes_by_cell / t_by_cell), t_by_cell

    def h(pi: np.ndarray) -> np.ndarray:
        log_rho, _ = _log_ratio_parts(pi)
        return U.T @ log_rho

    def jacobian(pi: np.ndarray) -> np.ndarray:
        _, t_by_cell = _log_ratio_parts(pi)
        b = 1.0 / t_by_cell
        orbit_sums = np.zeros((oi.n_orbits, U.shape[1]))
        np.add.at(orbit_sums, oi.orbit_id, U * b[:, None])
        return (U / pi[:, None]).T - orbit_sums[oi.orbit_id].T

    return ConstraintSystem(
        model="qs", r=r, T=T, dim=U.shape[1], h=h, jacobian=jacobian
    )


def constraint_ml(r: int, T: int) -> ConstraintSystem:
    """Marginal logistic model: parallel cumulative logits across axes.

    Constraints: [logit F_i^(t) - logit F_i^(1)] - [logit F_1^(t) -
    logit F_1^(1)] = 0 for i = 2..r-1 and t = 2..T, where F_i^(t) is the
    cumulative marginal P(X_t <= i).  For r = 2 the system is empty.
    """
    coords = _coords(r, T)
    # cum[t][i-1] selects cells with coordinate t at most i, for i = 1..r-1
    cum = [
        [(coords[:, t] <= i).astype(float) for i in range(1, r)] for t in range(T)
    ]

    def _cum_margins(pi: np.ndarray) -> np.ndarray:
        F = np.array([[c @ pi for c in cum_t] for cum_t in cum])
        if ((F <= 0.0) | (F >= 1.0)).any():
            raise DomainError("cumulative marginal at 0 or 1, logit undefined")
        return F

    def h(pi: np.ndarray) -> np.ndarray:
        F = _cum_margins(pi)
        logit = np.log(F) - np.log1p(-F)
        out = []
        for t in range(1, T):
            for i in range(1, r - 1):
                out.append(
                    (logit[t, i] - logit[0, i]) - (logit[t, 0] - logit[0, 0])
                )
        return np.array(out)

    def jacobian(pi: np.ndarray) -> np.ndarray:
        F = _cum_margins(pi)
        # d logit(F)/d pi = cum_indicator / (F (1 - F))
        rows = []
        for t in range(1, T):
            for i in range(1, r - 1):
                row = (
                    cum[t][i] / (F[t, i] * (1 - F[t, i]))
                    - cum[0][i] / (F[0, i] * (1 - F[0, i]))
                    - cum[t][0] / (F[t, 0] * (1 - F[t, 0]))
                    + cum[0][0] / (F[0, 0] * (1 - F[0, 0]))
                )
                rows.append(row)
        if not rows:
            return np.zeros((0, pi.size))
        return np.array(rows)

    dim = (T - 1) * (r - 2)
    return ConstraintSystem(
        model="ml", r=r, T=T, dim=dim, h=h, jacobian=jacobian, recover=MlRecovery()
    )


def combine_constraints(
    first: ConstraintSystem, second: ConstraintSystem, model: str | None = None
) -> ConstraintSystem:
    """Stack two systems on the same lattice into one (h1; h2)."""
    if (first.r, first.T) != (second.r, second.T):
        raise ValueError("constraint systems live on different lattices")

    def h(pi: np.ndarray) -> np.ndarray:
        return np.concatenate([first.h(pi), second.h(pi)])

    def jacobian(pi: np.ndarray) -> np.ndarray:
        return np.vstack([first.jacobian(pi), second.jacobian(pi)])

    return ConstraintSystem(
        model=model or f"{first.model}+{second.model}",
        r=first.r,
        T=first.T,
        dim=first.dim + second.dim,
        h=h,
        jacobian=jacobian,
        recover=first.recover or second.recover,
    )


_MODEL_ALIASES = {"oqs": "oqsf:kl", "poqs": "oqsf:pearson"}


def normalize_model_tag(model: str) -> str:
    model = model.lower()
    return _MODEL_ALIASES.get(model, model)


def degrees_of_freedom(model: str, r: int, T: int) -> int:
    """df of each model; always equals the dimension of its constraint system.

    S: r^T - C(r+T-1, T); the OQS[f] family subtracts a further T-1; ME has
    T-1; MH has (T-1)(r-1); ML has (T-1)(r-2); QS is the S value minus
    (T-1)(r-1).
    """
    tag = normalize_model_tag(model)
    s_df = r**T - comb(r + T - 1, T)
    if tag == "s":
        return s_df
    if tag.startswith("oqsf"):
        return s_df - (T - 1)
    if tag == "me":
        return T - 1
    if tag == "mh":
        return (T - 1) * (r - 1)
    if tag == "ml":
        return (T - 1) * (r - 2)
    if tag == "qs":
        return s_df - (T - 1) * (r - 1)
    raise ValueError(f"unknown model tag {model!r}")


def build_constraint(
    model: str,
    r: int,
    T: int,
    u: ScoreVector | None = None,
) -> ConstraintSystem:
    """Construct the constraint system named by a CLI-style model tag.

    Recognized tags: "s", "qs", "mh", "me", "ml", "oqs" (KL), "poqs"
    (Pearson) and "oqsf:<specname>".
    """
    tag = normalize_model_tag(model)
    if tag == "s":
        return constraint_s(r, T)
    if tag == "qs":
        return constraint_qs(r, T)
    if tag == "mh":
        return constraint_mh(r, T)
    if tag == "me":
        return constraint_me(r, T, u)
    if tag == "ml":
        return constraint_ml(r, T)
    if tag.startswith("oqsf:"):
        return constraint_oqsf(r, T, u, get_fspec(tag.split(":", 1)[1]))
    raise ValueError(f"unknown model tag {model!r}")
