"""Constrained maximum-likelihood fitting of symmetry-family models.

The fitter maximizes the multinomial log-likelihood sum(n_i log pi_i)
subject to h(pi) = 0 and sum(pi) = 1 by damped Newton iteration on the
Lagrangian stationarity system.  Iterates live in log-probability
coordinates, which keeps every pi strictly positive without explicit
barriers and lets boundary MLEs (zero fitted cells, which arise whenever
an entire orbit has zero count) drain off geometrically instead of
wrecking the KKT system.

A second, independent fitting path (`fit_loglinear_kl`) handles the
KL-representable models by Fisher scoring in the log-linear
parameterization; the two paths must agree and are cross-checked in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import inference
from .model_constraints import (
    ConstraintSystem,
    MlRecovery,
    OqsfRecovery,
    build_design,
    constraint_oqsf,
    constraint_qs,
    degrees_of_freedom,
    normalize_model_tag,
)
from .tensor_table import ProbVector, Table, orbit_index

# Cells whose orbit carries no data have boundary MLEs; they drain toward
# zero and are held at exp(_XI_FLOOR) ~ 1e-13, which is zero at every
# tolerance used here but keeps the KKT system inside floating-point range.
_XI_FLOOR = float(np.log(1e-13))
_XI_CEIL = 0.1  # probabilities never exceed e^0.1; prevents overflow mid-search
_MAX_STEP_COORD = 8.0


class ParamRecoveryError(RuntimeError):
    """Fitted probabilities do not satisfy the model they were fitted under."""


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and limits for the constrained Newton fitter."""

    max_iterations: int = 200
    tol_update: float = 1e-9
    tol_constraint: float = 1e-10
    max_step_halvings: int = 30
    start_smoothing: float = 0.1

    def __post_init__(self):
        for name in (
            "max_iterations",
            "tol_update",
            "tol_constraint",
            "max_step_halvings",
            "start_smoothing",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class OqsfParams:
    """Recovered ordinal quasi-symmetry parameters.

    ``beta`` has one entry per axis, normalized so the entry at
    ``reference_axis`` (1-based) is zero; ``psi`` holds one orbit constant
    per orbit in representative order.
    """

    beta: np.ndarray
    psi: np.ndarray
    reference_axis: int
    residual: float


@dataclass(frozen=True)
class MlParams:
    """Recovered cumulative-logit shifts, delta_{t-1} for t = 2..T."""

    delta: np.ndarray
    residual: float


@dataclass(frozen=True)
class FitResult:
    """Outcome of one constrained ML fit."""

    model: str
    pi_hat: ProbVector
    m_hat: np.ndarray
    params: OqsfParams | MlParams | None
    g_squared: float
    df: int
    p_value: float
    converged: bool
    iterations: int
    max_constraint_residual: float
    warnings: tuple[str, ...] = field(default=())

    @property
    def n(self) -> int:
        return int(round(self.m_hat.sum()))


def _smoothed_start(counts: np.ndarray, delta0: float) -> np.ndarray:
    n = counts.sum()
    return (counts + delta0) / (n + delta0 * counts.size)


def _constraint_state(counts, pi, cs):
    """h, its Jacobian, and the simplex gap at the current point."""
    h = cs.h(pi)
    H = cs.jacobian(pi)
    gap = pi.sum() - 1.0
    return h, H, gap


def _sqp_step(counts, n, pi, h, H, gap, free, nu_prev, warnings):
    """One SQP subproblem: maximize the linearized likelihood in a
    positive-definite curvature metric subject to linearized constraints.

    In log coordinates the objective sum(n_i xi_i) is linear; the
    Lagrangian curvature at the solution is diag(n_i), floored here by a
    sliver of the expected information so that zero-count cells still
    carry a metric.  The subproblem multipliers come from the small SPD
    Schur system J B^{-1} J' with J = [H D_pi; pi'], which stays
    well-behaved while boundary cells drain, unlike the raw saddle Newton
    matrix, which turns singular there.  Cells pinned at the probability
    floor (``free`` false) are held fixed so the linearization cannot
    claim progress from drains that the floor will refuse.  Returns the
    step in log coordinates plus the multipliers of the original
    Lagrangian (gamma multiplies 1 - sum(pi)).
    """
    d = H.shape[0] if H.size else 0
    JD = np.vstack([H * pi, pi]) if d else pi[None, :]
    JD = JD[:, free]
    C = np.concatenate([h, [gap]]) if d else np.array([gap])
    # curvature metric, scaled by 1/n
    b = np.maximum(counts[free], 0.05 * n * pi[free]) / n
    G = (JD / b) @ JD.T
    # solve for the increment over the carried multipliers: the remaining
    # right-hand side is residual-sized, so the solve error shrinks with it
    # instead of flooring at eps * |G| * |nu|
    grad = counts[free] / n + JD.T @ nu_prev
    rhs = -(C + JD @ (grad / b))
    try:
        d_nu = scipy.linalg.solve(
            G + 1e-14 * np.trace(G) * np.eye(G.shape[0]), rhs, assume_a="sym"
        )
        if not np.all(np.isfinite(d_nu)):
            raise np.linalg.LinAlgError
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
        if "singular multiplier system; least-squares step" not in warnings:
            warnings.append("singular multiplier system; least-squares step")
        d_nu = np.linalg.lstsq(G, rhs, rcond=None)[0]
    nu = nu_prev + d_nu
    d_xi = np.zeros_like(pi)
    d_xi[free] = (grad + JD.T @ d_nu) / b
    lam = n * nu[:d]
    gamma = -n * nu[d]
    return d_xi, nu, lam, gamma


def _l1_merit(counts, n, xi, h, gap) -> float:
    return float(-(counts @ xi) / n + np.sum(np.abs(h)) + abs(gap))


def _stationarity(counts, pi, H, lam, gamma, xi) -> float:
    """Max violation of n_i + pi_i((H'lam)_i - gamma) = 0, one-sided at the
    probability floor (a floored cell may legitimately be pushed down)."""
    ht_lam = H.T @ lam if H.size else np.zeros_like(pi)
    r1 = counts + pi * (ht_lam - gamma)
    floored = xi <= _XI_FLOOR + 1e-9
    worst = float(np.max(np.abs(r1[~floored]))) if (~floored).any() else 0.0
    if floored.any():
        worst = max(worst, float(np.max(r1[floored])))
    return worst


def fit(
    table: Table,
    cs: ConstraintSystem,
    config: SolverConfig | None = None,
) -> FitResult:
    """Fit a model by constrained maximum likelihood.

    Returns a :class:`FitResult` whether or not the iteration converged;
    ``converged`` is False on failure and the diagnostics (iterations,
    residuals, warnings) describe what happened.  Constraint evaluation
    errors (zero orbit totals, degenerate logits) propagate as exceptions
    since they indicate the model cannot even be evaluated at the data.
    """
    if (table.r, table.T) != (cs.r, cs.T):
        raise ValueError("table and constraint system have different shapes")
    if cs.dim >= cs.n_cells:
        raise ValueError("constraint system leaves no degrees of freedom")
    cfg = config or SolverConfig()
    counts = table.counts.astype(float)
    n = float(table.n)

    pi = _smoothed_start(counts, cfg.start_smoothing)
    xi = np.log(pi)
    # stationarity residuals carry count units; the absolute scale matters
    # so that boundary cells drain far enough for 1e-8 expected-count oracles
    stat_tol = 1e-9 * max(1.0, np.sqrt(n))

    warnings: list[str] = []
    converged = False
    iterations = 0
    update_norm = np.inf
    stalls = 0
    mu = 1.0
    nu = np.zeros(cs.dim + 1)

    for iterations in range(1, cfg.max_iterations + 1):
        h, H, gap = _constraint_state(counts, pi, cs)
        max_h = float(np.max(np.abs(h))) if cs.dim else 0.0
        free = (xi > _XI_FLOOR + 1e-9) | (counts > 0)
        d_xi, nu, lam, gamma = _sqp_step(counts, n, pi, h, H, gap, free, nu, warnings)
        stat = _stationarity(counts, pi, H, lam, gamma, xi)
        if (
            update_norm < cfg.tol_update
            and max_h < cfg.tol_constraint
            and abs(gap) < cfg.tol_constraint
            and stat < stat_tol
        ):
            converged = True
            break
        d_xi = np.clip(d_xi, -_MAX_STEP_COORD, _MAX_STEP_COORD)
        c_norm = (np.sum(np.abs(h)) if cs.dim else 0.0) + abs(gap)

        if c_norm < 1e-8 and stat < 1e-2 * max(1.0, np.sqrt(n)):
            # local phase: near-feasible and near-stationary, so take plain
            # damped-Newton steps; the penalty merit cannot resolve
            # improvements this small in double precision
            xi_new = np.maximum(xi + d_xi, _XI_FLOOR)
            pi_new = np.exp(xi_new)
            update_norm = float(np.max(np.abs(pi_new - pi)))
            xi, pi = xi_new, pi_new
            continue

        # l1 exact-penalty line search; the subproblem direction descends
        # this merit whenever mu dominates the subproblem multipliers
        mu = max(mu, 2.0 * float(np.max(np.abs(nu))) if nu.size else 1.0)
        phi0 = -(counts @ xi) / n + mu * c_norm
        pred = float(d_xi[free] @ (np.maximum(counts[free], 0.05 * n * pi[free]) / n * d_xi[free])) + mu * c_norm
        step = 1.0
        accepted = None
        for _ in range(cfg.max_step_halvings):
            xi_try = np.maximum(xi + step * d_xi, _XI_FLOOR)
            pi_try = np.exp(xi_try)
            try:
                h_t = cs.h(pi_try)
            except Exception:
                step *= 0.5
                continue
            gap_t = pi_try.sum() - 1.0
            c_t = (np.sum(np.abs(h_t)) if cs.dim else 0.0) + abs(gap_t)
            phi = -(counts @ xi_try) / n + mu * c_t
            if phi <= phi0 - 1e-4 * step * pred:
                accepted = (xi_try, pi_try)
                break
            step *= 0.5
        if accepted is None:
            stalls += 1
            if stalls >= 3:
                warnings.append("line search stalled on the penalty merit")
                break
            mu *= 10.0
            continue
        stalls = 0
        xi_new, pi_new = accepted
        update_norm = float(np.max(np.abs(pi_new - pi)))
        xi, pi = xi_new, pi_new

    h, H, gap = _constraint_state(counts, pi, cs)
    max_h = float(np.max(np.abs(h))) if cs.dim else 0.0
    if not converged:
        warnings.append(
            f"no convergence in {iterations} iterations "
            f"(update {update_norm:.2e}, constraint {max_h:.2e})"
        )
    return _assemble_result(
        table, cs, pi, converged, iterations, max(max_h, abs(gap)), warnings
    )


def _assemble_result(table, cs, pi, converged, iterations, max_resid, warnings):
    pi = np.maximum(pi, 0.0)
    pi = pi / pi.sum()
    pv = ProbVector(T=table.T, r=table.r, probs=pi)
    m_hat = table.n * pi
    g2 = inference.g_squared(table, m_hat)
    df = cs.dim
    p_value = inference.chisq_sf(g2, df) if df > 0 else 1.0
    params = None
    if converged and cs.recover is not None:
        try:
            params = recover_params_from_probs(pv, cs)
        except ParamRecoveryError as exc:
            warnings = list(warnings) + [f"parameter recovery failed: {exc}"]
    return FitResult(
        model=cs.model,
        pi_hat=pv,
        m_hat=m_hat,
        params=params,
        g_squared=g2,
        df=df,
        p_value=p_value,
        converged=converged,
        iterations=iterations,
        max_constraint_residual=max_resid,
        warnings=tuple(warnings),
    )


def recover_params(
    fit_result: FitResult,
    cs: ConstraintSystem,
    reference_axis: int = 1,
) -> OqsfParams | MlParams:
    """Decode model parameters from a fitted solution.

    For the OQS[f] family this evaluates F(pi/pi^S) on every cell and
    solves the (exactly consistent) linear system for the score
    coefficients beta and the per-orbit constants psi, then re-expresses
    beta against ``reference_axis``.  For the marginal logistic model it
    reads off the cumulative-logit shifts.
    """
    return recover_params_from_probs(fit_result.pi_hat, cs, reference_axis)


def recover_params_from_probs(
    pv: ProbVector,
    cs: ConstraintSystem,
    reference_axis: int = 1,
) -> OqsfParams | MlParams:
    if cs.recover is None:
        raise ParamRecoveryError(f"model {cs.model!r} has no recoverable parameters")
    if isinstance(cs.recover, OqsfRecovery):
        return _recover_oqsf(pv, cs.recover, reference_axis)
    if isinstance(cs.recover, MlRecovery):
        return _recover_ml(pv, cs)
    raise ParamRecoveryError(f"unknown recovery metadata {cs.recover!r}")


def _recover_oqsf(pv: ProbVector, rec: OqsfRecovery, reference_axis: int) -> OqsfParams:
    T, r = pv.T, pv.r
    if not 1 <= reference_axis <= T:
        raise ValueError(f"reference axis {reference_axis} outside [1, {T}]")
    oi = orbit_index(r, T)
    pi = pv.probs
    totals = oi.orbit_totals(pi)
    if (totals <= 0.0).any():
        raise ParamRecoveryError("zero orbit total; ratios undefined")
    pi_s = (totals / oi.orbit_sizes)[oi.orbit_id]
    y = np.asarray(rec.spec.F(pi / pi_s), dtype=float)
    X = rec.design.X
    theta, *_ = np.linalg.lstsq(X, y, rcond=None)
    residual = float(np.max(np.abs(X @ theta - y)))
    if residual > 1e-6:
        raise ParamRecoveryError(
            f"F(pi/pi^S) deviates from the design span by {residual:.2e}"
        )
    beta = np.concatenate([theta[: T - 1], [0.0]])
    beta = beta - beta[reference_axis - 1]
    psi = theta[T - 1 :].copy()
    return OqsfParams(
        beta=beta, psi=psi, reference_axis=reference_axis, residual=residual
    )


def _recover_ml(pv: ProbVector, cs: ConstraintSystem) -> MlParams:
    T, r = pv.T, pv.r
    margins = []
    grid = pv.probs.reshape((r,) * T)
    for t in range(T):
        other = tuple(a for a in range(T) if a != t)
        margins.append(np.cumsum(grid.sum(axis=other))[: r - 1])
    logits = [np.log(F) - np.log1p(-F) for F in margins]
    deltas = np.array([logits[0] - logits[t] for t in range(1, T)])
    spread = float(np.max(deltas.max(axis=1) - deltas.min(axis=1)))
    if spread > 1e-6:
        raise ParamRecoveryError(
            f"cumulative-logit shifts vary across categories by {spread:.2e}"
        )
    return MlParams(delta=deltas.mean(axis=1), residual=spread)


def fit_loglinear_kl(
    table: Table,
    model: str = "oqs",
    u=None,
    max_iterations: int = 100,
) -> FitResult:
    """Fit a KL-representable model (S, QS, OQS) in log-linear form.

    Fisher scoring on log(mu) = X theta under the multinomial likelihood
    (run as its computational Poisson equivalent; the intercept lies in the
    orbit-indicator span, so the fitted total equals n and the MLEs agree).
    Cells whose whole orbit has zero count have MLE zero and are separable
    from the rest of the likelihood, so they are excluded and refilled with
    exact zeros.
    """
    tag = normalize_model_tag(model)
    if tag not in ("s", "qs", "oqs:kl", "oqsf:kl"):
        tag = {"oqs": "oqsf:kl"}.get(tag, tag)
    if tag not in ("s", "qs", "oqsf:kl"):
        raise ValueError(f"model {model!r} is not KL-representable here")
    r, T = table.r, table.T
    oi = orbit_index(r, T)
    counts = table.counts.astype(float)
    n = float(table.n)

    if tag == "s":
        sym = np.zeros((oi.n_cells, oi.n_orbits))
        sym[np.arange(oi.n_cells), oi.orbit_id] = 1.0
        X = sym
        n_score = 0
    elif tag == "qs":
        X = _qs_design(r, T, oi)
        n_score = (T - 1) * (r - 1)
    else:
        design = build_design(r, T, u)
        X = design.X
        n_score = design.n_score_cols

    orbit_counts = oi.orbit_totals(counts)
    live = orbit_counts[oi.orbit_id] > 0
    Xl = X[live]
    keep_cols = np.abs(Xl).sum(axis=0) > 0
    Xl = Xl[:, keep_cols]
    yl = counts[live]

    mu0 = np.maximum(yl, 0.5)
    theta, *_ = np.linalg.lstsq(Xl, np.log(mu0), rcond=None)
    warnings: list[str] = []
    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        eta = np.minimum(Xl @ theta, 300.0)
        mu = np.exp(eta)
        score = Xl.T @ (yl - mu)
        if np.max(np.abs(score)) < 1e-10 * max(1.0, n):
            converged = True
            break
        fisher = Xl.T @ (mu[:, None] * Xl)
        try:
            step = scipy.linalg.solve(fisher, score, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            step = np.linalg.lstsq(fisher, score, rcond=None)[0]
            if "singular information matrix; least-squares step" not in warnings:
                warnings.append("singular information matrix; least-squares step")
        cap = np.max(np.abs(step))
        if cap > 10.0:
            step = step * (10.0 / cap)
        dev0 = _poisson_deviance(yl, mu)
        s = 1.0
        for _ in range(30):
            mu_try = np.exp(np.minimum(Xl @ (theta + s * step), 300.0))
            if _poisson_deviance(yl, mu_try) <= dev0 + 1e-12:
                break
            s *= 0.5
        theta = theta + s * step

    if not converged:
        warnings.append(f"log-linear fit: no convergence in {iterations} iterations")

    mu_full = np.zeros(oi.n_cells)
    mu_full[live] = np.exp(np.minimum(Xl @ theta, 300.0))
    pi = mu_full / mu_full.sum()
    pv = ProbVector(T=T, r=r, probs=pi)
    m_hat = n * pi
    g2 = inference.g_squared(table, m_hat)
    df = degrees_of_freedom(tag, r, T)
    params = None
    if tag == "oqsf:kl" and converged:
        beta = np.zeros(T)
        beta[: T - 1] = theta[:n_score]
        psi = None
        params = OqsfParams(
            beta=beta - beta[-1],
            psi=np.full(oi.n_orbits, np.nan),
            reference_axis=T,
            residual=0.0,
        )
        # orbit constants on the live orbits only; dead orbits have none
        psi_full = np.full(oi.n_orbits, -np.inf)
        live_orbits = np.flatnonzero(orbit_counts > 0)
        psi_full[live_orbits] = theta[n_score:]
        params = replace(params, psi=psi_full)
    return FitResult(
        model=f"loglinear:{tag}",
        pi_hat=pv,
        m_hat=m_hat,
        params=params,
        g_squared=g2,
        df=df,
        p_value=inference.chisq_sf(g2, df) if df > 0 else 1.0,
        converged=converged,
        iterations=iterations,
        max_constraint_residual=float("nan"),
        warnings=tuple(warnings),
    )


def _qs_design(r: int, T: int, oi) -> np.ndarray:
    from .model_constraints import _coords

    coords = _coords(r, T)
    cols = []
    for t in range(T - 1):
        for j in range(2, r + 1):
            cols.append(
                (coords[:, t] == j).astype(float) - (coords[:, -1] == j).astype(float)
            )
    sym = np.zeros((oi.n_cells, oi.n_orbits))
    sym[np.arange(oi.n_cells), oi.orbit_id] = 1.0
    return np.hstack([np.stack(cols, axis=1), sym])


def _poisson_deviance(y: np.ndarray, mu: np.ndarray) -> float:
    pos = y > 0
    dev = 2.0 * (np.sum(y[pos] * np.log(y[pos] / mu[pos])) - y.sum() + mu.sum())
    return float(dev)
