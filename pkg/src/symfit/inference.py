"""Test statistics: likelihood-ratio G^2, Wald quadratic forms, p-values.

The Wald statistic evaluates a constraint system at the raw observed
proportions p and measures the violation in the metric of its delta-method
covariance, Delta = n h(p)' (H Sigma H')^{-1} h(p) with
Sigma(p) = D(p) - p p'.  Tables with zero cells can make that covariance
singular; this is surfaced as an explicit error rather than smoothed away.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import gammaincc

from .model_constraints import ConstraintSystem
from .tensor_table import Table


class SingularityError(np.linalg.LinAlgError):
    """The Wald covariance H Sigma H' is numerically singular."""


class NestingError(ValueError):
    """A conditional test produced a meaningfully negative statistic."""


class InfiniteStatisticError(ValueError):
    """G^2 is infinite: a zero fitted value under a positive count."""


@dataclass(frozen=True)
class TestReport:
    """A single test statistic with its reference distribution."""

    statistic: float
    df: int
    p_value: float
    kind: str  # "likelihood-ratio" | "wald" | "conditional"
    warnings: tuple[str, ...] = field(default=())


def g_squared(table: Table, m_hat: np.ndarray) -> float:
    """Likelihood-ratio statistic 2 sum n log(n / m_hat); 0-count terms vanish."""
    counts = table.counts.astype(float)
    m_hat = np.asarray(m_hat, dtype=float)
    if m_hat.shape != counts.shape:
        raise ValueError("m_hat must match the table layout")
    pos = counts > 0
    if (m_hat[pos] <= 0.0).any():
        bad = int(np.flatnonzero(pos & (m_hat <= 0.0))[0])
        raise InfiniteStatisticError(
            f"fitted value 0 at cell index {bad} with positive count"
        )
    return float(2.0 * np.sum(counts[pos] * np.log(counts[pos] / m_hat[pos])))


def chisq_sf(x: float, df: int) -> float:
    """Upper-tail chi-squared probability via the regularized incomplete gamma."""
    if df < 1 or int(df) != df:
        raise ValueError(f"df must be a positive integer, got {df!r}")
    if x < 0:
        raise ValueError("statistic must be nonnegative")
    return float(gammaincc(df / 2.0, x / 2.0))


def wald_delta(table: Table, cs: ConstraintSystem) -> TestReport:
    """Wald statistic of a constraint system at the observed proportions."""
    if (table.r, table.T) != (cs.r, cs.T):
        raise ValueError("table and constraint system have different shapes")
    n = table.n
    p = table.counts / n
    h = cs.h(p)
    H = cs.jacobian(p)
    sigma = np.diag(p) - np.outer(p, p)
    G = H @ sigma @ H.T
    warnings: list[str] = []
    if cs.dim == 0:
        return TestReport(statistic=0.0, df=0, p_value=1.0, kind="wald")
    eigvals = scipy.linalg.eigvalsh(G)
    if eigvals[0] <= eigvals[-1] * 1e-14:
        direction = scipy.linalg.eigh(G)[1][:, 0]
        worst = int(np.argmax(np.abs(direction)))
        raise SingularityError(
            "H Sigma H' is singular (zero cells?); deficient constraint "
            f"direction is dominated by component {worst}"
        )
    cond = eigvals[-1] / eigvals[0]
    if cond > 1e12:
        warnings.append(f"Wald covariance condition number {cond:.2e}")
    cho = scipy.linalg.cho_factor(G)
    stat = float(n * h @ scipy.linalg.cho_solve(cho, h))
    return TestReport(
        statistic=stat,
        df=cs.dim,
        p_value=chisq_sf(stat, cs.dim),
        kind="wald",
        warnings=tuple(warnings),
    )


def conditional_test(fit_strong, fit_weak) -> TestReport:
    """Partitioned test G^2(strong) - G^2(weak) for hierarchical models.

    ``fit_strong`` is the fit of the more constrained model (e.g. complete
    symmetry) and ``fit_weak`` the larger model it is nested in.  A
    statistic below -1e-8 signals a failed fit rather than rounding.
    """
    stat = fit_strong.g_squared - fit_weak.g_squared
    df = fit_strong.df - fit_weak.df
    if stat < -1e-8:
        raise NestingError(
            f"conditional statistic {stat:.3e} is negative: "
            f"{fit_weak.model} fit does not dominate {fit_strong.model}"
        )
    if df < 0:
        raise NestingError("sub-model has more degrees of freedom than the model")
    stat = max(stat, 0.0)
    p = chisq_sf(stat, df) if df > 0 else 1.0
    return TestReport(statistic=stat, df=df, p_value=p, kind="conditional")
