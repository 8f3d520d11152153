"""f-divergence machinery: convex-function specs and the divergence functional.

A model family member is specified by a strictly convex ``f`` on (0, inf)
with ``f(1) = 0``, its derivative ``F = f'`` and the closed-form inverse
``F^{-1}``.  The two built-ins are the Kullback-Leibler case
``f(x) = x log x`` and the Pearson case ``f(x) = (1 - x)^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor_table import ProbVector

_DERIV_STEP = 1e-6


@dataclass(frozen=True)
class FSpec:
    """One member of the f-divergence family.

    ``f_deriv2`` is the derivative of ``F = f'``; constraint Jacobians need
    it.  When not supplied it falls back to a central difference of
    ``f_deriv``, which keeps user-defined specs to the three closed forms
    the model definition actually requires.
    """

    name: str
    f: Callable[[float], float]
    f_deriv: Callable[[float], float]
    f_deriv_inv: Callable[[float], float]
    f_deriv2: Callable[[float], float] | None = None

    def F(self, x):
        return self.f_deriv(x)

    def F_inv(self, y):
        return self.f_deriv_inv(y)

    def F_prime(self, x):
        if self.f_deriv2 is not None:
            return self.f_deriv2(x)
        h = _DERIV_STEP * np.maximum(np.abs(x), 1.0)
        return (self.f_deriv(x + h) - self.f_deriv(x - h)) / (2.0 * h)


KL = FSpec(
    name="kl",
    f=lambda x: x * np.log(x),
    f_deriv=lambda x: 1.0 + np.log(x),
    f_deriv_inv=lambda y: np.exp(y - 1.0),
    f_deriv2=lambda x: 1.0 / x,
)

PEARSON = FSpec(
    name="pearson",
    f=lambda x: (1.0 - x) ** 2,
    f_deriv=lambda x: 2.0 * x - 2.0,
    f_deriv_inv=lambda y: 1.0 + y / 2.0,
    f_deriv2=lambda x: 2.0 * np.ones_like(np.asarray(x, dtype=float)),
)

_BUILTINS = {"kl": KL, "pearson": PEARSON}


def get_fspec(name: str) -> FSpec:
    """Look up a built-in spec by name ("kl" or "pearson")."""
    try:
        return _BUILTINS[name.lower()]
    except KeyError:
        raise KeyError(
            f"unknown f-spec {name!r}; built-ins are {sorted(_BUILTINS)}"
        ) from None


def f_divergence(p: ProbVector, q: ProbVector, spec: FSpec) -> float:
    """I(p : q) = sum of q_i * f(p_i / q_i), with the usual limit conventions.

    Conventions: 0 * f(0/0) = 0, and 0 * f(a/0) = a * lim f(t)/t as t -> inf.
    Nonnegative, and zero iff p equals q (f strictly convex, f(1) = 0).
    """
    if (p.T, p.r) != (q.T, q.r):
        raise ValueError("p and q must share the same lattice shape")
    pv, qv = p.probs, q.probs
    total = 0.0
    for pi, qi in zip(pv, qv):
        if qi > 0.0:
            if pi > 0.0:
                total += qi * float(spec.f(pi / qi))
            else:
                total += qi * _f_at_zero(spec)
        elif pi > 0.0:
            total += pi * _f_slope_at_inf(spec)
    return total


def _f_at_zero(spec: FSpec) -> float:
    val = float(spec.f(1e-12))
    return val if math.isfinite(val) else math.inf


def _f_slope_at_inf(spec: FSpec) -> float:
    t = 1e12
    return float(spec.f(t)) / t


@dataclass(frozen=True)
class FSpecDiagnostics:
    """Numeric health report for an FSpec; advisory, never blocking."""

    f_at_one: float
    min_second_difference: float
    max_inverse_roundtrip_error: float
    warnings: tuple[str, ...] = field(default=())

    @property
    def ok(self) -> bool:
        return not self.warnings


def validate_fspec(spec: FSpec, grid_size: int = 200) -> FSpecDiagnostics:
    """Check f(1) = 0, sampled strict convexity, and F / F^{-1} consistency.

    Convexity is probed by second differences of ``f`` on a log-spaced grid
    over [1e-4, 1e4]; a grid check cannot prove convexity, so failures are
    reported as warnings.
    """
    warnings: list[str] = []
    f1 = float(spec.f(1.0))
    if abs(f1) > 1e-10:
        warnings.append(f"f(1) = {f1:.3e}, expected 0")

    grid = np.logspace(-4, 4, grid_size)
    fx = np.array([float(spec.f(x)) for x in grid])
    second = fx[2:] - 2.0 * fx[1:-1] + fx[:-2]
    min_second = float(second.min())
    if min_second <= 0.0:
        warnings.append("sampled second difference of f is not positive")

    inv_grid = np.logspace(-3, 3, grid_size)
    roundtrip = np.array(
        [abs(float(spec.f_deriv_inv(spec.f_deriv(x))) - x) for x in inv_grid]
    )
    max_rt = float((roundtrip / np.maximum(inv_grid, 1.0)).max())
    if max_rt > 1e-10:
        warnings.append(f"F^-1(F(x)) round-trip error {max_rt:.3e} exceeds 1e-10")

    deriv = np.array([float(spec.f_deriv(x)) for x in inv_grid])
    if (np.diff(deriv) <= 0).any():
        warnings.append("f' is not strictly increasing on the sampled grid")

    return FSpecDiagnostics(
        f_at_one=f1,
        min_second_difference=min_second,
        max_inverse_roundtrip_error=max_rt,
        warnings=tuple(warnings),
    )
