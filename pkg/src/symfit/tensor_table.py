"""Core representation of r^T contingency tables.

Cells of a T-way table with r ordered categories per axis are addressed by
1-based coordinate tuples ``(i_1, ..., i_T)``.  Internally everything is a
flat numpy array in row-major order (first axis slowest, last axis fastest).
The permutation orbit of a cell is the set of distinct coordinate
permutations; orbits partition the lattice and drive every symmetry model,
so they are enumerated once per ``(r, T)`` and cached read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import permutations, product
from math import comb

import numpy as np

Cell = tuple[int, ...]


class DomainError(ValueError):
    """Raised when an operation is evaluated outside its domain."""


def _check_cell(cell: Cell, r: int, T: int) -> None:
    if len(cell) != T:
        raise ValueError(f"cell {cell} has {len(cell)} coordinates, expected {T}")
    for c in cell:
        if not 1 <= c <= r:
            raise ValueError(f"coordinate {c} of cell {cell} outside [1, {r}]")


def linear_index(cell: Cell, r: int, T: int) -> int:
    """Row-major flat index of a 1-based cell: sum of (i_t - 1) * r^(T - t)."""
    _check_cell(cell, r, T)
    idx = 0
    for c in cell:
        idx = idx * r + (c - 1)
    return idx


def cell_of_index(idx: int, r: int, T: int) -> Cell:
    """Inverse of :func:`linear_index`."""
    if not 0 <= idx < r**T:
        raise ValueError(f"index {idx} outside [0, {r ** T})")
    coords = []
    for _ in range(T):
        coords.append(idx % r + 1)
        idx //= r
    return tuple(reversed(coords))


@dataclass(frozen=True)
class Orbit:
    """Permutation orbit of a cell: all distinct coordinate permutations."""

    representative: Cell  # coordinates sorted ascending
    members: tuple[Cell, ...]

    @property
    def size(self) -> int:
        return len(self.members)


def orbit_of(cell: Cell, r: int | None = None, T: int | None = None) -> Orbit:
    """Orbit of ``cell``: the distinct permutations, keyed by the sorted tuple."""
    if r is not None and T is not None:
        _check_cell(cell, r, T)
    rep = tuple(sorted(cell))
    members = tuple(sorted(set(permutations(rep))))
    return Orbit(representative=rep, members=members)


def enumerate_orbits(r: int, T: int) -> list[Orbit]:
    """All orbits of the r^T lattice, ordered by representative.

    The orbits partition the lattice; their number is binomial(r+T-1, T).
    """
    if r < 2 or T < 2:
        raise ValueError("need r >= 2 and T >= 2")
    reps = [tuple(c) for c in _combinations_with_replacement(r, T)]
    return [orbit_of(rep) for rep in reps]


def _combinations_with_replacement(r: int, T: int):
    # nondecreasing T-tuples over 1..r, lexicographic
    from itertools import combinations_with_replacement

    return combinations_with_replacement(range(1, r + 1), T)


@dataclass(frozen=True)
class OrbitIndex:
    """Precomputed orbit bookkeeping for one lattice shape.

    Attributes
    ----------
    orbit_id : (r^T,) int array mapping each cell to its orbit number.
    orbit_sizes : (n_orbits,) int array of orbit cardinalities #A.
    members : tuple of int arrays, the flat cell indices of each orbit.
    orbits : the :class:`Orbit` objects in representative order.
    """

    r: int
    T: int
    orbit_id: np.ndarray
    orbit_sizes: np.ndarray
    members: tuple[np.ndarray, ...]
    orbits: tuple[Orbit, ...]

    @property
    def n_cells(self) -> int:
        return self.r**self.T

    @property
    def n_orbits(self) -> int:
        return len(self.orbits)

    def orbit_totals(self, values: np.ndarray) -> np.ndarray:
        """Per-orbit sums of a flat cell array."""
        return np.bincount(self.orbit_id, weights=values, minlength=self.n_orbits)

    def spread(self, per_orbit: np.ndarray) -> np.ndarray:
        """Broadcast one value per orbit back onto the full lattice."""
        return per_orbit[self.orbit_id]


@lru_cache(maxsize=None)
def orbit_index(r: int, T: int) -> OrbitIndex:
    """Cached orbit bookkeeping for shape (r, T); shared read-only downstream."""
    orbits = enumerate_orbits(r, T)
    n_cells = r**T
    orbit_id = np.empty(n_cells, dtype=np.intp)
    members = []
    for k, orb in enumerate(orbits):
        idx = np.array([linear_index(c, r, T) for c in orb.members], dtype=np.intp)
        orbit_id[idx] = k
        members.append(idx)
    sizes = np.array([o.size for o in orbits], dtype=np.intp)
    for arr in members:
        arr.setflags(write=False)
    orbit_id.setflags(write=False)
    sizes.setflags(write=False)
    return OrbitIndex(
        r=r,
        T=T,
        orbit_id=orbit_id,
        orbit_sizes=sizes,
        members=tuple(members),
        orbits=tuple(orbits),
    )


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Table:
    """Observed counts over an r^T lattice, flat in row-major order."""

    T: int
    r: int
    counts: np.ndarray
    axis_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.T < 2 or self.r < 2:
            raise ValueError("need r >= 2 and T >= 2")
        counts = _frozen_array(self.counts, np.int64)
        if counts.ndim != 1 or counts.size != self.r**self.T:
            raise ValueError(
                f"counts must be a flat array of length {self.r ** self.T}"
            )
        if (counts < 0).any():
            raise ValueError("counts must be nonnegative")
        if counts.sum() < 1:
            raise ValueError("table must contain at least one observation")
        object.__setattr__(self, "counts", counts)
        if self.axis_names is not None and len(self.axis_names) != self.T:
            raise ValueError("axis_names must have one entry per axis")

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def proportions(self) -> "ProbVector":
        return ProbVector(T=self.T, r=self.r, probs=self.counts / self.n)

    def count(self, cell: Cell) -> int:
        return int(self.counts[linear_index(cell, self.r, self.T)])


@dataclass(frozen=True)
class ProbVector:
    """A probability distribution over the same lattice as :class:`Table`."""

    T: int
    r: int
    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen_array(self.probs, np.float64)
        if probs.ndim != 1 or probs.size != self.r**self.T:
            raise ValueError(f"probs must be a flat array of length {self.r ** self.T}")
        if (probs < 0).any():
            raise ValueError("probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")
        object.__setattr__(self, "probs", probs)

    def prob(self, cell: Cell) -> float:
        return float(self.probs[linear_index(cell, self.r, self.T)])


@dataclass(frozen=True)
class ScoreVector:
    """Ordered category scores u_1 <= ... <= u_r with u_1 < u_r."""

    u: np.ndarray

    def __post_init__(self):
        u = _frozen_array(self.u, np.float64)
        if u.ndim != 1 or u.size < 2:
            raise ValueError("scores must be a vector of length >= 2")
        if (np.diff(u) < 0).any():
            raise ValueError("scores must be nondecreasing")
        if u[0] == u[-1]:
            raise ValueError("degenerate scores: u_1 must differ from u_r")
        object.__setattr__(self, "u", u)

    @property
    def r(self) -> int:
        return self.u.size


def equal_interval_scores(r: int) -> ScoreVector:
    """The default scores u_i = i."""
    return ScoreVector(u=np.arange(1, r + 1, dtype=np.float64))


def symmetrize(p: ProbVector) -> ProbVector:
    """Replace every cell by its orbit mean; the result is permutation-invariant."""
    oi = orbit_index(p.r, p.T)
    totals = oi.orbit_totals(p.probs)
    sym = oi.spread(totals / oi.orbit_sizes)
    # orbit means redistribute mass within orbits, so the total is preserved
    sym = sym / sym.sum()
    return ProbVector(T=p.T, r=p.r, probs=sym)


def conditional_orbit_prob(p: ProbVector, cell: Cell) -> float:
    """P(cell | its orbit): p_i divided by the orbit total."""
    _check_cell(cell, p.r, p.T)
    oi = orbit_index(p.r, p.T)
    idx = linear_index(cell, p.r, p.T)
    members = oi.members[oi.orbit_id[idx]]
    total = float(p.probs[members].sum())
    if total <= 0.0:
        raise DomainError(f"orbit of cell {cell} has zero total probability")
    return float(p.probs[idx] / total)


def marginal_dist(p: ProbVector, axis: int) -> np.ndarray:
    """Marginal distribution of X_axis (axis is 1-based)."""
    if not 1 <= axis <= p.T:
        raise ValueError(f"axis {axis} outside [1, {p.T}]")
    grid = p.probs.reshape((p.r,) * p.T)
    other = tuple(t for t in range(p.T) if t != axis - 1)
    return grid.sum(axis=other)


def marginal_moment(p: ProbVector, axis: int, u: ScoreVector) -> float:
    """Score-weighted marginal mean: sum of u_j * P(X_axis = j)."""
    if u.r != p.r:
        raise ValueError("score length must match the number of categories")
    return float(u.u @ marginal_dist(p, axis))
