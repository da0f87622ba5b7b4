"""Permutations of ordered vectors, orbit averaging, and equivariance checks.

A permutation is stored as an index array ``mapping``: the element at
position ``i`` moves to position ``mapping[i]``. Records may be scalars or
rows of any width; the permutation acts on the leading axis.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

MAX_EXHAUSTIVE = 6


@dataclass(frozen=True)
class PermutationOp:
    mapping: tuple

    def __post_init__(self):
        m = tuple(int(i) for i in self.mapping)
        if sorted(m) != list(range(len(m))):
            raise ValueError(f"mapping {m} is not a bijection on 0..{len(m) - 1}")
        object.__setattr__(self, "mapping", m)

    @property
    def n(self) -> int:
        return len(self.mapping)

    @classmethod
    def identity(cls, n: int) -> "PermutationOp":
        return cls(tuple(range(n)))

    @classmethod
    def swap(cls, n: int, i: int, j: int) -> "PermutationOp":
        m = list(range(n))
        m[i], m[j] = m[j], m[i]
        return cls(tuple(m))

    def inverse(self) -> "PermutationOp":
        inv = [0] * self.n
        for i, target in enumerate(self.mapping):
            inv[target] = i
        return PermutationOp(tuple(inv))

    def compose(self, other: "PermutationOp") -> "PermutationOp":
        """``self ∘ other``: apply ``other`` first."""
        return PermutationOp(tuple(self.mapping[other.mapping[i]] for i in range(self.n)))

    def gather_index(self) -> np.ndarray:
        """Index array ``g`` with ``apply_perm(v, self) == v[g]``."""
        return np.asarray(self.inverse().mapping, dtype=np.intp)

    def as_matrix(self) -> np.ndarray:
        """Permutation matrix ``P`` with ``P @ v == apply_perm(v, self)``."""
        P = np.zeros((self.n, self.n))
        P[list(self.mapping), list(range(self.n))] = 1.0
        return P


def apply_perm(v, rho: PermutationOp):
    """Return ``out`` with ``out[rho.mapping[i]] = v[i]``.

    Works for numpy arrays (leading axis) and plain sequences.
    """
    if len(v) != rho.n:
        raise ValueError(f"vector of length {len(v)} cannot be permuted by a {rho.n}-permutation")
    if isinstance(v, np.ndarray):
        return v[rho.gather_index()]
    out = [None] * rho.n
    for i, target in enumerate(rho.mapping):
        out[target] = v[i]
    return type(v)(out) if isinstance(v, (list, tuple)) else out


def all_perms(n: int) -> list[PermutationOp]:
    if n > MAX_EXHAUSTIVE:
        raise ValueError(f"refusing to enumerate {n}! permutations (limit n <= {MAX_EXHAUSTIVE})")
    if n < 1:
        raise ValueError("n must be >= 1")
    return [PermutationOp(p) for p in itertools.permutations(range(n))]


def random_perms(n: int, count: int, rng: np.random.Generator) -> list[PermutationOp]:
    return [PermutationOp(tuple(rng.permutation(n))) for _ in range(count)]


def orbit_average(f: Callable[[np.ndarray], np.ndarray], n: int) -> Callable[[np.ndarray], np.ndarray]:
    """Symmetrize ``f`` into ``x -> (1/n!) sum_rho rho^-1 f(rho x)``."""
    perms = all_perms(n)

    def g(x):
        x = np.asarray(x, dtype=np.float64)
        acc = None
        for rho in perms:
            term = apply_perm(np.asarray(f(apply_perm(x, rho)), dtype=np.float64), rho.inverse())
            acc = term if acc is None else acc + term
        return acc / len(perms)

    return g


@dataclass
class EquivarianceReport:
    max_violation: float
    n_evaluations: int
    tol: float
    passed: bool


def check_equivariance(
    f: Callable[[np.ndarray], np.ndarray],
    inputs: Sequence[np.ndarray],
    kind: str = "pe",
    tol: float = 1e-9,
    perms: Sequence[PermutationOp] | None = None,
    max_random_perms: int = 64,
    seed: int = 0,
) -> EquivarianceReport:
    """Measure the worst permutation violation of ``f`` over ``inputs``.

    ``kind="pe"`` measures ``||f(rho x) - rho f(x)||_1``; ``kind="pi"``
    measures ``|f(rho x) - f(x)|``. All permutations are used when the
    entity count is at most 4, otherwise ``max_random_perms`` random ones
    (unless ``perms`` is given).
    """
    if kind not in ("pe", "pi"):
        raise ValueError(f"kind must be 'pe' or 'pi', got {kind!r}")
    worst = 0.0
    count = 0
    rng = np.random.default_rng(seed)
    for x in inputs:
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        if perms is not None:
            use = perms
        elif n <= 4:
            use = all_perms(n)
        else:
            use = random_perms(n, max_random_perms, rng)
        base = np.asarray(f(x), dtype=np.float64)
        for rho in use:
            out = np.asarray(f(apply_perm(x, rho)), dtype=np.float64)
            ref = apply_perm(base, rho) if kind == "pe" else base
            worst = max(worst, float(np.abs(out - ref).sum()))
            count += 1
    return EquivarianceReport(max_violation=worst, n_evaluations=count, tol=tol, passed=worst <= tol)


def sup_distance(f1, f2, inputs) -> float:
    """Sampled surrogate of ``max_x ||f1(x) - f2(x)||_1``."""
    return max(float(np.abs(np.asarray(f1(x)) - np.asarray(f2(x))).sum()) for x in inputs)

