"""Domain types: studies, p-value ordering, and the paired weight groups.

A dataset is a list of (label, y, u) studies with y the observed effect and
u its known sampling standard error.  Two-sided p-values are always computed
internally from (y, u); callers never supply p-values, so the signs of the
effects stay consistent with the p-values used for grouping.

Grouping: p-values are sorted decreasingly (p_1 largest ... p_n smallest)
and adjacent pairs share a weight, giving k = floor(n/2) + 1 weight groups.
Group j covers the half-open p-interval (p_{2j}, p_{2j-2}] with the
conventions p_0 = 1 and p_{2k} = 0, so group 1 holds the single largest
p-value, interior groups hold two p-values each, and the last group holds
one p-value when n is even and two when n is odd.  The multiplicity of
group 1 is raised to lambda1 (default 2), which fixes the arbitrary scale
of the weight vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .stats_core import norm_cdf

__all__ = [
    "Study",
    "MetaDataset",
    "GroupedPvalues",
    "StepWeights",
    "ModelParams",
    "two_sided_pvalue",
    "ties_and_ordering",
    "build_groups",
    "weight_at_p",
    "MONOTONE_NORMALIZATION",
    "UNCONSTRAINED_NORMALIZATION",
]

# Normalization conventions for reported weight vectors.
MONOTONE_NORMALIZATION = "smallest_p_group_is_one"
UNCONSTRAINED_NORMALIZATION = "largest_p_group_is_one"


@dataclass(frozen=True)
class Study:
    """One study: label, effect estimate y, known sampling SE u > 0."""

    label: str
    y: float
    u: float

    def __post_init__(self):
        if not np.isfinite(self.y):
            raise ValueError(f"study {self.label!r}: effect y must be finite")
        if not (np.isfinite(self.u) and self.u > 0.0):
            raise ValueError(f"study {self.label!r}: standard error u must be finite and > 0")


@dataclass(frozen=True)
class MetaDataset:
    """Ordered collection of studies (input order is preserved)."""

    studies: tuple

    def __post_init__(self):
        object.__setattr__(self, "studies", tuple(self.studies))
        if len(self.studies) < 2:
            raise ValueError("a dataset needs at least 2 studies")

    @classmethod
    def from_arrays(cls, labels: Iterable[str], y: Iterable[float], u: Iterable[float]) -> "MetaDataset":
        return cls(tuple(Study(str(l), float(a), float(b)) for l, a, b in zip(labels, y, u)))

    @property
    def n(self) -> int:
        return len(self.studies)

    @property
    def y(self) -> np.ndarray:
        return np.array([s.y for s in self.studies], dtype=float)

    @property
    def u(self) -> np.ndarray:
        return np.array([s.u for s in self.studies], dtype=float)

    @property
    def labels(self) -> tuple:
        return tuple(s.label for s in self.studies)


def two_sided_pvalue(y, u):
    """Two-sided p-value 2*Phi(-|y|/u) of a z-test of zero effect.

    Lies in (0, 1]; equals 1 at y = 0 and decreases in |y|/u.
    """
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0) or np.any(~np.isfinite(u)):
        raise ValueError("standard error u must be finite and > 0")
    # Floor at 1e-300: the CDF underflows to 0 near |y|/u ~ 38, but the
    # documented range is the half-open (0, 1].
    out = np.maximum(2.0 * norm_cdf(-np.abs(y) / u), 1e-300)
    return float(out) if np.ndim(out) == 0 else out


def ties_and_ordering(data: MetaDataset) -> np.ndarray:
    """Indices of the studies sorted by decreasing p-value.

    Ties are broken by larger u first, then by input order, so the ordering
    (and everything downstream of it) is deterministic.
    """
    p = two_sided_pvalue(data.y, data.u)
    u = data.u
    order = sorted(range(data.n), key=lambda i: (-p[i], -u[i], i))
    return np.array(order, dtype=int)


@dataclass(frozen=True)
class GroupedPvalues:
    """Decreasingly ordered p-values paired into k weight groups.

    Attributes
    ----------
    order : permutation mapping sorted position m (0-based) to study index
    p_desc : p-values in decreasing order, length n
    group_of_study : for each study (input order) its group j in 1..k
    k : number of groups, floor(n/2) + 1
    lam : group multiplicities (lambda1, 2, ..., 2, 1 + [n odd])
    zcuts : |y|/u thresholds separating groups, length k+1, zcuts[0] = 0,
        zcuts[k] = +inf; zcuts[j] belongs to the study with the (2j)-th
        largest p-value
    pcuts : the same cuts on the p scale, length k+1, decreasing from
        pcuts[0] = 1 to pcuts[k] = 0; group j covers (pcuts[j], pcuts[j-1]]
    boundaries : (n, k+1) matrix of y-scale cut points b[i, j] = u_i * zcuts[j]
    lambda1 : multiplicity assigned to group 1
    """

    order: np.ndarray
    p_desc: np.ndarray
    group_of_study: np.ndarray
    k: int
    lam: np.ndarray
    zcuts: np.ndarray
    pcuts: np.ndarray
    boundaries: np.ndarray
    lambda1: float


def build_groups(data: MetaDataset, lambda1: float = 2.0) -> GroupedPvalues:
    """Sort p-values decreasingly and pair them into weight groups.

    Requires n >= 3.  lambda1 is the multiplicity given to the top group
    (its actual member count is 1); it must exceed 1 for the weight-scale
    normalization argument to apply.
    """
    n = data.n
    if n < 3:
        raise ValueError("grouping requires at least 3 studies (n >= 3)")
    lambda1 = float(lambda1)
    if not (np.isfinite(lambda1) and lambda1 > 1.0):
        raise ValueError("lambda1 must be finite and > 1")

    order = ties_and_ordering(data)
    y, u = data.y, data.u
    p_all = two_sided_pvalue(y, u)
    p_desc = p_all[order]

    k = n // 2 + 1
    lam = np.full(k, 2.0)
    lam[0] = lambda1
    lam[-1] = 1.0 + (n % 2)  # one member when n even, two when n odd

    # Sorted position m (1-based) belongs to group 1 + floor(m/2).
    group_at_position = 1 + (np.arange(1, n + 1) // 2)
    group_of_study = np.empty(n, dtype=int)
    group_of_study[order] = group_at_position

    # Cuts between groups: the study carrying the (2j)-th largest p-value
    # marks the border of groups j and j+1, on the |y|/u scale and exactly
    # at its own p-value on the p scale.
    zcuts = np.empty(k + 1)
    pcuts = np.empty(k + 1)
    zcuts[0], pcuts[0] = 0.0, 1.0
    zcuts[k], pcuts[k] = np.inf, 0.0
    for j in range(1, k):
        idx = order[2 * j - 1]  # 0-based position of the (2j)-th ordered p
        zcuts[j] = abs(y[idx]) / u[idx]
        pcuts[j] = p_all[idx]

    boundaries = np.outer(u, zcuts)

    return GroupedPvalues(
        order=order,
        p_desc=p_desc,
        group_of_study=group_of_study,
        k=k,
        lam=lam,
        zcuts=zcuts,
        pcuts=pcuts,
        boundaries=boundaries,
        lambda1=lambda1,
    )


@dataclass(frozen=True)
class StepWeights:
    """Weight vector of length k plus its normalization convention.

    Under the monotone convention (``smallest_p_group_is_one``) the vector is
    non-decreasing with the last entry pinned at 1, i.e. the weight function
    is non-increasing in p.  Under the unconstrained reporting convention
    (``largest_p_group_is_one``) the first entry is 1; the profile need not
    be monotone, so other entries may exceed 1 after that rescaling.
    """

    w: np.ndarray
    normalization: str

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        object.__setattr__(self, "w", w)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must form a non-empty vector")
        if np.any(~np.isfinite(w)) or np.any(w <= 0.0):
            raise ValueError("weights must be finite and positive")
        if self.normalization == MONOTONE_NORMALIZATION:
            if w[-1] != 1.0:
                raise ValueError("monotone convention requires the last weight to equal 1")
            if np.any(np.diff(w) < 0.0):
                raise ValueError("monotone convention requires non-decreasing weights")
            if np.any(w > 1.0):
                raise ValueError("monotone convention requires weights in (0, 1]")
        elif self.normalization == UNCONSTRAINED_NORMALIZATION:
            if w[0] != 1.0:
                raise ValueError("unconstrained convention requires the first weight to equal 1")
        else:
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def k(self) -> int:
        return self.w.size


@dataclass(frozen=True)
class ModelParams:
    """Pooled effect theta and between-study variance sigma2 >= 0."""

    theta: float
    sigma2: float

    def __post_init__(self):
        if not np.isfinite(self.theta):
            raise ValueError("theta must be finite")
        if not (np.isfinite(self.sigma2) and self.sigma2 >= 0.0):
            raise ValueError("sigma2 must be finite and >= 0")

    def eta(self, u) -> np.ndarray:
        """Total standard deviation sqrt(u^2 + sigma2) per study."""
        return np.sqrt(np.square(np.asarray(u, dtype=float)) + self.sigma2)


def weight_at_p(w, g: GroupedPvalues, p: float) -> float:
    """Evaluate the step weight function at p in [0, 1].

    The function is a left-continuous step in p: group j's value applies on
    (pcuts[j], pcuts[j-1]], and the limit value at p = 0 is the last group's
    weight.
    """
    if not (0.0 <= p <= 1.0):
        raise ValueError("p must lie in [0, 1]")
    wv = np.asarray(getattr(w, "w", w), dtype=float)
    if wv.size != g.k:
        raise ValueError("weight vector length must equal the number of groups")
    for j in range(1, g.k + 1):
        if p > g.pcuts[j]:
            return float(wv[j - 1])
    return float(wv[g.k - 1])  # p == 0: limit from the right
