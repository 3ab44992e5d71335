"""Weighted log-likelihood of the step-weight selection model.

For study i with effect y_i, sampling SE u_i and total variance
eta_i^2 = u_i^2 + sigma2, the model density of y_i is the N(theta, eta_i^2)
density multiplied by the step weight of its two-sided p-value and divided
by a normalizing constant A_i.  Because the weight is constant on p-groups,
A_i decomposes as sum_j w_j * H_ij where H_ij is the normal probability mass
of the pair of symmetric y-intervals that group j occupies for study i:

    H_ij = [Phi((b_ij - theta)/eta_i) - Phi((a_ij - theta)/eta_i)]
         + [Phi((-a_ij - theta)/eta_i) - Phi((-b_ij - theta)/eta_i)]

with a_ij < b_ij the study's y-scale cut points for group j (a_i1 = 0 for
the first group and b_ik = +inf for the last, so each H-row sums to 1).

The full log-likelihood is

    l(w, theta, sigma2) = -(n/2) log 2*pi + sum_j lam_j log w_j
        - sum_i log eta_i - (1/2) sum_i ((y_i - theta)/eta_i)^2
        - sum_i log A_i.

Nonpositive weights make the model meaningless; the evaluator then returns
a large negative penalty value (never NaN) so population-based optimizers
can treat infeasibility uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .model import GroupedPvalues, MetaDataset, build_groups

__all__ = [
    "PENALTY_SENTINEL",
    "LogLikContext",
    "h_matrix",
    "normalizing_constants",
    "log_likelihood",
    "log_likelihood_batch",
    "coercivity_probe",
    "CoercivityReport",
]

# Finite stand-in for "-infinity" on infeasible points; strictly below any
# attainable log-likelihood on the bounded search boxes used by the fitters.
PENALTY_SENTINEL = -1e15


@dataclass(frozen=True)
class LogLikContext:
    """Immutable per-dataset arrays needed to evaluate the log-likelihood."""

    data: MetaDataset
    groups: GroupedPvalues
    y: np.ndarray
    u: np.ndarray
    u2: np.ndarray
    bcuts: np.ndarray  # (n, k+1) y-scale cut points, last column +inf
    lam: np.ndarray
    n: int
    k: int

    @classmethod
    def from_data(cls, data: MetaDataset, groups: GroupedPvalues | None = None,
                  lambda1: float = 2.0) -> "LogLikContext":
        if groups is None:
            groups = build_groups(data, lambda1)
        y, u = data.y, data.u
        return cls(
            data=data,
            groups=groups,
            y=y,
            u=u,
            u2=np.square(u),
            bcuts=groups.boundaries,
            lam=groups.lam,
            n=data.n,
            k=groups.k,
        )


def h_matrix(ctx: LogLikContext, theta: float, sigma2: float) -> np.ndarray:
    """(n, k) matrix of group probabilities under N(theta, u_i^2 + sigma2).

    Row i gives, for each group j, the probability that a draw from the
    study's marginal normal lands in group j's pair of symmetric
    y-intervals.  Rows sum to 1.
    """
    if sigma2 < 0.0:
        raise ValueError("sigma2 must be >= 0")
    eta = np.sqrt(ctx.u2 + sigma2)[:, None]
    dpos = ndtr((ctx.bcuts - theta) / eta)
    dneg = ndtr((-ctx.bcuts - theta) / eta)
    return (dpos[:, 1:] - dpos[:, :-1]) + (dneg[:, :-1] - dneg[:, 1:])


def normalizing_constants(H: np.ndarray, w) -> np.ndarray:
    """A_i = sum_j w_j H_ij for each study row of H.

    All weights must be positive; A_i = 1 when w is identically 1.
    """
    wv = np.asarray(getattr(w, "w", w), dtype=float)
    if np.any(wv <= 0.0) or np.any(~np.isfinite(wv)):
        raise ValueError("all weights must be positive and finite")
    return H @ wv


def log_likelihood(ctx: LogLikContext, w, theta: float, sigma2: float) -> float:
    """Evaluate l(w, theta, sigma2); penalty sentinel on nonpositive weights."""
    if not np.isfinite(theta):
        raise ValueError("theta must be finite")
    if not (np.isfinite(sigma2) and sigma2 >= 0.0):
        raise ValueError("sigma2 must be finite and >= 0")
    wv = np.asarray(getattr(w, "w", w), dtype=float)
    if wv.shape != (ctx.k,):
        raise ValueError(f"expected {ctx.k} weights, got shape {wv.shape}")
    if np.any(~np.isfinite(wv)) or np.any(wv <= 0.0):
        return PENALTY_SENTINEL

    eta2 = ctx.u2 + sigma2
    H = h_matrix(ctx, theta, sigma2)
    A = H @ wv
    if np.any(A <= 0.0) or np.any(~np.isfinite(A)):
        return PENALTY_SENTINEL
    resid = (ctx.y - theta) ** 2 / eta2
    return float(
        -0.5 * ctx.n * np.log(2.0 * np.pi)
        + ctx.lam @ np.log(wv)
        - 0.5 * np.sum(np.log(eta2))
        - 0.5 * np.sum(resid)
        - np.sum(np.log(A))
    )


def log_likelihood_batch(ctx: LogLikContext, W: np.ndarray, theta: np.ndarray,
                         sigma2: np.ndarray) -> np.ndarray:
    """Vectorised l over a population: W (m, k), theta (m,), sigma2 (m,).

    One call evaluates a whole optimizer generation; rows with nonpositive
    weights or a degenerate normalizing constant get the penalty sentinel.
    """
    W = np.asarray(W, dtype=float)
    theta = np.asarray(theta, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    m = W.shape[0]
    if W.shape != (m, ctx.k) or theta.shape != (m,) or sigma2.shape != (m,):
        raise ValueError("inconsistent batch shapes")

    eta2 = ctx.u2[None, :] + sigma2[:, None]               # (m, n)
    inv_eta = 1.0 / np.sqrt(eta2)
    z = ctx.bcuts[None, :, :] * inv_eta[:, :, None]        # (m, n, k+1), inf kept
    shift = theta[:, None] * inv_eta                       # (m, n)
    dpos = ndtr(z - shift[:, :, None])
    dneg = ndtr(-z - shift[:, :, None])
    H = (dpos[:, :, 1:] - dpos[:, :, :-1]) + (dneg[:, :, :-1] - dneg[:, :, 1:])
    A = np.einsum("mnk,mk->mn", H, W)

    bad_w = np.any(~np.isfinite(W) | (W <= 0.0), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logw_term = np.where(bad_w[:, None], 0.0, np.log(np.where(W > 0.0, W, 1.0))) @ ctx.lam
        logA = np.log(np.where(A > 0.0, A, 1.0))
    bad_A = np.any((A <= 0.0) | ~np.isfinite(A), axis=1)

    resid = np.sum((ctx.y[None, :] - theta[:, None]) ** 2 / eta2, axis=1)
    ll = (
        -0.5 * ctx.n * np.log(2.0 * np.pi)
        + logw_term
        - 0.5 * np.sum(np.log(eta2), axis=1)
        - 0.5 * resid
        - np.sum(logA, axis=1)
    )
    ll[bad_w | bad_A] = PENALTY_SENTINEL
    return ll


@dataclass(frozen=True)
class CoercivityReport:
    """Log-likelihood values along a parameter ray, plus a tail verdict."""

    ts: np.ndarray
    values: np.ndarray
    eventually_decreasing: bool


def coercivity_probe(ctx: LogLikContext, ray, ts=None) -> CoercivityReport:
    """Evaluate l along a ray ``t -> (w, theta, sigma2)`` of growing t.

    ``ray`` maps a positive scalar to a parameter triple; ts defaults to a
    geometric grid.  The report flags whether the values decrease strictly
    over the tail of the grid, which is the behaviour a coercive likelihood
    must show when the ray escapes the feasible region (norm to infinity or
    a non-last weight to zero).
    """
    if ts is None:
        ts = np.geomspace(1.0, 1e8, 17)
    ts = np.asarray(ts, dtype=float)
    values = np.empty(ts.size)
    for idx, t in enumerate(ts):
        w, theta, sigma2 = ray(float(t))
        values[idx] = log_likelihood(ctx, w, theta, sigma2)
    tail = values[-5:]
    eventually_decreasing = bool(np.all(np.diff(tail) < 0.0))
    return CoercivityReport(ts=ts, values=values, eventually_decreasing=eventually_decreasing)
