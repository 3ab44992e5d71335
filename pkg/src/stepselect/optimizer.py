"""Fitting: global DE over the monotone cone, coordinate Newton, RE null fit.

The monotone fit maximizes the selection log-likelihood over

    {1 = w_k >= w_{k-1} >= ... >= w_1 > 0,  theta real,  sigma2 >= 0}

with differential evolution (classic rand/1/bin).  The last weight is pinned
at 1 inside the parameterization, so the search vector is
(w_1 .. w_{k-1}, theta, sigma2) and monotonicity violations by mutated
trials are handled with a finite penalty sentinel instead of -infinity.
The engine is deterministic given the seed: one counter-based stream drives
initialization, index selection, crossover and jitter, and selection is a
sequential barrier per generation.

The unconstrained fit updates one coordinate at a time by damped Newton
steps (the stabler choice for this likelihood), and the random-effects fit
is a damped 2-D Newton on (theta, sigma2) under constant weights, used as
the null model by the selection test.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .likelihood import (
    PENALTY_SENTINEL,
    LogLikContext,
    h_matrix,
    log_likelihood,
    log_likelihood_batch,
)
from .model import (
    MONOTONE_NORMALIZATION,
    UNCONSTRAINED_NORMALIZATION,
    MetaDataset,
    StepWeights,
    build_groups,
)
from .stats_core import RngStream

__all__ = [
    "DEConfig",
    "FitResult",
    "PENALTY_SENTINEL",
    "de_maximize",
    "fit_monotone",
    "fit_unconstrained",
    "fit_random_effects",
    "WEIGHT_FLOOR",
]

# Lower edge of each weight coordinate's search interval.
WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class DEConfig:
    """Differential-evolution settings.

    population_size defaults to 10x the search dimension when left None.
    value_tolerance and stagnation_generations together define the stopping
    rule: stop once the best value has improved by less than the tolerance
    over that many consecutive generations.
    """

    population_size: Optional[int] = None
    differential_weight: float = 0.8
    crossover_rate: float = 0.9
    max_generations: int = 2000
    value_tolerance: float = 1e-8
    stagnation_generations: int = 200
    seed: int = 0
    bounds: Optional[tuple] = None

    def __post_init__(self):
        if self.population_size is not None and self.population_size < 4:
            raise ValueError("population_size must be >= 4")
        if not (0.0 < self.differential_weight <= 2.0):
            raise ValueError("differential_weight must lie in (0, 2]")
        if not (0.0 <= self.crossover_rate <= 1.0):
            raise ValueError("crossover_rate must lie in [0, 1]")
        if self.max_generations < 1:
            raise ValueError("max_generations must be >= 1")
        if self.value_tolerance <= 0.0:
            raise ValueError("value_tolerance must be > 0")
        if self.stagnation_generations < 1:
            raise ValueError("stagnation_generations must be >= 1")


@dataclass(frozen=True)
class FitResult:
    """A fitted model: weights, theta, sigma2, and bookkeeping."""

    weights: StepWeights
    theta: float
    sigma2: float
    loglik: float
    converged: bool
    generations_used: int
    method: str
    diagnostics: dict = field(default_factory=dict, repr=False)


def _distinct_triples(rng: np.random.Generator, m: int) -> np.ndarray:
    """(m, 3) indices, each row three distinct values != its own row index."""
    rows = np.arange(m)
    r = rng.integers(0, m - 1, size=(m, 3))
    r += r >= rows[:, None]
    bad = (r[:, 0] == r[:, 1]) | (r[:, 0] == r[:, 2]) | (r[:, 1] == r[:, 2])
    while bad.any():
        fresh = rng.integers(0, m - 1, size=(int(bad.sum()), 3))
        fresh += fresh >= rows[bad, None]
        r[bad] = fresh
        bad = (r[:, 0] == r[:, 1]) | (r[:, 0] == r[:, 2]) | (r[:, 1] == r[:, 2])
    return r


def de_maximize(objective, config: DEConfig, constraint=None, *,
                batch_objective=None, init_transform=None, repair=None):
    """Maximize an objective over a box by rand/1/bin differential evolution.

    Parameters
    ----------
    objective : callable or None
        Maps a parameter vector (d,) to a real value (or the penalty
        sentinel).  May be None when batch_objective is given.
    config : DEConfig
        Must carry finite per-coordinate bounds.
    constraint : callable, optional
        Vectorised feasibility predicate: takes an (m, d) array, returns a
        boolean mask of length m.  Infeasible candidates receive the penalty
        sentinel and can never displace a feasible member.
    batch_objective : callable, optional
        Vectorised objective taking (m, d) and returning (m,); used instead
        of `objective` when provided (one call per generation).
    init_transform : callable, optional
        Applied once to the freshly drawn initial population (m, d) array;
        useful to start inside a constraint cone.  Result is clipped to the
        bounds.
    repair : callable, optional
        Projection applied to every generation's (m, d) trial array before
        evaluation (e.g. sorting coordinates onto a monotone cone).  Without
        it, a constraint that rejects almost every mutant would stall the
        search in high dimension.  Result is clipped to the bounds.

    Returns
    -------
    (x, value, diagnostics) : best point, its objective value, and a dict
        with generations, converged flag, evaluation count, feasible
        fraction and the best-value trace.
    """
    if config.bounds is None:
        raise ValueError("DEConfig.bounds must be set")
    if objective is None and batch_objective is None:
        raise ValueError("provide objective or batch_objective")
    bounds = np.asarray(config.bounds, dtype=float)
    if bounds.ndim != 2 or bounds.shape[1] != 2:
        raise ValueError("bounds must be a sequence of (low, high) pairs")
    lo, hi = bounds[:, 0].copy(), bounds[:, 1].copy()
    if np.any(~np.isfinite(lo)) or np.any(~np.isfinite(hi)) or np.any(lo > hi):
        raise ValueError("bounds must be finite with low <= high")
    d = lo.size
    m = config.population_size if config.population_size is not None else 10 * d
    m = max(int(m), 4)
    width = hi - lo

    def evaluate(X: np.ndarray) -> np.ndarray:
        vals = np.full(X.shape[0], PENALTY_SENTINEL)
        feas = np.ones(X.shape[0], dtype=bool)
        if constraint is not None:
            feas = np.asarray(constraint(X), dtype=bool)
        if feas.any():
            Xf = X[feas]
            if batch_objective is not None:
                out = np.asarray(batch_objective(Xf), dtype=float)
            else:
                out = np.array([float(objective(row)) for row in Xf])
            vals[feas] = np.where(np.isfinite(out), out, PENALTY_SENTINEL)
        return vals

    rng = RngStream(config.seed, 0).generator()
    pop = lo + rng.random((m, d)) * width
    if init_transform is not None:
        pop = np.clip(np.asarray(init_transform(pop), dtype=float), lo, hi)
    vals = evaluate(pop)
    n_evaluations = m

    f_weight = config.differential_weight
    cr = config.crossover_rate
    trace = [float(vals.max())]
    converged = False
    generations = 0
    for gen in range(1, config.max_generations + 1):
        generations = gen
        r = _distinct_triples(rng, m)
        mutant = pop[r[:, 0]] + f_weight * (pop[r[:, 1]] - pop[r[:, 2]])
        # reflect into the box, then uniform jitter for anything still out
        mutant = np.where(mutant < lo, 2.0 * lo - mutant, mutant)
        mutant = np.where(mutant > hi, 2.0 * hi - mutant, mutant)
        jitter = lo + rng.random((m, d)) * width
        still_out = (mutant < lo) | (mutant > hi)
        mutant = np.where(still_out, jitter, mutant)

        cross = rng.random((m, d)) < cr
        cross[np.arange(m), rng.integers(0, d, size=m)] = True
        trial = np.where(cross, mutant, pop)
        if repair is not None:
            trial = np.clip(np.asarray(repair(trial), dtype=float), lo, hi)

        tvals = evaluate(trial)
        n_evaluations += m
        accept = tvals >= vals
        pop[accept] = trial[accept]
        vals[accept] = tvals[accept]

        trace.append(float(vals.max()))
        s = config.stagnation_generations
        if gen >= s and trace[-1] - trace[-1 - s] < config.value_tolerance:
            converged = True
            break

    best = int(np.argmax(vals))
    if vals[best] <= PENALTY_SENTINEL:
        raise RuntimeError("differential evolution found no feasible point")
    diagnostics = {
        "generations": generations,
        "converged": converged,
        "n_evaluations": n_evaluations,
        "feasible_fraction": float(np.mean(vals > PENALTY_SENTINEL)),
        "best_trace": np.asarray(trace),
        "population_size": m,
    }
    return pop[best].copy(), float(vals[best]), diagnostics


def _search_box(ctx: LogLikContext):
    """Bounds for theta and sigma2 derived from the data scale."""
    y = ctx.y
    var_y = float(np.var(y, ddof=1))
    mom_sigma2 = max(0.0, var_y - float(np.mean(ctx.u2)))
    eta_tilde = np.sqrt(ctx.u2 + mom_sigma2)
    span = 3.0 * float(np.max(eta_tilde))
    theta_bounds = (float(np.min(y)) - span, float(np.max(y)) + span)
    sigma2_bounds = (0.0, 10.0 * var_y)
    return theta_bounds, sigma2_bounds


def _monotone_pieces(ctx: LogLikContext):
    """Constraint, batched objective, init and repair for the cone search.

    Feasibility is enforced by projection: sorting the weight block maps any
    trial onto the monotone cone.  Plain rejection would stall for large k,
    where almost no mutant of sorted parents is itself sorted.  The
    constraint mask stays on as a cheap invariant check.
    """
    k = ctx.k

    def constraint(X: np.ndarray) -> np.ndarray:
        return np.all(np.diff(X[:, : k - 1], axis=1) >= 0.0, axis=1)

    def batch_objective(X: np.ndarray) -> np.ndarray:
        mm = X.shape[0]
        W = np.empty((mm, k))
        W[:, : k - 1] = X[:, : k - 1]
        W[:, k - 1] = 1.0
        return log_likelihood_batch(ctx, W, X[:, k - 1], X[:, k])

    def sort_weight_block(X: np.ndarray) -> np.ndarray:
        X[:, : k - 1] = np.sort(X[:, : k - 1], axis=1)
        return X

    return constraint, batch_objective, sort_weight_block


def fit_monotone(data: MetaDataset, lambda1: float = 2.0,
                 config: Optional[DEConfig] = None) -> FitResult:
    """Global fit of the monotone step-weight selection model.

    Searches (w_1 .. w_{k-1}, theta, sigma2) with w_k pinned at 1; the
    returned weights satisfy 1 = w_k >= ... >= w_1 >= 1e-12 exactly.
    """
    groups = build_groups(data, lambda1)
    ctx = LogLikContext.from_data(data, groups)
    k = ctx.k
    theta_bounds, sigma2_bounds = _search_box(ctx)
    bounds = tuple([(WEIGHT_FLOOR, 1.0)] * (k - 1) + [theta_bounds, sigma2_bounds])
    if config is None:
        config = DEConfig()
    config = replace(config, bounds=bounds)

    constraint, batch_objective, sort_block = _monotone_pieces(ctx)
    x, _, diag = de_maximize(None, config, constraint=constraint,
                             batch_objective=batch_objective,
                             init_transform=sort_block, repair=sort_block)

    w = np.empty(k)
    w[: k - 1] = x[: k - 1]
    w[k - 1] = 1.0
    theta = float(x[k - 1])
    sigma2 = float(x[k])
    loglik = log_likelihood(ctx, w, theta, sigma2)
    return FitResult(
        weights=StepWeights(w, MONOTONE_NORMALIZATION),
        theta=theta,
        sigma2=sigma2,
        loglik=loglik,
        converged=bool(diag["converged"]),
        generations_used=int(diag["generations"]),
        method="monotone_de",
        diagnostics=diag,
    )


def _re_loglik(y: np.ndarray, u2: np.ndarray, theta: float, sigma2: float) -> float:
    eta2 = u2 + sigma2
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * eta2) + (y - theta) ** 2 / eta2))


def fit_random_effects(data: MetaDataset) -> FitResult:
    """Maximum likelihood under constant weights: the no-selection null.

    Damped 2-D Newton on (theta, sigma2) with projection onto sigma2 >= 0.
    """
    y, u = data.y, data.u
    u2 = np.square(u)
    n = data.n

    inv_u2 = 1.0 / u2
    theta = float(np.sum(y * inv_u2) / np.sum(inv_u2))
    sigma2 = max(0.0, float(np.var(y, ddof=1)) - float(np.mean(u2)))
    cur = _re_loglik(y, u2, theta, sigma2)

    converged = False
    iterations = 0
    for iterations in range(1, 501):
        eta2 = u2 + sigma2
        r = y - theta
        g_t = np.sum(r / eta2)
        g_s = -0.5 * np.sum(1.0 / eta2) + 0.5 * np.sum(r**2 / eta2**2)
        # projected gradient: at the sigma2 = 0 boundary a negative
        # sigma2-gradient is inactive
        g_s_eff = g_s if (sigma2 > 0.0 or g_s > 0.0) else 0.0
        if max(abs(g_t), abs(g_s_eff)) < 1e-11:
            converged = True
            break

        h_tt = -np.sum(1.0 / eta2)
        h_ts = -np.sum(r / eta2**2)
        h_ss = 0.5 * np.sum(1.0 / eta2**2) - np.sum(r**2 / eta2**3)
        det = h_tt * h_ss - h_ts * h_ts
        if det > 0.0 and h_tt < 0.0:
            d_t = -(h_ss * g_t - h_ts * g_s) / det
            d_s = -(h_tt * g_s - h_ts * g_t) / det
        else:
            # fall back to a scaled ascent step when the Hessian is not
            # negative definite
            d_t = g_t / np.sum(1.0 / eta2)
            d_s = g_s / max(abs(h_ss), 1e-8)

        step = 1.0
        improved = False
        for _ in range(60):
            cand_t = theta + step * d_t
            cand_s = max(0.0, sigma2 + step * d_s)
            cand_ll = _re_loglik(y, u2, cand_t, cand_s)
            if cand_ll > cur - 1e-15:
                theta, sigma2, cur = cand_t, cand_s, cand_ll
                improved = True
                break
            step *= 0.5
        if not improved:
            converged = max(abs(g_t), abs(g_s_eff)) < 1e-6
            break

    k = n // 2 + 1
    weights = StepWeights(np.ones(k), MONOTONE_NORMALIZATION)
    loglik = _re_loglik(y, u2, theta, sigma2)
    return FitResult(
        weights=weights,
        theta=float(theta),
        sigma2=float(sigma2),
        loglik=loglik,
        converged=converged,
        generations_used=iterations,
        method="random_effects",
        diagnostics={"iterations": iterations},
    )


def _newton_coordinate_update(x, idx, d1, d2, lo, hi, fun, cur):
    """One damped Newton move on coordinate idx; halve until in-bounds and
    improving.  Returns (x, value, moved)."""
    if not (np.isfinite(d1) and np.isfinite(d2)):
        return x, cur, False
    if d2 < 0.0:
        delta = -d1 / d2
    else:
        # non-concave slice: take a bounded ascent step
        delta = math.copysign(0.1 * (1.0 + abs(x[idx])), d1)
    if delta == 0.0:
        return x, cur, False
    for _ in range(60):
        cand = x[idx] + delta
        if lo <= cand <= hi:
            x_new = x.copy()
            x_new[idx] = cand
            val = fun(x_new)
            if val > cur:
                return x_new, val, True
        delta *= 0.5
    return x, cur, False


def fit_unconstrained(data: MetaDataset, lambda1: float = 2.0, tol: float = 1e-8,
                      x0: Optional[np.ndarray] = None,
                      max_cycles: int = 10_000) -> FitResult:
    """One-coordinate-at-a-time Newton fit without the monotonicity cone.

    The overall weight scale is not identified (the scaling identity), so
    the customary normalization is built into the parametrization: the
    weight of the largest-p group is pinned at 1 and the free coordinates
    are (w_2 .. w_k, theta, sigma2), cycled until the log-likelihood gain
    of a full cycle drops below ``tol``.  Weight coordinates use analytic
    slice derivatives; theta and sigma2 use central finite differences.
    """
    groups = build_groups(data, lambda1)
    ctx = LogLikContext.from_data(data, groups)
    k = ctx.k
    lam = ctx.lam
    theta_bounds, sigma2_bounds = _search_box(ctx)

    lo = np.concatenate([np.full(k, WEIGHT_FLOOR), [theta_bounds[0]], [sigma2_bounds[0]]])
    hi = np.concatenate([np.full(k, 1e8), [theta_bounds[1]], [sigma2_bounds[1]]])
    lo[0] = hi[0] = 1.0  # the normalization pin; never updated

    if x0 is None:
        null = fit_random_effects(data)
        x = np.concatenate([np.ones(k),
                            [np.clip(null.theta, *theta_bounds)],
                            [np.clip(null.sigma2, *sigma2_bounds)]])
    else:
        x = np.asarray(x0, dtype=float).copy()
        if x.shape != (k + 2,):
            raise ValueError(f"x0 must have shape ({k + 2},)")
        if not (np.all(np.isfinite(x[:k])) and np.all(x[:k] > 0.0)):
            raise ValueError("x0 weights must be finite and positive")
        x[:k] /= x[0]  # bring the start onto the pinned-scale section
        x = np.clip(x, lo, hi)

    def fun(vec: np.ndarray) -> float:
        return log_likelihood(ctx, vec[:k], float(vec[k]), float(vec[k + 1]))

    cur = fun(x)
    converged = False
    cycles = 0
    for cycles in range(1, max_cycles + 1):
        before = cur
        H = h_matrix(ctx, float(x[k]), float(x[k + 1]))
        for j in range(1, k):  # j = 0 is the normalization pin
            A = H @ x[:k]
            ratio = H[:, j] / A
            d1 = lam[j] / x[j] - np.sum(ratio)
            d2 = -lam[j] / x[j] ** 2 + np.sum(ratio**2)
            x, cur, _ = _newton_coordinate_update(x, j, d1, d2, lo[j], hi[j], fun, cur)
        for idx in (k, k + 1):
            h = 1e-5 * (1.0 + abs(x[idx]))
            xp, xm = x.copy(), x.copy()
            xp[idx] = min(x[idx] + h, hi[idx])
            xm[idx] = max(x[idx] - h, lo[idx])
            span = xp[idx] - xm[idx]
            if span <= 0.0:
                continue
            fp, fm = fun(xp), fun(xm)
            d1 = (fp - fm) / span
            d2 = (fp - 2.0 * cur + fm) / (0.5 * span) ** 2
            x, cur, _ = _newton_coordinate_update(x, idx, d1, d2, lo[idx], hi[idx], fun, cur)
        if cur - before < tol:
            converged = True
            break

    w = x[:k]  # already on the reporting scale: first weight pinned at 1
    theta = float(x[k])
    sigma2 = float(x[k + 1])
    loglik = log_likelihood(ctx, w, theta, sigma2)
    return FitResult(
        weights=StepWeights(w, UNCONSTRAINED_NORMALIZATION),
        theta=theta,
        sigma2=sigma2,
        loglik=loglik,
        converged=converged,
        generations_used=cycles,
        method="unconstrained_coordinate",
        diagnostics={"cycles": cycles},
    )
