"""Inference: p-value distribution family, profile CI, and selection test.

The two-sided p-value of a study with sampling SE u whose effect is drawn
from N(theta, eta^2), eta^2 = u^2 + sigma2, has the closed-form CDF

    F(p) = 1 - Phi((b - theta)/eta) + Phi((-b - theta)/eta),
    b = -u * Phi^{-1}(p/2),

whose density is (u / (2 eta)) * [phi((b - theta)/eta) + phi((-b - theta)/eta)]
/ phi(Phi^{-1}(p/2)).  Sampling goes through the effect scale (draw y, then
p = 2 Phi(-|y|/u)), which is exact and fast inside the replicate loop.

The selection test statistic is T = min of the fitted monotone weights.  The
test fits the no-selection null (constant weights), redraws each study's
effect from that null M times while keeping the observed u_i, refits the
monotone model per replicate, and reports the inclusive Monte-Carlo p-value
(1 + #{T_obs <= T_replicate}) / (1 + M).  One independent random stream per
replicate keeps the procedure reproducible and embarrassingly parallel.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .likelihood import LogLikContext, log_likelihood_batch
from .model import MetaDataset, build_groups, two_sided_pvalue
from .optimizer import (
    DEConfig,
    FitResult,
    WEIGHT_FLOOR,
    _search_box,
    de_maximize,
    fit_monotone,
    fit_random_effects,
)
from .stats_core import RngStream, chi2_quantile_1df, norm_cdf, norm_quantile

__all__ = [
    "PvalDensityParams",
    "ProfileCI",
    "SelectionTestResult",
    "pval_density",
    "pval_cdf",
    "pval_quantile",
    "sample_pvalue_and_sign",
    "profile_loglik",
    "profile_ci_theta",
    "selection_test",
]


@dataclass(frozen=True)
class PvalDensityParams:
    """Parameters of one study's p-value law: effect theta, SE u, variance sigma2."""

    theta: float
    u: float
    sigma2: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.u) and self.u > 0.0):
            raise ValueError("u must be finite and > 0")
        if not (np.isfinite(self.sigma2) and self.sigma2 >= 0.0):
            raise ValueError("sigma2 must be finite and >= 0")
        if not np.isfinite(self.theta):
            raise ValueError("theta must be finite")

    @property
    def eta(self) -> float:
        return float(np.sqrt(self.u**2 + self.sigma2))


def _check_open_unit(x, name: str):
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x <= 0.0) or np.any(x >= 1.0):
        raise ValueError(f"{name} must lie strictly inside (0, 1)")
    return x


def pval_density(p, params: PvalDensityParams, sigma_scaled: bool = False):
    """Density of the two-sided p-value under N(theta, u^2 + sigma2) effects.

    With ``sigma_scaled=True`` the between-study standard deviation replaces
    the sampling SE in the prefactor and inside the quantile arguments (an
    alternative convention kept for cross-checks).  The result is then the
    law of a p-value computed against scale sigma instead of u: it still
    integrates to one whenever sigma2 > 0, coincides with the default form
    exactly when sigma equals u, and collapses to zero at sigma2 = 0.
    """
    p = _check_open_unit(p, "p")
    q = norm_quantile(p / 2.0)  # <= 0
    eta = params.eta
    scale = float(np.sqrt(params.sigma2)) if sigma_scaled else params.u
    b = -scale * q
    z1 = (b - params.theta) / eta
    z2 = (-b - params.theta) / eta
    # phi(z)/phi(q) computed as exp((q^2 - z^2)/2) so extreme tails cannot
    # underflow to 0/0
    out = (scale / (2.0 * eta)) * (np.exp(0.5 * (q * q - z1 * z1))
                                   + np.exp(0.5 * (q * q - z2 * z2)))
    return float(out) if np.ndim(out) == 0 else out


def pval_cdf(p, params: PvalDensityParams):
    """Closed-form CDF of the two-sided p-value (see module docstring)."""
    p = _check_open_unit(p, "p")
    q = norm_quantile(p / 2.0)
    b = -params.u * q
    eta = params.eta
    out = 1.0 - norm_cdf((b - params.theta) / eta) + norm_cdf((-b - params.theta) / eta)
    return float(out) if np.ndim(out) == 0 else out


def pval_quantile(q, params: PvalDensityParams) -> float:
    """Invert the p-value CDF by bisection to 1e-10 absolute tolerance."""
    q = float(q)
    if not (0.0 < q < 1.0):
        raise ValueError("q must lie strictly inside (0, 1)")
    lo, hi = 0.0, 1.0
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if pval_cdf(mid, params) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_pvalue_and_sign(params: PvalDensityParams, rng, size: Optional[int] = None):
    """Draw (p, y): a p-value from its law plus a signed pseudo-effect.

    p is generated through the effect scale (exact): draw y0 from
    N(theta, eta^2) and set p = 2 Phi(-|y0|/u).  The returned y is
    y* = -u Phi^{-1}(p/2) when a fair coin lands 0 and 2*theta - y* when it
    lands 1.  ``rng`` may be an RngStream or a numpy Generator; pass ``size``
    for whole vectors.
    """
    g = rng.generator() if isinstance(rng, RngStream) else rng
    eta = params.eta
    y0 = params.theta + eta * g.standard_normal(size if size is not None else ())
    p = two_sided_pvalue(y0, params.u)
    y_star = -params.u * norm_quantile(np.asarray(p) / 2.0)
    flip = g.integers(0, 2, size=size if size is not None else ())
    y = np.where(flip == 1, 2.0 * params.theta - y_star, y_star)
    if size is None:
        return float(p), float(y)
    return np.asarray(p, dtype=float), np.asarray(y, dtype=float)


@dataclass(frozen=True)
class ProfileCI:
    """Profile-likelihood confidence interval for the pooled effect."""

    level: float
    lower: float
    upper: float
    theta_hat: float
    loglik_max: float
    cutoff: float
    lower_open: bool = False
    upper_open: bool = False
    profile_curve: Optional[tuple] = None


def _profile_value(ctx: LogLikContext, theta: float, config: DEConfig) -> float:
    """Max of the log-likelihood over (monotone w, sigma2) at fixed theta."""
    k = ctx.k
    _, sigma2_bounds = _search_box(ctx)
    bounds = tuple([(WEIGHT_FLOOR, 1.0)] * (k - 1) + [sigma2_bounds])
    cfg = replace(config, bounds=bounds)

    def constraint(X: np.ndarray) -> np.ndarray:
        return np.all(np.diff(X[:, : k - 1], axis=1) >= 0.0, axis=1)

    def batch_objective(X: np.ndarray) -> np.ndarray:
        m = X.shape[0]
        W = np.empty((m, k))
        W[:, : k - 1] = X[:, : k - 1]
        W[:, k - 1] = 1.0
        return log_likelihood_batch(ctx, W, np.full(m, theta), X[:, k - 1])

    def sort_block(X: np.ndarray) -> np.ndarray:
        X[:, : k - 1] = np.sort(X[:, : k - 1], axis=1)
        return X

    _, value, _ = de_maximize(None, cfg, constraint=constraint,
                              batch_objective=batch_objective,
                              init_transform=sort_block, repair=sort_block)
    return value


def profile_loglik(theta: float, data: MetaDataset, config: Optional[DEConfig] = None,
                   lambda1: float = 2.0) -> float:
    """Profile log-likelihood of theta: nuisance (w, sigma2) maximized out."""
    ctx = LogLikContext.from_data(data, lambda1=lambda1)
    return _profile_value(ctx, float(theta), config or DEConfig())


def profile_ci_theta(data: MetaDataset, level: float = 0.95,
                     config: Optional[DEConfig] = None, lambda1: float = 2.0,
                     fit: Optional[FitResult] = None) -> ProfileCI:
    """Confidence interval for theta from the profile likelihood-ratio.

    Endpoints solve 2*(l_p(theta_hat) - l_p(theta)) = chi-square-1df cutoff;
    each side brackets the crossing by doubling an outward step (at most 60
    doublings, else the side is reported open-ended), then bisects the
    bracket down to 1e-3 in theta.
    """
    if not (0.0 < level < 1.0):
        raise ValueError("level must lie strictly inside (0, 1)")
    config = config or DEConfig()
    ctx = LogLikContext.from_data(data, lambda1=lambda1)
    if fit is None:
        fit = fit_monotone(data, lambda1, config)
    theta_hat = fit.theta
    l_max = fit.loglik
    cutoff = chi2_quantile_1df(level)

    evaluated: list = []

    def excess(theta: float) -> float:
        lp = _profile_value(ctx, theta, config)
        evaluated.append((theta, lp))
        return 2.0 * (l_max - lp) - cutoff

    endpoints = []
    open_flags = []
    for side in (-1.0, 1.0):
        step = 0.1 * (1.0 + abs(theta_hat))
        inner = theta_hat
        outer = None
        for _ in range(60):
            cand = theta_hat + side * step
            if excess(cand) > 0.0:
                outer = cand
                break
            inner = cand
            step *= 2.0
        if outer is None:
            endpoints.append(-np.inf if side < 0 else np.inf)
            open_flags.append(True)
            continue
        while abs(outer - inner) > 1e-3:
            mid = 0.5 * (inner + outer)
            if excess(mid) > 0.0:
                outer = mid
            else:
                inner = mid
        endpoints.append(0.5 * (inner + outer))
        open_flags.append(False)

    curve = tuple(sorted(evaluated))
    return ProfileCI(
        level=level,
        lower=float(endpoints[0]),
        upper=float(endpoints[1]),
        theta_hat=theta_hat,
        loglik_max=l_max,
        cutoff=cutoff,
        lower_open=open_flags[0],
        upper_open=open_flags[1],
        profile_curve=curve,
    )


@dataclass(frozen=True)
class SelectionTestResult:
    """Monte-Carlo test of 'no selection' (constant weight function)."""

    T0: float
    replicate_stats: np.ndarray
    M: int
    p_value: float
    null_fit: FitResult
    observed_fit: FitResult
    seed: int
    nonconverged_replicates: tuple = ()
    replicate_weight_curves: Optional[tuple] = None


def _replicate_statistic(u, theta0, sigma20, lambda1, config, seed, stream_id,
                         keep_curve=False):
    """Statistic of one null replicate: redraw effects, refit, take min weight.

    Pure function of (inputs, seed, stream_id): stream `stream_id` drives the
    effect draws and the fit seed, so relabeling streams permutes replicate
    statistics without changing their multiset.  A non-convergent fit is
    retried once on a fresh sub-seed, then flagged.
    """
    u = np.asarray(u, dtype=float)
    n = u.size
    g = RngStream(seed, stream_id).generator()
    eta = np.sqrt(u**2 + sigma20)
    y = theta0 + eta * g.standard_normal(n)
    rep = MetaDataset.from_arrays([f"sim-{i + 1}" for i in range(n)], y, u)

    flagged = False
    fit = fit_monotone(rep, lambda1, replace(config, seed=int(g.integers(2**63))))
    if not fit.converged:
        fit = fit_monotone(rep, lambda1, replace(config, seed=int(g.integers(2**63))))
        flagged = not fit.converged
    stat = float(np.min(fit.weights.w))
    curve = None
    if keep_curve:
        curve = (build_groups(rep, lambda1).pcuts.copy(), fit.weights.w.copy())
    return stream_id, stat, flagged, curve


def selection_test(data: MetaDataset, M: int = 1000, lambda1: float = 2.0,
                   config: Optional[DEConfig] = None, seed: int = 0,
                   n_jobs: int = 1, keep_curves: bool = False) -> SelectionTestResult:
    """Monte-Carlo test of a constant weight function, T = min fitted weight.

    Procedure: (1) the observed monotone fit gives T0 = min weight; (2) the
    constant-weight maximum likelihood fit gives the null (theta0, sigma20);
    (3) M replicate datasets redraw every study effect from
    N(theta0, u_i^2 + sigma20) keeping the observed u_i, so the replicate
    p-values follow the null p-value law with random signs; (4) each
    replicate is refit under the monotone model, giving T^(j); (5) the
    inclusive Monte-Carlo p-value is (1 + #{T^(j) <= T0}) / (1 + M): a small
    observed minimum weight relative to the null replicates yields a small
    p-value, flagging evidence of selection.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    config = config or DEConfig()
    null = fit_random_effects(data)
    observed = fit_monotone(data, lambda1, config)
    T0 = float(np.min(observed.weights.w))

    u = tuple(float(v) for v in data.u)
    jobs = [(u, null.theta, null.sigma2, lambda1, config, int(seed), j, keep_curves)
            for j in range(1, M + 1)]
    if n_jobs <= 1:
        raw = [_replicate_statistic(*job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=int(n_jobs)) as pool:
            raw = list(pool.map(_replicate_statistic, *zip(*jobs), chunksize=8))
    raw.sort(key=lambda item: item[0])  # deterministic replicate order

    stats = np.array([item[1] for item in raw])
    flagged = tuple(item[0] for item in raw if item[2])
    curves = tuple(item[3] for item in raw) if keep_curves else None
    p_value = float((1 + int(np.sum(stats <= T0))) / (1 + M))
    return SelectionTestResult(
        T0=T0,
        replicate_stats=stats,
        M=M,
        p_value=p_value,
        null_fit=null,
        observed_fit=observed,
        seed=int(seed),
        nonconverged_replicates=flagged,
        replicate_weight_curves=curves,
    )
