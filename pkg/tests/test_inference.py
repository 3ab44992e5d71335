"""Tests for the inference layer.

Covers the distribution of a two-sided p-value under a normal random-effects
law (density, CDF, quantile, exact sampler), the profile-likelihood interval
for the pooled effect, and the Monte-Carlo test of constant selection
weights.  The density oracle integrates in the z-score domain, where the
integrand is a smooth normal-tailed bump, so no endpoint singularity of the
p-domain density is ever sampled.
"""

import math

import mpmath
import numpy as np
import pytest

from stepselect.inference import (
    PvalDensityParams,
    pval_cdf,
    pval_density,
    pval_quantile,
    profile_ci_theta,
    profile_loglik,
    sample_pvalue_and_sign,
    selection_test,
)
from stepselect.model import MetaDataset, two_sided_pvalue
from stepselect.optimizer import DEConfig, WEIGHT_FLOOR, fit_random_effects
from stepselect.stats_core import (
    RngStream,
    chi2_quantile_1df,
    norm_cdf,
    norm_pdf,
    norm_quantile,
)

# Small DE budget used where a test only needs the selection-test mechanics,
# not a tight optimum.
_FAST = DEConfig(population_size=24, stagnation_generations=40,
                 value_tolerance=1e-5)

# Parameter points exercising sigma2 = 0, theta = 0, both signs of theta, and
# an education-like scale (u of order 0.1 with a dominant between-study part).
_PARAM_GRID = (
    PvalDensityParams(theta=0.0, u=1.0, sigma2=0.0),
    PvalDensityParams(theta=0.3, u=0.5, sigma2=0.0),
    PvalDensityParams(theta=0.15, u=0.107, sigma2=0.11),
    PvalDensityParams(theta=-0.4, u=0.25, sigma2=0.05),
)

# Frozen outputs of the default-configuration education fits (same values as
# in test_optimizer.py).
_RE_THETA = 0.252926128302452
_RE_SIGMA2 = 0.20607172329040596
_CI_LOWER = -0.08284413190957493
_CI_UPPER = 0.5812570514084555


def _density_mass(params, sigma_scaled=False):
    """Total mass of pval_density by quadrature in the z-score domain.

    Substituting p = 2*Phi(q) turns the (0, 1) integral into an integral of
    pval_density(2*Phi(q)) * 2*phi(q) over q < 0, a smooth function with
    normal tails; truncating at q = -36 discards less than 1e-25 of mass for
    every parameter point in _PARAM_GRID.
    """

    def integrand(q):
        q = float(q)
        # Nodes rounding 2*Phi(q) up to exactly 1.0 are pulled back inside
        # the open domain; the induced error is below double resolution.
        p = min(2.0 * norm_cdf(q), np.nextafter(1.0, 0.0))
        return pval_density(p, params, sigma_scaled=sigma_scaled) * 2.0 * norm_pdf(q)

    with mpmath.workdps(25):
        return float(mpmath.quad(integrand, [-36.0, -8.0, -3.0, -1.0, 0.0]))


def _ks_distance(sample, cdf_values):
    """One-sample Kolmogorov-Smirnov distance for a sorted sample."""
    n = len(sample)
    up = np.arange(1, n + 1) / n
    lo = np.arange(0, n) / n
    return float(np.max(np.maximum(up - cdf_values, cdf_values - lo)))


def test_pval_density_integrates_to_one():
    for params in _PARAM_GRID:
        mass = _density_mass(params)
        assert abs(mass - 1.0) <= 1e-6, (
            f"density mass {mass!r} != 1 for {params}"
        )


def test_pval_density_uniform_when_theta_and_sigma2_are_zero():
    params = PvalDensityParams(theta=0.0, u=1.0, sigma2=0.0)
    for p in (1e-6, 0.05, 0.25, 0.5, 0.75, 0.999):
        d = pval_density(p, params)
        assert abs(d - 1.0) <= 1e-12, f"null density at p={p} is {d}, not 1"
        assert abs(pval_cdf(p, params) - p) <= 1e-12


def test_pval_cdf_differentiates_to_density():
    h = 1e-5
    for params in _PARAM_GRID:
        for p in (0.02, 0.1, 0.3, 0.5, 0.7, 0.9, 0.98):
            fd = (pval_cdf(p + h, params) - pval_cdf(p - h, params)) / (2.0 * h)
            f = pval_density(p, params)
            assert abs(fd - f) <= 1e-5 * (1.0 + abs(f)), (
                f"cdf slope {fd} vs density {f} at p={p}, {params}"
            )


def test_pval_cdf_monotone_with_unit_range():
    grid = np.concatenate([
        np.logspace(-12, -2, 60),
        np.linspace(0.011, 0.999, 300),
        [1.0 - 1e-12],
    ])
    for params in _PARAM_GRID:
        F = pval_cdf(grid, params)
        assert np.all(F >= 0.0) and np.all(F <= 1.0)
        assert np.all(np.diff(F) >= -1e-15), f"cdf not monotone for {params}"
        assert pval_cdf(1e-300, params) < 1e-9
        assert pval_cdf(1.0 - 1e-15, params) > 1.0 - 1e-9


def test_pval_quantile_inverts_cdf():
    # Round trip through p-space: the bisection lands within its absolute
    # tolerance of the starting point wherever the CDF strictly increases.
    for params in _PARAM_GRID:
        for p in (0.003, 0.05, 0.2, 0.6, 0.97):
            back = pval_quantile(pval_cdf(p, params), params)
            assert abs(back - p) <= 1e-9, (
                f"quantile(cdf({p})) = {back} for {params}"
            )
    # Round trip through q-space.  The density diverges at p -> 0 whenever
    # selection favors small p, so an absolute p-tolerance cannot bound the
    # q-error near that cliff; check where the quantile stays moderate and
    # scale the tolerance by the local density (the Lipschitz constant).
    for params in _PARAM_GRID[:2]:
        for q in (0.01, 0.1, 0.5, 0.9, 0.99, 1.0 - 1e-6):
            p = pval_quantile(q, params)
            assert 0.0 < p < 1.0
            err = abs(pval_cdf(p, params) - q)
            tol = max(1e-8, 1e-9 * pval_density(p, params))
            assert err <= tol, f"cdf(quantile({q})) off by {err} for {params}"
    # At the cliff the absolute p-space contract still holds: for a law that
    # pushes most small-p mass below double resolution, the 1e-6 quantile is
    # itself far below the bisection tolerance, and the returned point must
    # land within that tolerance of it.
    steep = PvalDensityParams(theta=0.15, u=0.107, sigma2=0.11)
    p_lo = pval_quantile(1e-6, steep)
    assert p_lo <= 1e-9, f"extreme quantile {p_lo} exceeds bisection tolerance"
    assert p_lo <= pval_quantile(0.2, steep) <= pval_quantile(0.8, steep)


def test_pval_quantile_identity_under_uniform_law():
    params = PvalDensityParams(theta=0.0, u=1.0, sigma2=0.0)
    for q in (0.001, 0.2, 0.5, 0.8, 0.999):
        assert abs(pval_quantile(q, params) - q) <= 1e-9


def test_pval_density_sigma_scaled_formula():
    params = PvalDensityParams(theta=0.1, u=0.3, sigma2=0.25)
    s = math.sqrt(params.sigma2)
    eta = params.eta
    for p in (0.05, 0.3, 0.7):
        q = norm_quantile(p / 2.0)
        b = -s * q
        z1 = (b - params.theta) / eta
        z2 = (-b - params.theta) / eta
        expected = (s / (2.0 * eta)) * (
            math.exp(0.5 * (q * q - z1 * z1)) + math.exp(0.5 * (q * q - z2 * z2))
        )
        got = pval_density(p, params, sigma_scaled=True)
        assert abs(got - expected) <= 1e-12 * max(1.0, abs(expected))


def test_pval_density_sigma_scaled_properties():
    # Degenerates to zero when there is no between-study variance.
    flat = PvalDensityParams(theta=0.2, u=0.5, sigma2=0.0)
    for p in (0.05, 0.5, 0.95):
        assert pval_density(p, flat, sigma_scaled=True) == 0.0
    # Coincides with the standard density exactly when sigma equals u ...
    match = PvalDensityParams(theta=0.2, u=0.4, sigma2=0.16)
    for p in (0.02, 0.4, 0.9):
        a = pval_density(p, match, sigma_scaled=True)
        b = pval_density(p, match, sigma_scaled=False)
        assert abs(a - b) <= 1e-14 * max(1.0, abs(b))
    # ... differs pointwise otherwise, yet remains a normalized density (it
    # is the law of a p-value computed against the scale sigma, not u).
    skewed = PvalDensityParams(theta=0.1, u=0.3, sigma2=0.25)
    assert abs(pval_density(0.3, skewed, sigma_scaled=True)
               - pval_density(0.3, skewed)) > 0.01
    mass = _density_mass(skewed, sigma_scaled=True)
    assert abs(mass - 1.0) <= 1e-6, f"scaled-variant mass {mass!r}"


def test_pval_domain_validation():
    params = _PARAM_GRID[1]
    for bad in (0.0, 1.0, -0.2, 1.3):
        with pytest.raises(ValueError, match="strictly inside"):
            pval_density(bad, params)
        with pytest.raises(ValueError, match="strictly inside"):
            pval_cdf(bad, params)
        with pytest.raises(ValueError):
            pval_quantile(bad, params)
    with pytest.raises(ValueError, match="u must be finite"):
        PvalDensityParams(theta=0.0, u=0.0, sigma2=0.1)
    with pytest.raises(ValueError, match="u must be finite"):
        PvalDensityParams(theta=0.0, u=-1.0, sigma2=0.1)
    with pytest.raises(ValueError, match="sigma2"):
        PvalDensityParams(theta=0.0, u=1.0, sigma2=-0.01)
    with pytest.raises(ValueError, match="theta"):
        PvalDensityParams(theta=float("nan"), u=1.0, sigma2=0.1)


def test_sampler_matches_closed_form_cdf():
    params = PvalDensityParams(theta=0.15, u=0.107, sigma2=0.11)
    n = 4000
    p, _ = sample_pvalue_and_sign(params, RngStream(2024, 7), size=n)
    assert p.shape == (n,)
    assert np.all((p > 0.0) & (p <= 1.0))
    order = np.sort(p)
    D = _ks_distance(order, pval_cdf(order, params))
    crit = 1.628 / math.sqrt(n)  # asymptotic 1% point of sqrt(n) * D
    assert D < crit, f"KS distance {D:.5f} exceeds 1% critical value {crit:.5f}"
    # Same stream id, same draws.
    p2, y2 = sample_pvalue_and_sign(params, RngStream(2024, 7), size=n)
    assert np.array_equal(p, p2)
    _, y = sample_pvalue_and_sign(params, RngStream(2024, 7), size=n)
    assert np.array_equal(y, y2)


def test_sampler_sign_rule():
    params = PvalDensityParams(theta=0.3, u=0.5, sigma2=0.2)
    n = 200
    p, y = sample_pvalue_and_sign(params, RngStream(11, 4), size=n)
    y_star = -params.u * norm_quantile(p / 2.0)
    assert np.all(y_star >= 0.0)
    # The p-value reconstructs exactly from the positive branch.
    assert np.max(np.abs(two_sided_pvalue(y_star, params.u) - p)) <= 1e-10
    plus = np.isclose(y, y_star, rtol=0.0, atol=1e-12)
    minus = np.isclose(y, 2.0 * params.theta - y_star, rtol=0.0, atol=1e-12)
    assert np.all(plus | minus), "a sampled effect matches neither sign branch"
    frac = float(np.mean(minus & ~plus))
    # Fair coin: 5 binomial standard errors around one half at n = 200.
    assert abs(frac - 0.5) <= 5.0 * math.sqrt(0.25 / n) + 1e-12, (
        f"mirrored-branch fraction {frac} is not consistent with a fair coin"
    )


def test_sampler_scalar_and_generator_forms():
    params = PvalDensityParams(theta=-0.1, u=0.4, sigma2=0.05)
    p, y = sample_pvalue_and_sign(params, RngStream(9, 1))
    assert isinstance(p, float) and isinstance(y, float)
    assert 0.0 < p <= 1.0 and math.isfinite(y)
    # Passing the underlying numpy generator draws the identical sequence.
    a = sample_pvalue_and_sign(params, RngStream(9, 1), size=5)
    b = sample_pvalue_and_sign(params, RngStream(9, 1).generator(), size=5)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    # theta = 0 folds the two branches onto +/- y_star.
    sym = PvalDensityParams(theta=0.0, u=0.7, sigma2=0.1)
    ps, ys = sample_pvalue_and_sign(sym, RngStream(9, 2), size=100)
    ystar = -sym.u * norm_quantile(ps / 2.0)
    assert np.all(np.isclose(np.abs(ys), ystar, rtol=0.0, atol=1e-12))


def test_profile_shape_around_maximum(education, education_fit):
    l_max = education_fit.loglik
    theta_hat = education_fit.theta
    offsets = (-0.45, -0.3, -0.15, -0.05, 0.0, 0.05, 0.15, 0.3, 0.45)
    values = [profile_loglik(theta_hat + d, education) for d in offsets]
    at_hat = values[offsets.index(0.0)]
    assert abs(at_hat - l_max) <= 1e-5, (
        f"profile at theta_hat {at_hat} vs joint maximum {l_max}"
    )
    # No profile value may exceed the joint maximum (up to optimizer noise).
    assert max(values) <= l_max + 1e-6
    left = values[: offsets.index(0.0) + 1]
    right = values[offsets.index(0.0):]
    assert all(a <= b + 1e-4 for a, b in zip(left, left[1:])), (
        f"profile not increasing toward the maximum from the left: {left}"
    )
    assert all(a >= b - 1e-4 for a, b in zip(right, right[1:])), (
        f"profile not decreasing away from the maximum to the right: {right}"
    )
    # The ends of this window lie well outside the 95% interval.
    assert values[0] < l_max - 1.5 and values[-1] < l_max - 1.5


def test_profile_ci_education_frozen(education, education_fit):
    ci = profile_ci_theta(education, fit=education_fit)
    assert abs(ci.lower - _CI_LOWER) <= 1e-9, f"lower endpoint {ci.lower!r}"
    assert abs(ci.upper - _CI_UPPER) <= 1e-9, f"upper endpoint {ci.upper!r}"
    assert ci.level == 0.95
    assert ci.cutoff == chi2_quantile_1df(0.95)
    assert ci.theta_hat == education_fit.theta
    assert ci.loglik_max == education_fit.loglik
    assert ci.lower < ci.theta_hat < ci.upper
    assert not ci.lower_open and not ci.upper_open
    # The recorded curve is every profile evaluation, sorted by theta, and
    # stays below the joint maximum while spanning past both endpoints.
    curve = ci.profile_curve
    assert curve is not None and len(curve) >= 10
    thetas = [t for t, _ in curve]
    assert thetas == sorted(thetas)
    assert min(thetas) <= ci.lower and max(thetas) >= ci.upper
    assert max(v for _, v in curve) <= ci.loglik_max + 1e-6


def test_profile_ci_level_ordering(education, education_fit):
    wide = profile_ci_theta(education, level=0.95, fit=education_fit)
    mid = profile_ci_theta(education, level=0.5, fit=education_fit)
    tiny = profile_ci_theta(education, level=1e-4, fit=education_fit)
    assert wide.lower < mid.lower < mid.upper < wide.upper
    assert tiny.lower < education_fit.theta < tiny.upper
    assert tiny.upper - tiny.lower < 0.05, (
        f"near-zero level should pinch the interval: {tiny.lower}..{tiny.upper}"
    )
    for bad in (0.0, 1.0, -0.5, 2.0):
        with pytest.raises(ValueError, match="level"):
            profile_ci_theta(education, level=bad, fit=education_fit)


def test_profile_ci_symmetric_dataset():
    # Mirror-symmetric effects with equal standard errors: the likelihood is
    # invariant under y -> -y, so the interval must straddle zero evenly.
    vals = (0.2, 0.5, 0.9)
    y = tuple(-v for v in reversed(vals)) + vals
    data = MetaDataset.from_arrays(
        [f"s{i}" for i in range(len(y))], y, [0.4] * len(y)
    )
    ci = profile_ci_theta(data)
    assert ci.lower < 0.0 < ci.upper
    assert abs(ci.lower + ci.upper) <= 0.01, (
        f"interval [{ci.lower}, {ci.upper}] is not symmetric about zero"
    )


def test_selection_test_determinism_and_p_formula(education):
    st = selection_test(education, M=19, config=_FAST, seed=5)
    again = selection_test(education, M=19, config=_FAST, seed=5)
    assert np.array_equal(st.replicate_stats, again.replicate_stats)
    assert st.p_value == again.p_value
    assert st.M == 19 and st.seed == 5
    assert st.T0 == float(np.min(st.observed_fit.weights.w))
    # The null is the constant-weight (random-effects) maximum likelihood fit.
    assert abs(st.null_fit.theta - _RE_THETA) <= 1e-9
    assert abs(st.null_fit.sigma2 - _RE_SIGMA2) <= 1e-9
    # Inclusive left-tail counting.
    expect = (1 + int(np.sum(st.replicate_stats <= st.T0))) / (1 + st.M)
    assert st.p_value == expect
    assert 0.0 < st.p_value <= 1.0
    assert st.replicate_stats.shape == (19,)
    assert np.all(st.replicate_stats >= WEIGHT_FLOOR - 1e-12)
    assert np.all(st.replicate_stats <= 1.0 + 1e-12)
    assert st.replicate_weight_curves is None


def test_selection_test_replicates_are_stream_decoupled(education):
    # Stream j is a pure function of (seed, j): shrinking M keeps a prefix.
    six = selection_test(education, M=6, config=_FAST, seed=11)
    three = selection_test(education, M=3, config=_FAST, seed=11)
    assert np.array_equal(six.replicate_stats[:3], three.replicate_stats)
    other = selection_test(education, M=3, config=_FAST, seed=12)
    assert not np.array_equal(three.replicate_stats, other.replicate_stats)


def test_selection_test_parallel_matches_serial(education):
    serial = selection_test(education, M=4, config=_FAST, seed=3, n_jobs=1)
    parallel = selection_test(education, M=4, config=_FAST, seed=3, n_jobs=2)
    assert np.array_equal(serial.replicate_stats, parallel.replicate_stats)
    assert serial.p_value == parallel.p_value


def test_selection_test_keep_curves(education):
    st = selection_test(education, M=5, config=_FAST, seed=8, keep_curves=True)
    curves = st.replicate_weight_curves
    assert curves is not None and len(curves) == 5
    k = len(st.observed_fit.weights.w)
    for pcuts, w in curves:
        assert len(pcuts) == k + 1 and len(w) == k
        assert pcuts[0] == 1.0 and pcuts[-1] == 0.0
        assert all(a > b for a, b in zip(pcuts, pcuts[1:]))
        assert all(a <= b + 1e-12 for a, b in zip(w, w[1:]))
        assert w[-1] == 1.0


def test_selection_test_flags_nonconvergence(education):
    starved = DEConfig(population_size=24, max_generations=1)
    st = selection_test(education, M=3, config=starved, seed=2)
    assert not st.observed_fit.converged
    assert st.nonconverged_replicates == (1, 2, 3)
    assert st.replicate_stats.shape == (3,)
    assert 0.0 < st.p_value <= 1.0


def test_selection_test_single_replicate_and_validation(education):
    st = selection_test(education, M=1, config=_FAST, seed=4)
    expect = 1.0 if st.replicate_stats[0] <= st.T0 else 0.5
    assert st.p_value == expect
    with pytest.raises(ValueError, match="M must be >= 1"):
        selection_test(education, M=0, config=_FAST, seed=4)
