import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal, norm
from sklearn.base import clone

from btba.datagen import Dataset, SeedPlan, sample_mvn
from btba.errors import DomainError, SingularCovError, StartError
from btba.estimator import (
    GrowthCurveFIML,
    OptimizerSettings,
    ParamLayout,
    ParamVector,
    _Batch,
    _batched_terms,
    _pattern_terms_loop,
    extract_target,
    finite_difference_gradient,
    fit,
    loglik_and_gradient,
    loglik_gradient,
    pattern_loglik,
    pattern_stats,
    start_values,
)
from btba.missingness import apply_design, swmd6
from btba.model import ModelShape, MomentStructure, default_population, implied_moments

SHAPE = ModelShape()
LAYOUT = ParamLayout(SHAPE)
SATURATED = ModelShape((0.0, 1.0), 1)


def _data(rho=0.3, n=240, seed=11, missing=False):
    d = sample_mvn(implied_moments(default_population(rho)), n, SeedPlan(seed))
    return apply_design(d, swmd6()) if missing else d


# -- likelihood ---------------------------------------------------------------


def test_complete_data_matches_plain_mvn():
    d = _data()
    m = implied_moments(default_population(0.3))
    expected = multivariate_normal(m.mean, m.cov).logpdf(d.values).sum()
    assert pattern_loglik(d, m) == pytest.approx(expected, abs=1e-8, rel=0)


def test_single_standard_normal_case():
    d = Dataset(np.zeros((1, 1)), np.ones((1, 1), bool), np.ones(1))
    m = MomentStructure(np.zeros(1), np.eye(1))
    assert pattern_loglik(d, m) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-15)


def test_two_pattern_toy():
    mu = np.array([0.5, -1.0])
    cov = np.array([[2.0, 0.6], [0.6, 1.0]])
    X = np.array([[1.0, 0.0], [0.2, -2.5], [-1.0, np.nan]])
    d = Dataset.from_array(X)
    by_hand = (
        multivariate_normal(mu, cov).logpdf(X[:2]).sum()
        + norm(mu[0], np.sqrt(cov[0, 0])).logpdf(X[2, 0])
    )
    assert pattern_loglik(d, MomentStructure(mu, cov)) == pytest.approx(by_hand, abs=1e-12)


def test_fiml_matches_per_row_oracle_with_missing():
    d = _data(missing=True, n=60)
    m = implied_moments(default_population(0.3))
    total = 0.0
    for y, obs in zip(d.values, d.mask):
        o = np.flatnonzero(obs)
        total += multivariate_normal(m.mean[o], m.cov[np.ix_(o, o)]).logpdf(y[o])
    assert pattern_loglik(d, m) == pytest.approx(total, abs=1e-8)


def test_batched_path_matches_loop():
    d = _data(missing=True, n=120)
    stats = pattern_stats(d)
    m = implied_moments(default_population(0.55))
    a = _pattern_terms_loop(stats, m.mean, m.cov, True)
    b = _batched_terms(_Batch(stats, 30), m.mean, m.cov, True)
    assert b[0] == pytest.approx(a[0], abs=1e-8)
    assert np.allclose(a[1], b[1], atol=1e-9)
    assert np.allclose(a[2], b[2], atol=1e-9)


def test_singular_pattern_raises():
    d = Dataset.from_array([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(SingularCovError):
        pattern_loglik(d, MomentStructure(np.zeros(2), np.ones((2, 2))))


def test_pattern_stats_rejects_empty_rows():
    d = Dataset.from_array([[np.nan, np.nan]])
    with pytest.raises(DomainError):
        pattern_loglik(d, MomentStructure(np.zeros(2), np.eye(2)))


def test_row_permutation_invariance():
    d = _data(missing=True, n=120, seed=4)
    m = implied_moments(default_population(0.3))
    perm = np.random.default_rng(0).permutation(d.n)
    shuffled = Dataset(d.values[perm], d.mask[perm], d.group[perm])
    assert abs(pattern_loglik(d, m) - pattern_loglik(shuffled, m)) < 1e-10
    a, b = fit(d), fit(shuffled)
    assert abs(a.target_estimate - b.target_estimate) < 1e-8


def test_variable_order_contract():
    # permuting columns of data and moments together leaves the likelihood unchanged
    d = _data(missing=True, n=60)
    m = implied_moments(default_population(0.3))
    perm = np.random.default_rng(1).permutation(30)
    d2 = Dataset(d.values[:, perm], d.mask[:, perm], d.group)
    m2 = MomentStructure(m.mean[perm], m.cov[np.ix_(perm, perm)])
    assert pattern_loglik(d2, m2) == pytest.approx(pattern_loglik(d, m), abs=1e-9)


# -- parameterization -----------------------------------------------------------


def test_natural_round_trip():
    p = default_population(0.55)
    v = ParamVector.from_natural(p, LAYOUT)
    back = ParamVector.from_natural(v.to_natural(), LAYOUT)
    assert np.max(np.abs(back.x - v.x)) < 1e-10
    assert np.allclose(v.to_natural().growth_cov, p.growth_cov, atol=1e-12)
    assert np.allclose(v.moments().cov, implied_moments(p).cov, atol=1e-12)


@given(st.lists(st.floats(-3, 3), min_size=LAYOUT.size, max_size=LAYOUT.size))
@settings(max_examples=50)
def test_any_unconstrained_point_is_proper(raw):
    v = ParamVector(LAYOUT, np.array(raw))
    nat = v.to_natural()
    assert np.linalg.eigvalsh(nat.growth_cov).min() > 0
    assert np.all(nat.disturbance_vars > 0) and np.all(nat.residual_vars > 0)
    assert -1.0 <= extract_target(v) <= 1.0


def test_start_errors():
    with pytest.raises(StartError):
        ParamVector(LAYOUT, np.zeros(3))
    with pytest.raises(StartError):
        ParamVector(LAYOUT, np.full(LAYOUT.size, np.nan))
    p = default_population()
    zero_resid = type(p)(p.growth_means, p.growth_cov, p.disturbance_vars, p.loadings,
                         p.measurement_intercepts, np.zeros_like(p.residual_vars))
    with pytest.raises(StartError):
        ParamVector.from_natural(zero_resid, LAYOUT)


def test_layout_names_match_size():
    assert len(LAYOUT.names()) == LAYOUT.size == 4 + 10 + 10 + 4 + 4 + 30


# -- extract_target ----------------------------------------------------------------


def test_extract_target_identity():
    assert extract_target(np.eye(4)) == 0.0


def test_extract_target_hand_value():
    psi = np.eye(4)
    psi[1, 1], psi[3, 3] = 0.25, 0.16
    psi[1, 3] = psi[3, 1] = 0.06
    assert extract_target(psi) == pytest.approx(0.3, abs=1e-14)


def test_extract_target_population():
    assert extract_target(default_population(0.55)) == pytest.approx(0.55, abs=1e-14)


def test_extract_target_underflow():
    psi = np.eye(4)
    psi[1, 1] = 0.0
    with pytest.raises(DomainError):
        extract_target(psi)


# -- gradient -----------------------------------------------------------------------


def _rel_close(a, b, rel=1e-4, floor=1e-3):
    return np.all(np.abs(a - b) <= rel * np.maximum(np.abs(b), floor))


def test_gradient_matches_finite_differences_full_model():
    d = _data(missing=True, n=120, seed=21)
    stats = pattern_stats(d)
    rng = np.random.default_rng(7)
    base = ParamVector.from_natural(default_population(0.3), LAYOUT).x
    for _ in range(5):
        x = base + rng.normal(0, 0.15, LAYOUT.size)
        ana = loglik_and_gradient(stats, LAYOUT, x)[1]
        fd = finite_difference_gradient(stats, LAYOUT, x, 1e-5)
        assert _rel_close(ana, fd)


def test_gradient_toy_moment_level():
    # two-variable MVN: analytic moment gradients vs finite differences
    X = np.array([[1.0, 0.0], [0.2, -2.5], [-1.0, np.nan], [0.3, 0.9]])
    stats = pattern_stats(Dataset.from_array(X))
    rng = np.random.default_rng(3)
    for _ in range(20):
        mu = rng.normal(size=2)
        a = rng.normal(size=(2, 2))
        cov = a @ a.T + 0.5 * np.eye(2)
        _, g_mu, g_cov = _pattern_terms_loop(stats, mu, cov, True)
        h = 1e-6
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (_pattern_terms_loop(stats, mu + e, cov, False)[0]
                  - _pattern_terms_loop(stats, mu - e, cov, False)[0]) / (2 * h)
            assert g_mu[i] == pytest.approx(fd, rel=1e-4, abs=1e-6)
        for i, j in [(0, 0), (1, 1), (0, 1)]:
            E = np.zeros((2, 2))
            E[i, j] = E[j, i] = h
            fd = (_pattern_terms_loop(stats, mu, cov + E, False)[0]
                  - _pattern_terms_loop(stats, mu, cov - E, False)[0]) / (2 * h)
            analytic = g_cov[i, j] * (1 if i == j else 2)
            assert analytic == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_gradient_mean_components_flip_with_data():
    d = _data(n=60, seed=5)
    flipped = Dataset(-d.values, d.mask, d.group)
    p = default_population(0.3)
    zero_means = type(p)(np.zeros(4), p.growth_cov, p.disturbance_vars, p.loadings,
                         np.zeros((2, 3)), p.residual_vars)
    v = ParamVector.from_natural(zero_means, LAYOUT)
    g1, g2 = loglik_gradient(d, v), loglik_gradient(flipped, v)
    s = LAYOUT.slices
    for block in ("means", "intercepts"):
        assert np.allclose(g1[s[block]], -g2[s[block]], atol=1e-8)
    assert np.allclose(g1[s["chol"]], g2[s["chol"]], atol=1e-8)


def test_finite_difference_setting_route():
    d = _data(n=60, seed=5)
    v = ParamVector.from_natural(default_population(0.3), LAYOUT)
    fd = loglik_gradient(d, v, OptimizerSettings(gradient="finite-difference"))
    assert _rel_close(loglik_gradient(d, v), fd)


# -- fitting ------------------------------------------------------------------------


def _saturated_fit(X):
    layout = ParamLayout(SATURATED, free_disturbances=False)
    d = Dataset.from_array(X)
    tight = OptimizerSettings(max_iterations=2000, loglik_tol=1e-15, grad_tol=1e-11)
    return fit(d, settings=tight, layout=layout), d, layout


def test_saturated_fit_recovers_sample_moments():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(4, 4))
    X = rng.multivariate_normal([0.2, 0.7, -0.1, 0.4], a @ a.T + np.eye(4), size=300)
    res, d, _ = _saturated_fit(X)
    m = res.params.moments()
    assert np.max(np.abs(m.mean - X.mean(axis=0))) < 1e-6
    assert np.max(np.abs(m.cov - np.cov(X, rowvar=False, bias=True))) < 1e-6
    grad = loglik_gradient(d, res.params)
    assert np.max(np.abs(grad)) < 1e-6


def test_large_sample_recovers_correlation():
    d = _data(rho=0.3, n=6000, seed=77)
    res = fit(d)
    assert res.converged
    assert abs(res.target_estimate - 0.3) < 0.06
    assert res.gradient_norm <= OptimizerSettings().grad_tol
    assert res.pattern_count == 1


def test_fiml_fit_on_planned_missing_data():
    res = fit(_data(rho=0.55, n=1200, seed=8, missing=True))
    assert res.converged and res.pattern_count == 6
    assert abs(res.target_estimate - 0.55) < 0.2


def test_loglik_trace_monotone():
    res = fit(_data(n=240, seed=12, missing=True))
    trace = np.array(res.loglik_trace)
    assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[:-1]))
    assert res.loglik == pytest.approx(trace[-1])


def test_single_case_never_crashes():
    d = _data(n=1)
    try:
        res = fit(d)
    except (SingularCovError, StartError):
        return
    assert not res.converged or np.isfinite(res.target_estimate)


def test_start_values_are_feasible():
    d = _data(missing=True)
    sv = start_values(pattern_stats(d), LAYOUT)
    assert np.isfinite(pattern_loglik(d, sv.moments()))
    assert np.allclose(sv.to_natural().growth_cov, 0.5 * np.eye(4))


# -- scikit-learn wrapper ------------------------------------------------------------


def test_sklearn_wrapper():
    d = _data(missing=True, n=300, seed=2)
    est = GrowthCurveFIML(max_iterations=300)
    assert est.get_params()["max_iterations"] == 300
    twin = clone(est)
    twin.fit(d.observed())
    est.fit(d)
    assert est.target_estimate_ == pytest.approx(twin.target_estimate_, abs=1e-10)
    assert est.score(d) == pytest.approx(est.loglik_ / d.n)
    assert est.converged_ and est.n_iter_ > 0


def test_sklearn_wrapper_rejects_wrong_width():
    with pytest.raises(DomainError):
        GrowthCurveFIML().fit(np.zeros((5, 4)))
