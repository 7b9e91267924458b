import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from lccpd.gaussian import (
    DegenerateCovarianceError,
    GaussianSpec,
    SpectroTemporalSample,
    conditional_moments,
    densify_kronecker,
    observed_loglik,
    pca_compress,
    s_and_loglik,
    s_statistic,
    spectral_projection,
)

from conftest import random_spd


def sample(values, missing=None):
    values = np.asarray(values, dtype=float)
    mask = np.zeros(values.shape, bool) if missing is None else np.asarray(missing, bool)
    return SpectroTemporalSample(np.where(mask, np.nan, values), mask)


def test_bivariate_conditional():
    spec = GaussianSpec([0.0, 0.0], cov=np.array([[1.0, 0.5], [0.5, 1.0]]), jitter=0.0)
    m = conditional_moments(sample([[1.0, np.nan]], [[False, True]]), spec)
    assert np.allclose(m.imputed, [1.0, 0.5])
    assert m.cond_var[1, 1] == pytest.approx(0.75)
    assert np.count_nonzero(m.cond_var[0]) == 0


def test_no_missing_passes_through(rng):
    cov = random_spd(rng, 6)
    x = rng.normal(size=(2, 3))
    m = conditional_moments(sample(x), GaussianSpec(np.zeros(6), cov=cov))
    assert np.array_equal(m.imputed, x.ravel())
    assert not m.cond_var.any()


def test_all_missing_gives_marginal(rng):
    cov = random_spd(rng, 4)
    mu = rng.normal(size=4)
    spec = GaussianSpec(mu, cov=cov, jitter=0.0)
    m = conditional_moments(sample(np.zeros((2, 2)), np.ones((2, 2))), spec)
    assert np.allclose(m.imputed, mu)
    assert np.allclose(m.cond_var, cov)


def test_s_statistic_examples():
    eye = GaussianSpec(np.zeros(2), cov=np.eye(2), jitter=0.0)
    assert s_statistic(sample([[0.0, 0.0]]), eye) == pytest.approx(0.0, abs=1e-14)
    assert s_statistic(sample([[3.0, 0.0]], [[False, True]]), eye) == pytest.approx(10.0)
    eye6 = GaussianSpec(np.zeros(6), cov=np.eye(6), jitter=0.0)
    assert s_statistic(sample(np.zeros((2, 3)), np.ones((2, 3))), eye6) == pytest.approx(6.0)


def test_observed_loglik_examples():
    one = GaussianSpec([0.0], cov=np.eye(1), jitter=0.0)
    assert observed_loglik(sample([[0.0]]), one) == pytest.approx(-0.91894, abs=1e-5)
    two = GaussianSpec(np.zeros(2), cov=np.eye(2), jitter=0.0)
    assert observed_loglik(sample([[1.0, 0.0]], [[False, True]]), two) == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5)
    assert observed_loglik(sample([[1.0, 0.0]], [[True, True]]), two) == 0.0


def test_observed_loglik_matches_scipy(rng):
    cov = random_spd(rng, 6)
    mu = rng.normal(size=6)
    x = rng.normal(size=(2, 3))
    miss = np.array([[False, True, False], [True, False, False]])
    obs = ~miss.ravel()
    ref = stats.multivariate_normal(mu[obs], cov[np.ix_(obs, obs)]).logpdf(x.ravel()[obs])
    assert observed_loglik(sample(x, miss), GaussianSpec(mu, cov=cov, jitter=0.0)) == pytest.approx(ref, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 3))
def test_fast_s_route_matches_definition(seed, B, T):
    rng = np.random.default_rng(seed)
    spec = GaussianSpec(rng.normal(size=B * T), kron=(random_spd(rng, B), random_spd(rng, T)), ridge=0.3)
    miss = rng.random((B, T)) < 0.4
    s = sample(rng.normal(size=(B, T)), miss)
    fast, _ = s_and_loglik(s, spec)
    assert fast == pytest.approx(s_statistic(s, spec), rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4))
def test_kronecker_logpdf_matches_dense(seed, B, T):
    rng = np.random.default_rng(seed)
    spec = GaussianSpec(rng.normal(size=B * T), kron=(random_spd(rng, B), random_spd(rng, T)), ridge=0.1)
    x = rng.normal(size=B * T)
    dense = GaussianSpec(spec.mean, cov=spec.covariance, jitter=0.0)
    assert spec.kron_logpdf(x) == pytest.approx(dense.dense_logpdf(x), rel=1e-9)


def test_densify_matches_flattening(rng):
    # cov(X[b,t], X[c,u]) = S[b,c] T[t,u] at flat index b*T + t
    S, T = random_spd(rng, 2), random_spd(rng, 3)
    dense = densify_kronecker(S, T)
    assert dense[1 * 3 + 2, 0 * 3 + 1] == pytest.approx(S[1, 0] * T[2, 1])


def test_monte_carlo_s_statistic(rng):
    cov = random_spd(rng, 4)
    mu = rng.normal(size=4)
    spec = GaussianSpec(mu, cov=cov, jitter=0.0)
    x = rng.normal(size=(2, 2))
    miss = np.array([[False, True], [True, False]])
    s = sample(x, miss)
    m = conditional_moments(s, spec)
    idx = miss.ravel()
    draws = rng.multivariate_normal(m.imputed[idx], m.cond_var[np.ix_(idx, idx)], size=100_000)
    full = np.tile(x.ravel(), (draws.shape[0], 1))
    full[:, idx] = draws
    prec = np.linalg.inv(cov)
    r = full - mu
    vals = np.linalg.slogdet(cov)[1] + np.einsum("ni,ij,nj->n", r, prec, r)
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - s_statistic(s, spec)) < 3 * se


def test_degenerate_covariance_raises():
    spec = GaussianSpec(np.zeros(2), cov=np.array([[1.0, 1.0], [1.0, 1.0]]), jitter=0.0)
    with pytest.raises(DegenerateCovarianceError):
        s_and_loglik(sample([[0.0, 1.0]]), spec)


def test_jitter_rescues_singular_covariance():
    spec = GaussianSpec(np.zeros(2), cov=np.array([[1.0, 1.0], [1.0, 1.0]]))
    s_value, _ = s_and_loglik(sample([[0.0, 0.0]]), spec)
    assert np.isfinite(s_value)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        s_statistic(sample([[0.0, 0.0, 0.0]]), GaussianSpec(np.zeros(2), cov=np.eye(2)))


def test_pca_identity_and_diagonal():
    x = np.arange(6.0).reshape(2, 3)
    out = pca_compress(sample(x), np.eye(2), 2)
    assert np.allclose(np.abs(out.values), np.abs(x))
    out = pca_compress(sample([[8.0], [4.0]]), np.diag([4.0, 1.0]), 1)
    assert np.allclose(out.values, [[2.0]])


def test_pca_missing_time_point_propagates():
    x = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    miss = np.array([[False, True, False], [False, False, False]])
    out = pca_compress(sample(x, miss), np.diag([2.0, 1.0]), 2)
    assert out.mask[:, 1].all() and not out.mask[:, [0, 2]].any()


def test_pca_pushes_covariance_through(rng):
    B, T = 3, 2
    S, Tm = random_spd(rng, B), random_spd(rng, T)
    A, lam = spectral_projection(S, B)
    lift = np.kron(A, np.eye(T))
    pushed = lift @ np.kron(S, Tm) @ lift.T
    assert np.allclose(pushed, np.kron(np.diag(1.0 / lam), Tm), atol=1e-10)


def test_spectral_projection_rejects_bad_rank(rng):
    with pytest.raises(ValueError):
        spectral_projection(random_spd(rng, 3), 4)


def test_fully_observed_s_is_logdet_plus_mahalanobis(rng):
    cov = random_spd(rng, 6)
    mu = rng.normal(size=6)
    x = rng.normal(size=6)
    ref = np.linalg.slogdet(cov)[1] + (x - mu) @ np.linalg.solve(cov, x - mu)
    assert s_statistic(sample(x.reshape(2, 3)), GaussianSpec(mu, cov=cov, jitter=0.0)) == pytest.approx(ref, rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_nested_marginals_agree(seed):
    # the marginal of the cells observed under M2, taken directly or from the M1 marginal, is the same
    rng = np.random.default_rng(seed)
    n = 6
    cov = random_spd(rng, n)
    mu = rng.normal(size=n)
    x = rng.normal(size=n)
    m1 = rng.random(n) < 0.3
    m1[0] = False
    m2 = m1 | (rng.random(n) < 0.3)
    direct = observed_loglik(sample(x.reshape(2, 3), m2.reshape(2, 3)), GaussianSpec(mu, cov=cov, jitter=0.0))
    keep = ~m1
    sub = GaussianSpec(mu[keep], cov=cov[np.ix_(keep, keep)], jitter=0.0)
    inner = m2[keep]
    nested = observed_loglik(sample(x[keep][None, :], inner[None, :]), sub)
    assert direct == pytest.approx(nested, rel=1e-10, abs=1e-12)
