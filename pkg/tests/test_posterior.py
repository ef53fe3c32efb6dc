import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayesmpc.model import EpisodeRecord, ParamSample
from bayesmpc.posterior import (
    covariance_trace,
    map_estimate,
    parameter_error,
    regressors,
    sample,
    update,
    update_with_data,
)

from conftest import random_belief, scalar_belief


def _episode(x, u, xn, r):
    x, u, xn = (np.atleast_2d(np.asarray(a, float)) for a in (x, u, xn))
    T = x.shape[0]
    return EpisodeRecord(0, x, u, xn, np.asarray(r, float), np.zeros((T, 1)), np.zeros(T))


def _batch_posterior(mean, cov, Phi, y, sigma):
    """Information-form posterior written out directly, independent of the package."""
    prec = np.linalg.inv(cov) + Phi.T @ Phi / sigma**2
    S = np.linalg.inv(prec)
    return S @ (np.linalg.solve(cov, mean) + Phi.T @ y / sigma**2), S


def _random_data(rng, b, k):
    X = rng.standard_normal((k, b.n))
    U = rng.standard_normal((k, b.m))
    return X, U, rng.standard_normal((k, b.n)), rng.standard_normal(k)


def test_empty_episode_list_leaves_belief_unchanged():
    b = scalar_belief()
    assert update(b, []) is b


def test_scalar_conjugate_update():
    b = update(scalar_belief(0.0, 1.0, 1.0), _episode([[1.0]], [[0.0]], [[0.8]], [0.0]))
    assert b.row_means[0][0] == pytest.approx(0.4, abs=1e-12)
    assert b.row_covs[0][0, 0] == pytest.approx(0.5, abs=1e-12)
    assert map_estimate(b).A[0, 0] == pytest.approx(0.4, abs=1e-12)


def test_scalar_posterior_sample_moments():
    b = update(scalar_belief(0.0, 1.0, 1.0), _episode([[1.0]], [[0.0]], [[0.8]], [0.0]))
    rng = np.random.default_rng(7)
    draws = np.array([sample(b, rng).A[0, 0] for _ in range(100_000)])
    assert draws.mean() == pytest.approx(0.4, abs=0.01)
    assert draws.var() == pytest.approx(0.5, abs=0.02)


def test_degenerate_covariance_samples_the_mean(rng):
    b = random_belief(rng).scaled(1e-20)
    s, m = sample(b, rng), map_estimate(b)
    for x, y in ((s.A, m.A), (s.B, m.B), (s.c_off, m.c_off), (s.theta_R, m.theta_R)):
        np.testing.assert_allclose(x, y, atol=1e-8)


def test_same_seed_same_sample(rng):
    b = random_belief(rng)
    a1 = sample(b, np.random.default_rng(3))
    a2 = sample(b, np.random.default_rng(3))
    np.testing.assert_array_equal(a1.A, a2.A)
    np.testing.assert_array_equal(a1.theta_R, a2.theta_R)


def test_prior_mean_without_data(rng):
    b = random_belief(rng)
    est = map_estimate(b, episode=4)
    A, B, c = b.matrices(b.row_means)
    np.testing.assert_array_equal(est.A, A)
    np.testing.assert_array_equal(est.B, B)
    assert est.episode == 4


def test_masked_entries_stay_zero(rng):
    b = random_belief(rng)
    s = sample(b, rng)
    full = np.hstack([s.A, s.B, s.c_off[:, None]])
    for i, mask in enumerate(b.masks):
        off = np.setdiff1d(np.arange(b.n_reg), mask)
        assert np.all(full[i, off] == 0.0)


def test_batch_update_equals_information_form(rng):
    for _ in range(50):
        b = random_belief(rng)
        X, U, Xn, R = _random_data(rng, b, int(rng.integers(1, 12)))
        post = update_with_data(b, X, U, Xn, R)
        phi = regressors(b, X, U)
        for i, mask in enumerate(b.masks):
            mu, S = _batch_posterior(b.row_means[i], b.row_covs[i], phi[:, mask], Xn[:, i], b.sigma_F[i])
            np.testing.assert_allclose(post.row_means[i], mu, atol=1e-8)
            np.testing.assert_allclose(post.row_covs[i], S, atol=1e-8)
        fixed = np.array([b.reward.fixed(x, u) for x, u in zip(X, U)])
        mu, S = _batch_posterior(b.reward_mean, b.reward_cov, b.reward.features.batch(X, U), R - fixed, b.sigma_R)
        np.testing.assert_allclose(post.reward_mean, mu, atol=1e-8)
        np.testing.assert_allclose(post.reward_cov, S, atol=1e-8)


def test_sequential_updates_equal_batch(rng):
    for _ in range(50):
        b = random_belief(rng)
        X, U, Xn, R = _random_data(rng, b, 10)
        batch = update_with_data(b, X, U, Xn, R)
        seq = b
        for s in (slice(0, 3), slice(3, 4), slice(4, 10)):
            seq = update_with_data(seq, X[s], U[s], Xn[s], R[s])
        for x, y in zip(batch.row_means + batch.row_covs, seq.row_means + seq.row_covs):
            np.testing.assert_allclose(x, y, atol=1e-8)
        np.testing.assert_allclose(batch.reward_mean, seq.reward_mean, atol=1e-8)


def test_update_from_episode_matches_arrays(rng):
    b = random_belief(rng)
    X, U, Xn, R = _random_data(rng, b, 5)
    ep = _episode(X, U, Xn, R)
    np.testing.assert_allclose(update(b, ep).reward_mean, update_with_data(b, X, U, Xn, R).reward_mean)


def test_data_shrinks_covariance_and_error(rng):
    b = random_belief(rng)
    truth = sample(b, np.random.default_rng(1))
    X = rng.standard_normal((400, b.n))
    U = rng.standard_normal((400, b.m))
    Xn = X @ truth.A.T + U @ truth.B.T + truth.c_off + b.sigma_F * rng.standard_normal((400, b.n))
    psi = b.reward.features.batch(X, U)
    fixed = np.array([b.reward.fixed(x, u) for x, u in zip(X, U)])
    R = fixed + psi @ truth.theta_R + b.sigma_R * rng.standard_normal(400)
    post = update_with_data(b, X, U, Xn, R)
    assert covariance_trace(post) < 0.05 * covariance_trace(b)

    class _T:
        A, B, c_off, reward = truth.A, truth.B, truth.c_off, truth.reward

    assert parameter_error(post, _T) < parameter_error(b, _T)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_posterior_covariances_remain_positive_definite(seed, k):
    rng = np.random.default_rng(seed)
    b = random_belief(rng)
    post = update_with_data(b, *_random_data(rng, b, k))
    for S in post.row_covs + (post.reward_cov,):
        np.testing.assert_allclose(S, S.T)
        assert np.linalg.eigvalsh(S).min() > 0
        assert np.trace(S) > 0
    assert isinstance(sample(post, rng), ParamSample)
