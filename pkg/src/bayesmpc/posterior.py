"""Conjugate Gaussian updates, posterior sampling and the posterior mean.

Each dynamics row is an independent Bayesian linear regression of x+_i on
its masked regressor [x; u; 1][mask_i] with known noise sigma_F[i]; the
reward weights are a regression of r - fixed(x, u) on psi(t, x, u) with
noise sigma_R.  Updates accumulate in information form and refactorize once
per call.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Iterable

import numpy as np
import scipy.linalg as sla

from .model import EpisodeRecord, GaussianBelief, ParamSample, SpecMismatch

JITTER = 1e-10


class NonPsd(np.linalg.LinAlgError):
    """A posterior covariance lost positive definiteness."""


def _cholesky(S: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, retrying once with a relative jitter."""
    if S.size == 0:
        return S.copy()
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    scale = max(float(np.trace(S)) / S.shape[0], 1e-300)
    try:
        return np.linalg.cholesky(S + JITTER * scale * np.eye(S.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NonPsd("covariance is not positive definite") from exc


def _conjugate(mean, cov, Phi, y, sigma):
    """Posterior of a Gaussian prior (mean, cov) under y = Phi w + N(0, sigma^2)."""
    if Phi.shape[0] == 0 or mean.size == 0:
        return mean, cov
    L = _cholesky(cov)
    prec = sla.cho_solve((L, True), np.eye(mean.size))
    info = prec @ mean
    w = 1.0 / sigma**2
    prec = prec + w * Phi.T @ Phi
    info = info + w * Phi.T @ y
    Lp = _cholesky(0.5 * (prec + prec.T))
    new_cov = sla.cho_solve((Lp, True), np.eye(mean.size))
    new_cov = 0.5 * (new_cov + new_cov.T)
    return new_cov @ info, new_cov


def regressors(belief: GaussianBelief, X, U) -> np.ndarray:
    """Rows [x_t; u_t; 1] for a batch of transitions."""
    X = np.atleast_2d(X)
    return np.hstack([X, np.atleast_2d(U), np.ones((X.shape[0], 1))])


def update_with_data(belief: GaussianBelief, X, U, X_next, R) -> GaussianBelief:
    """Condition on transitions (x_t, u_t, x_{t+1}, r_t) stacked row-wise."""
    X = np.asarray(X, dtype=float).reshape(-1, belief.n)
    if X.shape[0] == 0:
        return belief
    U = np.asarray(U, dtype=float).reshape(-1, belief.m)
    X_next = np.asarray(X_next, dtype=float).reshape(-1, belief.n)
    R = np.asarray(R, dtype=float).ravel()
    if not (U.shape[0] == X_next.shape[0] == R.size == X.shape[0]):
        raise SpecMismatch("transition arrays have different lengths")
    phi = regressors(belief, X, U)
    means, covs = [], []
    for i, (mask, mu, S) in enumerate(zip(belief.masks, belief.row_means, belief.row_covs)):
        m_i, S_i = _conjugate(mu, S, phi[:, mask], X_next[:, i], belief.sigma_F[i])
        means.append(m_i)
        covs.append(S_i)
    reward = belief.reward
    fixed = np.array([reward.fixed(x, u) for x, u in zip(X, U)]) if np.any(reward.H) or np.any(reward.g) or reward.const else 0.0
    psi = reward.features.batch(X, U)
    rm, rc = _conjugate(belief.reward_mean, belief.reward_cov, psi, R - fixed, belief.sigma_R)
    return replace(belief, row_means=tuple(means), row_covs=tuple(covs), reward_mean=rm, reward_cov=rc)


def update(belief: GaussianBelief, episodes: EpisodeRecord | Iterable[EpisodeRecord]) -> GaussianBelief:
    """Posterior after observing one episode or a list of episodes."""
    if isinstance(episodes, EpisodeRecord):
        episodes = [episodes]
    episodes = list(episodes)
    if not episodes:
        return belief
    for ep in episodes:
        if ep.x.shape[1] != belief.n or ep.u.shape[1] != belief.m:
            raise SpecMismatch("episode dimensions do not match the belief")
    return update_with_data(
        belief,
        np.vstack([ep.x for ep in episodes]),
        np.vstack([ep.u for ep in episodes]),
        np.vstack([ep.x_next for ep in episodes]),
        np.concatenate([ep.r for ep in episodes]),
    )


def sample(belief: GaussianBelief, rng: np.random.Generator, episode: int = -1) -> ParamSample:
    """Draw (A, B, c_off, theta_R) from the belief; masked-out entries are exactly zero."""
    rows = []
    for mu, S in zip(belief.row_means, belief.row_covs):
        rows.append(mu + _cholesky(S) @ rng.standard_normal(mu.size))
    theta = belief.reward_mean + _cholesky(belief.reward_cov) @ rng.standard_normal(belief.reward_mean.size)
    A, B, c = belief.matrices(rows)
    return ParamSample(A, B, c, belief.reward.with_weights(theta), episode)


def map_estimate(belief: GaussianBelief, episode: int = -1) -> ParamSample:
    """Posterior mean (the MAP estimate for a Gaussian posterior)."""
    A, B, c = belief.matrices(belief.row_means)
    return ParamSample(A, B, c, belief.reward.with_weights(belief.reward_mean), episode)


def covariance_trace(belief: GaussianBelief) -> float:
    return float(sum(np.trace(S) for S in belief.row_covs) + np.trace(belief.reward_cov))


def parameter_error(belief: GaussianBelief, truth) -> float:
    """Euclidean distance between the posterior mean and the true parameters."""
    est = map_estimate(belief)
    parts = [est.A - truth.A, est.B - truth.B, est.c_off - truth.c_off, est.theta_R - truth.reward.learned_weights]
    return float(np.sqrt(sum(np.sum(p**2) for p in parts)))
