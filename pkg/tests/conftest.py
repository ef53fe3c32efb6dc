"""Shared builders for small linear systems and brute-force reference solvers."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from bayesmpc.model import (
    FeatureMap,
    GaussianBelief,
    InitialStateDist,
    LinearSystemTruth,
    MpcSpec,
    ParamSample,
    Polytope,
    RewardModel,
)


def quadratic_reward(Q, R, n_ell: int = 0) -> RewardModel:
    """Reward -(x'Qx + u'Ru) with ``n_ell`` zero features."""
    Q, R = np.atleast_2d(Q), np.atleast_2d(R)
    n, m = Q.shape[0], R.shape[0]
    H = np.zeros((n + m, n + m))
    H[:n, :n] = -2 * Q
    H[n:, n:] = -2 * R
    feats = FeatureMap(np.zeros((n_ell, n)), np.zeros((n_ell, m)), np.zeros(n_ell))
    return RewardModel(H, np.zeros(n + m), feats, np.zeros(n_ell))


def box_spec(n: int, m: int, T: int, x_max: float = 1e3, u_max: float = 1e3, delta=0.05, c1=1e4,
             c2: float = 0.0, reg_u: float = 0.0) -> MpcSpec:
    X = Polytope.box(-np.full(n, x_max), np.full(n, x_max))
    U = Polytope.box(-np.full(m, u_max), np.full(m, u_max))
    return MpcSpec(T, delta, c1, c2, X, U, reg_u)


def lq_sample(A, B, Q, R) -> ParamSample:
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    return ParamSample(A, B, np.zeros(A.shape[0]), quadratic_reward(Q, R))


def riccati_gains(A, B, Q, R, H: int) -> list[np.ndarray]:
    """Finite-horizon feedback gains K_k (u_k = -K_k x_k) with zero terminal cost."""
    A, B, Q, R = map(np.atleast_2d, (A, B, Q, R))
    P = np.zeros_like(Q)
    gains = []
    for _ in range(H):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
        P = 0.5 * (P + P.T)
        gains.append(K)
    return gains[::-1]


def enumerate_qp(P, q, G, h, tol: float = 1e-9):
    """Optimum of min 0.5 z'Pz + q'z s.t. Gz <= h by trying every active set (strictly convex P)."""
    d, k = q.size, h.size
    best, best_z = np.inf, None
    for r in range(min(k, d) + 1):
        for act in itertools.combinations(range(k), r):
            act = list(act)
            Ga = G[act]
            K = np.block([[P, Ga.T], [Ga, np.zeros((r, r))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-q, h[act]]))
            except np.linalg.LinAlgError:
                continue
            z, mu = sol[:d], sol[d:]
            if np.all(G @ z <= h + tol) and np.all(mu >= -tol):
                val = 0.5 * z @ P @ z + q @ z
                if val < best:
                    best, best_z = val, z
    return best_z, best


def random_qp(rng, d: int, k: int):
    """Strictly convex QP with a feasible interior point at a random location."""
    L = rng.standard_normal((d, d))
    P = L @ L.T + 0.1 * np.eye(d)
    q = rng.standard_normal(d) * 3
    G = rng.standard_normal((k, d))
    z0 = rng.standard_normal(d)
    h = G @ z0 + rng.uniform(0.1, 2.0, k)
    return P, q, G, h


def scalar_belief(mean=0.0, var=1.0, sigma_F=1.0) -> GaussianBelief:
    """x+ = a x + noise with only ``a`` unknown; no inputs enter the regression."""
    reward = RewardModel(np.zeros((2, 2)), np.zeros(2), FeatureMap(np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0)),
                         np.zeros(0))
    return GaussianBelief(1, 1, (np.array([0]),), (np.array([mean]),), (np.array([[var]]),), sigma_F, reward,
                          np.zeros(0), np.zeros((0, 0)), 1.0)


def random_belief(rng, n: int = 2, m: int = 1, n_ell: int = 2) -> GaussianBelief:
    masks, means, covs = [], [], []
    for i in range(n):
        mask = np.sort(rng.choice(n + m + 1, size=rng.integers(1, n + m + 2), replace=False))
        L = rng.standard_normal((mask.size, mask.size))
        masks.append(mask)
        means.append(rng.standard_normal(mask.size))
        covs.append(L @ L.T + 0.5 * np.eye(mask.size))
    feats = FeatureMap(rng.standard_normal((n_ell, n)), rng.standard_normal((n_ell, m)), rng.standard_normal(n_ell))
    reward = RewardModel(-np.eye(n + m), rng.standard_normal(n + m), feats, np.zeros(n_ell), 0.3)
    L = rng.standard_normal((n_ell, n_ell))
    return GaussianBelief(n, m, tuple(masks), tuple(means), tuple(covs), rng.uniform(0.2, 1.0, n), reward,
                          rng.standard_normal(n_ell), L @ L.T + 0.5 * np.eye(n_ell), 0.7)


def scalar_truth(a=0.5, b=1.0, c=0.0, sigma_F=0.0, sigma_R=0.0, x0=(0.5, 0.5), Q=1.0, R=1.0) -> LinearSystemTruth:
    return LinearSystemTruth(np.array([[a]]), np.array([[b]]), np.array([c]), sigma_F, quadratic_reward(Q, R), sigma_R,
                             InitialStateDist(np.array([x0[0]]), np.array([x0[1]])))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
