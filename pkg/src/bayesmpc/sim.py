"""Ground-truth plant, closed-loop episodes and the episodic learning loop.

Randomness is drawn from counter-based streams keyed by (seed, purpose,
episode, ...) so the plant noise an agent sees never depends on which agent
is running or on what it did earlier.  That gives paired (common random
number) comparisons between agents for free.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import (
    EpisodeRecord,
    GaussianBelief,
    InitialStateDist,
    LearningTrace,
    LinearSystemTruth,
    MpcSpec,
    ParamSample,
    SpecMismatch,
)
from .mpc import MpcPolicy, MpcSolveError, slack_of_state
from .posterior import map_estimate, sample, update
from .qp import QpSettings

ORACLE = "Oracle"
BAYES = "BayesianMpc"
NOMINAL = "NominalPosteriorMpc"
AGENTS = (ORACLE, BAYES, NOMINAL)

_PURPOSE = {"truth": 1, "plant": 2, "sample": 3, "regret": 4, "lipschitz": 5}


class EpisodeSolveError(RuntimeError):
    """An MPC solve failed inside an episode; carries where it happened."""

    def __init__(self, agent, seed, episode, t, cause):
        super().__init__(f"agent {agent}, seed {seed}, episode {episode}, step {t}: {cause}")
        self.agent, self.seed, self.episode, self.t = agent, seed, episode, t


@dataclass(frozen=True)
class Streams:
    """Independent generators addressed by (purpose, counters...)."""

    seed: int

    def rng(self, purpose: str, *counters: int) -> np.random.Generator:
        return np.random.default_rng([int(self.seed), _PURPOSE[purpose], *map(int, counters)])


@dataclass(frozen=True)
class EpisodeNoise:
    """Everything random about one episode of the plant."""

    x0: np.ndarray
    eps_F: np.ndarray
    eps_R: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, x0_dist: InitialStateDist, T: int, n: int) -> "EpisodeNoise":
        x0 = x0_dist.sample(rng)
        return cls(x0, rng.standard_normal((T, n)), rng.standard_normal(T))


def step_truth(truth: LinearSystemTruth, x, u, rng: np.random.Generator, t: int = 0):
    """One plant transition with fresh noise from ``rng``."""
    eps_F = rng.standard_normal(truth.n)
    eps_R = rng.standard_normal()
    return _step(truth, np.asarray(x, float), np.asarray(u, float), t, eps_F, eps_R)


def _step(truth, x, u, t, eps_F, eps_R):
    if x.shape != (truth.n,) or u.shape != (truth.m,):
        raise SpecMismatch("state or input has the wrong dimension")
    x_next = truth.A @ x + truth.B @ u + truth.c_off + truth.sigma_F * eps_F
    r = truth.reward(t, x, u) + truth.sigma_R * eps_R
    return x_next, float(r)


def run_episode(
    theta_policy: ParamSample | MpcPolicy,
    truth: LinearSystemTruth,
    spec: MpcSpec,
    x0=None,
    rng: np.random.Generator | None = None,
    qp_settings: QpSettings | None = None,
    noise: EpisodeNoise | None = None,
    episode: int = 0,
    hints: dict | None = None,
) -> EpisodeRecord:
    """Apply the MPC law for theta_policy to the true plant for T steps.

    Noise comes either from a pre-drawn ``noise`` (which also fixes x0) or
    from ``rng`` step by step.  ``hints`` maps t to an active set from an
    earlier episode; it only warm-starts the solver and is updated in place.
    """
    policy = theta_policy if isinstance(theta_policy, MpcPolicy) else MpcPolicy(theta_policy, spec, qp_settings)
    T, n, m = spec.T, truth.n, truth.m
    if noise is None:
        if rng is None:
            raise ValueError("either noise or rng is required")
        noise = EpisodeNoise(np.asarray(x0, float), rng.standard_normal((T, n)), rng.standard_normal(T))
    x = np.array(noise.x0, dtype=float)
    X, U, Xn, R, rho, obj = (np.zeros((T, n)), np.zeros((T, m)), np.zeros((T, n)), np.zeros(T),
                             np.zeros((T, spec.n_x)), np.zeros(T))
    prev = None
    for t in range(T):
        try:
            prev = policy.solve(t, x, warm=prev, active_guess=None if hints is None else hints.get(t))
        except MpcSolveError as exc:
            exc.t = t
            raise
        if hints is not None:
            hints[t] = prev.qp_solution.active_set
        u = prev.u_first
        x_next, r = _step(truth, x, u, t, noise.eps_F[t], noise.eps_R[t])
        X[t], U[t], Xn[t], R[t] = x, u, x_next, r
        rho[t] = slack_of_state(x, spec)
        obj[t] = prev.objective
        x = x_next
    return EpisodeRecord(episode, X, U, Xn, R, rho, obj, policy.theta)


def choose_theta(agent: str, belief: GaussianBelief, truth: LinearSystemTruth, rng, episode: int) -> ParamSample:
    if agent == ORACLE:
        return truth.as_sample(episode)
    if agent == BAYES:
        return sample(belief, rng, episode)
    if agent == NOMINAL:
        return map_estimate(belief, episode)
    raise ValueError(f"unknown agent {agent!r}; expected one of {AGENTS}")


def run_learning(
    agent: str,
    truth: LinearSystemTruth,
    prior: GaussianBelief,
    N: int,
    spec: MpcSpec,
    seed: int = 0,
    qp_settings: QpSettings | None = None,
    on_episode: Callable[[EpisodeRecord], None] | None = None,
) -> LearningTrace:
    """Run N episodes of posterior-sampling (or nominal, or oracle) MPC."""
    if N < 1:
        raise ValueError("N must be >= 1")
    streams = Streams(seed)
    trace = LearningTrace(agent, seed)
    belief = prior
    hints: dict = {}
    for e in range(N):
        theta = choose_theta(agent, belief, truth, streams.rng("sample", e), e)
        noise = EpisodeNoise.draw(streams.rng("plant", e), truth.x0_dist, spec.T, truth.n)
        try:
            record = run_episode(theta, truth, spec, qp_settings=qp_settings, noise=noise, episode=e, hints=hints)
        except MpcSolveError as exc:
            raise EpisodeSolveError(agent, seed, e, getattr(exc, "t", None), exc) from exc
        trace.beliefs.append(belief)
        trace.episodes.append(record)
        if agent != ORACLE:
            belief = update(belief, record)
        if on_episode is not None:
            on_episode(record)
    trace.beliefs.append(belief)
    return trace


def draw_truth(prior: GaussianBelief, x0_dist: InitialStateDist, rng: np.random.Generator) -> LinearSystemTruth:
    """A plant realization drawn from the prior, with the prior's noise levels."""
    th = sample(prior, rng)
    return LinearSystemTruth(th.A, th.B, th.c_off, prior.sigma_F, th.reward, prior.sigma_R, x0_dist)


@dataclass
class SeedRun:
    seed: int
    truth: LinearSystemTruth
    traces: dict = field(default_factory=dict)


def run_bayes_experiment(prior, x0_dist, spec, N, seeds, agents=AGENTS, qp_settings=None) -> list[SeedRun]:
    """Per seed: draw a truth from the prior and run every agent on it with paired noise."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    out = []
    for seed in seeds:
        truth = draw_truth(prior, x0_dist, Streams(seed).rng("truth"))
        run = SeedRun(seed, truth)
        for agent in agents:
            run.traces[agent] = run_learning(agent, truth, prior, N, spec, seed, qp_settings)
        out.append(run)
    return out
