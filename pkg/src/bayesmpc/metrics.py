"""Regret and safety estimators plus theory-side diagnostics.

Value estimates use M closed-loop rollouts on the true plant with the mean
(noise-free) reward.  Rollout noise comes from streams that depend only on
(seed, rollout index), so every policy evaluated for one truth sees the same
initial states and disturbances.  Regret of a policy is then a paired
difference, and the regret of the true parameters is exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import InitialStateDist, LearningTrace, LinearSystemTruth, MpcSpec, ParamSample, RewardModel
from .mpc import MpcPolicy, penalty, slack_of_state
from .qp import QpSettings

OBSERVED = "Observed"
EXPECTED = "Expected"
Z_95 = 1.6448536269514722
UNSAFE_TOL = 1e-9


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class RolloutNoise:
    """M initial states and disturbance sequences shared by every evaluated policy."""

    x0: np.ndarray
    eps_F: np.ndarray

    @property
    def M(self) -> int:
        return self.x0.shape[0]

    @classmethod
    def draw(cls, x0_dist: InitialStateDist, T: int, M: int, rng_for: Callable[[int], np.random.Generator]):
        if M < 1:
            raise ValueError("M must be >= 1")
        x0, eps = [], []
        for k in range(M):
            rng = rng_for(k)
            x0.append(x0_dist.sample(rng))
            eps.append(rng.standard_normal((T, x0[-1].size)))
        return cls(np.array(x0), np.array(eps))


@dataclass
class PolicyEvaluation:
    """Per-rollout closed-loop values and per-step constraint excess."""

    values: np.ndarray
    excess: np.ndarray

    @property
    def value(self) -> float:
        return float(np.mean(self.values))

    @property
    def stderr(self) -> float:
        M = self.values.size
        return float(np.std(self.values, ddof=1) / math.sqrt(M)) if M > 1 else 0.0

    def expected_unsafe(self) -> bool:
        """True iff some step's mean excess is positive at the 95% lower confidence bound."""
        M = self.excess.shape[0]
        mean = self.excess.mean(axis=0)
        sd = self.excess.std(axis=0, ddof=1) if M > 1 else np.zeros_like(mean)
        return bool(np.any(mean - Z_95 * sd / math.sqrt(M) > UNSAFE_TOL))


def evaluate_policy(
    theta: ParamSample | MpcPolicy,
    truth: LinearSystemTruth,
    spec: MpcSpec,
    noise: RolloutNoise,
    qp_settings: QpSettings | None = None,
    hints: list[dict] | None = None,
    record: dict | None = None,
) -> PolicyEvaluation:
    """Roll out the MPC law for theta on the true plant for every shared noise path.

    ``hints`` is a list of dicts mapping (rollout, t) to active sets seen by
    other policies on the same noise path, tried in order; they only speed
    up the solver.  ``record``, if given, receives this policy's active sets.
    """
    policy = theta if isinstance(theta, MpcPolicy) else MpcPolicy(theta, spec, qp_settings)
    T, M = spec.T, noise.M
    X = noise.x0.astype(float).copy()
    values = np.zeros(M)
    excess = np.zeros((M, T))
    prev = [None] * M
    for t in range(T):
        for k in range(M):
            x = X[k]
            guess = [hd.get((k, t)) for hd in hints] if hints else None
            res = policy.solve(t, x, warm=prev[k], active_guess=guess)
            if record is not None:
                record[(k, t)] = res.qp_solution.active_set
            prev[k] = res
            u = res.u_first
            values[k] += truth.reward(t, x, u) - penalty(slack_of_state(x, spec), spec)
            excess[k, t] = max(0.0, float(np.max(spec.X.g(x))) - 1.0) if spec.n_x else 0.0
            X[k] = truth.A @ x + truth.B @ u + truth.c_off + truth.sigma_F * noise.eps_F[k, t]
    return PolicyEvaluation(values, excess)


def estimate_value(truth, theta_policy, x0_dist, spec, M, rng: np.random.Generator, qp_settings=None):
    """(V_hat, stderr) of the closed-loop value from M rollouts drawn from ``rng``."""
    noise = RolloutNoise.draw(x0_dist, spec.T, M, lambda k: rng)
    ev = evaluate_policy(theta_policy, truth, spec, noise, qp_settings)
    return ev.value, ev.stderr


def episodic_regret(oracle: PolicyEvaluation, policy: PolicyEvaluation) -> tuple[float, float]:
    """Paired regret estimate V_oracle - V_policy and its standard error."""
    d = oracle.values - policy.values
    M = d.size
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0


def cumulative_regret(per_episode) -> np.ndarray:
    """Prefix sums; negative Monte Carlo estimates are kept as they are."""
    return np.cumsum(np.asarray(per_episode, dtype=float))


def count_unsafe_episodes(
    trace: LearningTrace | None = None,
    mode: str = OBSERVED,
    spec: MpcSpec | None = None,
    evaluations: list[PolicyEvaluation] | None = None,
) -> int:
    """Number of unsafe episodes.

    Observed mode inspects realized states in ``trace``.  Expected mode uses
    one rollout evaluation per episode (frozen theta_e on the true plant).
    """
    if mode == OBSERVED:
        if trace is None or spec is None:
            raise ValueError("Observed mode needs a trace and the MPC spec")
        count = 0
        for ep in trace.episodes:
            g = np.array([spec.X.g(x) for x in ep.x])
            if g.size and np.max(g) > 1.0 + UNSAFE_TOL:
                count += 1
        return count
    if mode == EXPECTED:
        if evaluations is None:
            raise ValueError("Expected mode needs per-episode rollout evaluations")
        return int(sum(ev.expected_unsafe() for ev in evaluations))
    raise ValueError(f"unknown mode {mode!r}")


def unsafe_bound(CR_N: float, c_delta: float) -> int:
    if c_delta <= 0:
        raise ValueError("c_delta must be positive")
    return max(0, math.ceil(CR_N / c_delta))


def estimate_policy_lipschitz(
    theta: ParamSample | MpcPolicy,
    spec: MpcSpec,
    t: int,
    state_sampler: Callable[[np.random.Generator], np.ndarray],
    n_pairs: int,
    rng: np.random.Generator,
    pair_radius: float | None = None,
    qp_settings: QpSettings | None = None,
) -> float:
    """Largest observed ||u(x) - u(x')|| / ||x - x'|| over sampled state pairs.

    With ``pair_radius`` the partner x' is x plus a random direction of that
    length, which probes the local gain; otherwise both states are drawn
    independently from ``state_sampler``.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    policy = theta if isinstance(theta, MpcPolicy) else MpcPolicy(theta, spec, qp_settings)
    best = 0.0
    for _ in range(n_pairs):
        x = np.asarray(state_sampler(rng), dtype=float)
        if pair_radius is None:
            y = np.asarray(state_sampler(rng), dtype=float)
        else:
            d = rng.standard_normal(x.size)
            y = x + pair_radius * d / np.linalg.norm(d)
        dist = np.linalg.norm(x - y)
        if dist == 0:
            continue
        ux = policy.solve(t, x).u_first
        uy = policy.solve(t, y).u_first
        best = max(best, float(np.linalg.norm(ux - uy) / dist))
    return best


def value_lipschitz_bound(A, B, K_bar: float, L_ell_per_step, T: int) -> float:
    """L_V = sum_{j=1}^{T-1} L_l(j) L_x(j) (1 + K) with L_x(j) = (|A| + |B| K)^j.

    ``A`` and ``B`` may be matrices (spectral norms are taken) or norms.
    """
    if K_bar < 0 or T < 2:
        raise ValueError("requires K_bar >= 0 and T >= 2")
    a = float(np.linalg.norm(np.atleast_2d(A), 2)) if np.ndim(A) else float(A)
    b = float(np.linalg.norm(np.atleast_2d(B), 2)) if np.ndim(B) else float(B)
    L = np.broadcast_to(np.asarray(L_ell_per_step, dtype=float), (T,))
    growth = a + b * K_bar
    return float(sum(L[j] * growth**j * (1.0 + K_bar) for j in range(1, T)))


def reward_lipschitz(reward: RewardModel, spec: MpcSpec, x_box, weight_bound) -> float:
    """Bound on the gradient norm of l - I(rho(x)) over the operating box times U.

    Interval arithmetic on |H w| + |g + C' theta| plus the largest penalty slope.
    """
    n, m = spec.X.dim, spec.U.dim
    ulo, uhi = spec.U.bounding_box()
    lo = np.concatenate([np.broadcast_to(x_box[0], (n,)), ulo])
    hi = np.concatenate([np.broadcast_to(x_box[1], (n,)), uhi])
    wabs = np.maximum(np.abs(lo), np.abs(hi))
    C = np.hstack([reward.features.Cx, reward.features.Cu])
    wb = np.abs(np.broadcast_to(np.asarray(weight_bound, dtype=float), (reward.n_ell,)))
    grad = np.abs(reward.H) @ wabs + np.abs(reward.g) + np.abs(C).T @ wb
    F = spec.X.F
    g_hi = np.sum(np.maximum(F * hi[:n], F * lo[:n]), axis=1)
    rho_max = np.maximum(0.0, g_hi + spec.X.offset - (1.0 - spec.delta[0]))
    slope = (spec.c1 + 2.0 * spec.c2 * rho_max) @ np.abs(spec.X.F)
    grad[:n] += slope
    return float(np.linalg.norm(grad))


def regret_bound_ingredients(n, m, n_ell, sigma_R, sigma_F, L_V, T, N_series) -> np.ndarray:
    """Shape reference B(N) = s_R n_l sqrt(2TN) + L_V s_F n sqrt(n(n+m)TN); constants omitted."""
    N = np.asarray(N_series, dtype=float)
    sF = float(np.max(sigma_F))
    return sigma_R * n_ell * np.sqrt(2 * T * N) + L_V * sF * n * np.sqrt(n * (n + m) * T * N)


def sublinearity_fit(CR_series) -> float:
    """Least-squares slope of log CR(N) against log N over the second half of the series."""
    cr = np.asarray(CR_series, dtype=float)
    N = np.arange(1, cr.size + 1)
    half = N > cr.size / 2
    use = half & (cr > 0)
    if np.count_nonzero(use) < 8:
        raise InsufficientData("need at least 8 positive points in the second half")
    slope, _ = np.polyfit(np.log(N[use]), np.log(cr[use]), 1)
    return float(slope)


@dataclass
class AgentSeedMetrics:
    """Regret and safety numbers of one agent on one truth realization."""

    agent: str
    seed: int
    regret: np.ndarray
    regret_stderr: np.ndarray
    cumulative: np.ndarray
    cumulative_stderr: float
    unsafe_observed: int
    unsafe_expected: int
    expected_unsafe_flags: np.ndarray
    observed_unsafe_flags: np.ndarray
    max_slack: np.ndarray


def assess_seed(
    truth: LinearSystemTruth,
    traces: dict,
    spec: MpcSpec,
    M: int,
    seed: int,
    qp_settings: QpSettings | None = None,
) -> dict:
    """Regret and unsafe-episode metrics for every agent trace of one truth."""
    from .sim import Streams

    streams = Streams(seed)
    noise = RolloutNoise.draw(truth.x0_dist, spec.T, M, lambda k: streams.rng("regret", k))
    oracle_sets: dict = {}
    oracle = evaluate_policy(truth.as_sample(), truth, spec, noise, qp_settings, record=oracle_sets)
    cache: dict = {}
    out = {}
    for agent, trace in traces.items():
        evs = []
        previous: dict = {}
        for ep in trace.episodes:
            key = _theta_key(ep.theta)
            if key not in cache:
                if key == _theta_key(truth.as_sample()):
                    cache[key] = oracle
                else:
                    # the previous policy of the same agent is usually the closest warm start
                    cache[key] = evaluate_policy(ep.theta, truth, spec, noise, qp_settings, hints=[previous, oracle_sets], record=previous)
            evs.append(cache[key])
        diffs = np.array([oracle.values - ev.values for ev in evs])
        regret = diffs.mean(axis=1)
        stderr = diffs.std(axis=1, ddof=1) / math.sqrt(M) if M > 1 else np.zeros(len(evs))
        per_rollout_cr = diffs.sum(axis=0)
        cr_se = float(per_rollout_cr.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0
        obs_flags = np.array([np.max(np.array([spec.X.g(x) for x in ep.x])) > 1.0 + UNSAFE_TOL for ep in trace.episodes])
        exp_flags = np.array([ev.expected_unsafe() for ev in evs])
        out[agent] = AgentSeedMetrics(
            agent, seed, regret, stderr, cumulative_regret(regret), cr_se,
            int(obs_flags.sum()), int(exp_flags.sum()), exp_flags, obs_flags,
            np.array([float(np.max(ep.rho)) if ep.rho.size else 0.0 for ep in trace.episodes]),
        )
    return out


def _theta_key(theta: ParamSample) -> bytes:
    parts = [theta.A, theta.B, theta.c_off, theta.reward.learned_weights]
    return b"".join(np.ascontiguousarray(p, dtype=float).tobytes() for p in parts)


@dataclass
class AgentSummary:
    agent: str
    seeds: list
    mean_cumulative: np.ndarray
    q25_cumulative: np.ndarray
    q75_cumulative: np.ndarray
    final_mean: float
    final_stderr: float
    sublinearity: float | None
    unsafe_observed: list
    unsafe_expected: list
    unsafe_bounds: list
    theorem3_holds: list


@dataclass
class MetricsReport:
    agents: dict = field(default_factory=dict)
    c_delta: float = 1.0
    L_V: float | None = None
    bound_series: np.ndarray | None = None

    def reduction(self, agent: str, baseline: str) -> float:
        """Relative reduction of final mean cumulative regret versus a baseline."""
        b = self.agents[baseline].final_mean
        return float((b - self.agents[agent].final_mean) / b) if b != 0 else 0.0

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (np.floating, np.integer, np.bool_)):
                return v.item()
            if isinstance(v, list):
                return [conv(x) for x in v]
            return v

        return {
            "c_delta": self.c_delta,
            "L_V": self.L_V,
            "bound_series_shape_reference": conv(self.bound_series),
            "agents": {a: {k: conv(v) for k, v in s.__dict__.items()} for a, s in self.agents.items()},
        }


def summarize(per_seed: list[dict], c_delta: float, L_V=None, bound_series=None) -> MetricsReport:
    """Aggregate per-seed agent metrics across truths."""
    report = MetricsReport(c_delta=c_delta, L_V=L_V, bound_series=bound_series)
    agents = list(per_seed[0]) if per_seed else []
    for agent in agents:
        rows = [s[agent] for s in per_seed]
        curves = np.array([r.cumulative for r in rows])
        mean = curves.mean(axis=0)
        finals = curves[:, -1]
        try:
            p = sublinearity_fit(mean)
        except InsufficientData:
            p = None
        bounds = [unsafe_bound(r.cumulative[-1] + 2 * r.cumulative_stderr, c_delta) for r in rows]
        report.agents[agent] = AgentSummary(
            agent,
            [r.seed for r in rows],
            mean,
            np.percentile(curves, 25, axis=0),
            np.percentile(curves, 75, axis=0),
            float(mean[-1]),
            float(finals.std(ddof=1) / math.sqrt(len(rows))) if len(rows) > 1 else 0.0,
            p,
            [r.unsafe_observed for r in rows],
            [r.unsafe_expected for r in rows],
            bounds,
            [r.unsafe_expected <= b for r, b in zip(rows, bounds)],
        )
    return report
