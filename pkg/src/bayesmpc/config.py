"""Experiment configuration: a TOML file with system, reward, constraints, mpc and experiment tables.

The prior over the plant is given as mean matrices (A, B, c_off) plus a
regressor mask per state row and either per-entry standard deviations
(A_std, B_std, c_std) or full per-row covariances.  Every error message
starts with the dotted field name it refers to so that command-line users
can find the offending entry.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .model import (
    FeatureMap,
    GaussianBelief,
    InitialStateDist,
    MpcSpec,
    Polytope,
    RewardModel,
    UnboundedSet,
    reward_bound_cR,
    tightening_schedule,
    validate,
)
from .mpc import min_penalty_weight
from .sim import AGENTS

C1_MODES = ("theorem3", "fixed")


class ConfigError(ValueError):
    """Invalid configuration; ``messages`` holds one "field: problem" line per issue."""

    def __init__(self, messages):
        self.messages = list(messages)
        super().__init__("\n".join(self.messages))


@dataclass(frozen=True)
class ExperimentConfig:
    prior: GaussianBelief
    spec: MpcSpec
    x0_dist: InitialStateDist
    x_box: tuple
    c_delta: float
    c1_mode: str
    weight_bound_std: float
    N: int
    seeds: tuple
    M: int
    agents: tuple = AGENTS
    name: str = "experiment"
    c_R: float = field(default=float("nan"), compare=False)

    @property
    def weight_bound(self) -> np.ndarray:
        std = np.sqrt(np.diag(self.prior.reward_cov))
        return np.abs(self.prior.reward_mean) + self.weight_bound_std * std


def parse_seeds(text) -> tuple:
    """'A..B' (inclusive), a single integer, or a list of integers."""
    if isinstance(text, (list, tuple)):
        return tuple(int(s) for s in text)
    if isinstance(text, int):
        return (text,)
    m = re.fullmatch(r"\s*(\d+)\s*\.\.\s*(\d+)\s*", str(text))
    if m:
        a, b = int(m.group(1)), int(m.group(2))
        if b < a:
            raise ValueError(f"empty seed range {text!r}")
        return tuple(range(a, b + 1))
    if re.fullmatch(r"\s*\d+\s*", str(text)):
        return (int(text),)
    raise ValueError(f"seed range must look like 'A..B', got {text!r}")


class _Reader:
    """Typed access to nested tables that records every problem instead of stopping at the first."""

    def __init__(self, data: dict):
        self.data = data
        self.errors: list[str] = []

    def get(self, path: str, default=..., kind=None):
        node = self.data
        for part in path.split("."):
            if not isinstance(node, dict) or part not in node:
                if default is ...:
                    self.errors.append(f"{path}: missing")
                    return None
                return default
            node = node[part]
        if kind is None:
            return node
        try:
            return kind(node)
        except (TypeError, ValueError) as exc:
            self.errors.append(f"{path}: {exc}")
            return None

    def array(self, path: str, ndim: int, default=..., shape=None):
        raw = self.get(path, default)
        if raw is None:
            return None
        try:
            a = np.asarray(raw, dtype=float)
        except (TypeError, ValueError):
            self.errors.append(f"{path}: must be a numeric array")
            return None
        if ndim == 2 and a.size == 0:
            a = a.reshape(0, shape[1] if shape else 0)
        if a.ndim != ndim:
            self.errors.append(f"{path}: expected a {ndim}-d array, got {a.ndim}-d")
            return None
        if shape is not None and a.shape != tuple(shape):
            self.errors.append(f"{path}: expected shape {tuple(shape)}, got {a.shape}")
            return None
        if not np.all(np.isfinite(a)):
            self.errors.append(f"{path}: entries must be finite")
            return None
        return a


def parse_config(data: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed TOML tables; raises ConfigError listing every problem."""
    r = _Reader(data)
    A = r.array("system.A", 2)
    if A is None or A.shape[0] != A.shape[1]:
        if A is not None:
            r.errors.append("system.A: must be square")
        raise ConfigError(r.errors)
    n = A.shape[0]
    B = r.array("system.B", 2)
    if B is None or B.shape[0] != n:
        if B is not None:
            r.errors.append(f"system.B: must have {n} rows")
        raise ConfigError(r.errors)
    m = B.shape[1]
    c_off = r.array("system.c_off", 1, shape=(n,))
    sigma_F = r.array("system.sigma_F", 1)
    if sigma_F is not None and sigma_F.size == 1:
        sigma_F = np.full(n, float(sigma_F[0]))
    raw_masks = r.get("system.masks", None)
    if raw_masks is None:
        masks = [np.arange(n + m + 1) for _ in range(n)]
    else:
        try:
            masks = [np.asarray(k, dtype=int).ravel() for k in raw_masks]
        except (TypeError, ValueError):
            r.errors.append("system.masks: must be lists of integer indices")
            masks = []
        if len(masks) != n:
            r.errors.append(f"system.masks: need one mask per state ({n})")
        for i, k in enumerate(masks):
            if k.size and (k.min() < 0 or k.max() > n + m or np.unique(k).size != k.size):
                r.errors.append(f"system.masks[{i}]: indices must be distinct and within [0, {n + m}]")

    covs = None
    if "row_covs" in data.get("system", {}):
        raw = r.get("system.row_covs")
        try:
            covs = [np.atleast_2d(np.asarray(S, dtype=float)) for S in raw]
        except (TypeError, ValueError):
            r.errors.append("system.row_covs: must be a list of matrices")
    else:
        A_std = r.array("system.A_std", 2, shape=(n, n))
        B_std = r.array("system.B_std", 2, shape=(n, m))
        c_std = r.array("system.c_std", 1, shape=(n,))
        if A_std is not None and B_std is not None and c_std is not None and len(masks) == n:
            full = np.hstack([A_std, B_std, c_std[:, None]])
            covs = [np.diag(full[i, k] ** 2) for i, k in enumerate(masks)]

    Cx = r.array("reward.features.Cx", 2)
    Cu = r.array("reward.features.Cu", 2)
    n_ell = Cx.shape[0] if Cx is not None else 0
    c0 = r.array("reward.features.c0", 1, default=None) if "c0" in data.get("reward", {}).get("features", {}) else np.zeros(n_ell)
    Hq = r.array("reward.fixed_quadratic.H", 2, default=None)
    gq = r.array("reward.fixed_quadratic.g", 1, default=None)
    const = r.get("reward.fixed_quadratic.const", 0.0, float)
    w_mean = r.array("reward.weights_mean", 1)
    w_cov = None
    if "weights_cov" in data.get("reward", {}):
        w_cov = r.array("reward.weights_cov", 2)
    else:
        w_std = r.array("reward.weights_std", 1)
        if w_std is not None:
            w_cov = np.diag(w_std**2)
    sigma_R = r.get("reward.sigma_R", kind=float)
    wb_std = r.get("reward.weight_bound_std", 3.0, float)

    A_x = r.array("constraints.A_x", 2)
    b_x = r.array("constraints.b_x", 1)
    A_u = r.array("constraints.A_u", 2)
    b_u = r.array("constraints.b_u", 1)
    box_lo = r.array("constraints.x_box_low", 1)
    box_hi = r.array("constraints.x_box_high", 1)

    T = r.get("mpc.T", kind=int)
    c1_mode = r.get("mpc.c1_mode", "theorem3", str)
    c2 = r.get("mpc.c2", 0.0, float)
    c_delta = r.get("mpc.c_delta", 1.0, float)
    reg_u = r.get("mpc.reg_u", 1e-6, float)
    if "delta" in data.get("mpc", {}):
        delta = r.array("mpc.delta", 1)
        if delta is not None and T is not None and delta.size != T:
            r.errors.append(f"mpc.delta: need T = {T} entries, got {delta.size}")
    else:
        d0 = r.get("mpc.delta0", kind=float)
        dmax = r.get("mpc.delta_max", kind=float)
        delta = tightening_schedule(T, d0, dmax) if None not in (T, d0, dmax) and T >= 1 else None
    if c1_mode not in C1_MODES:
        r.errors.append(f"mpc.c1_mode: must be one of {C1_MODES}")

    N = r.get("experiment.N", kind=int)
    seeds = r.get("experiment.seeds", "0..0", parse_seeds)
    M = r.get("experiment.M_rollouts", kind=int)
    x0_lo = r.array("experiment.x0_low", 1, shape=(n,))
    x0_hi = r.array("experiment.x0_high", 1, shape=(n,))
    agents = tuple(r.get("experiment.agents", list(AGENTS), list) or ())
    name = r.get("experiment.name", "experiment", str)
    for a in agents:
        if a not in AGENTS:
            r.errors.append(f"experiment.agents: unknown agent {a!r}; expected a subset of {AGENTS}")
    if N is not None and N < 1:
        r.errors.append("experiment.N: must be >= 1")
    if M is not None and M < 1:
        r.errors.append("experiment.M_rollouts: must be >= 1")
    if r.errors:
        raise ConfigError(r.errors)

    try:
        features = FeatureMap(Cx, Cu, c0)
        reward = RewardModel(
            np.zeros((n + m, n + m)) if Hq is None else Hq,
            np.zeros(n + m) if gq is None else gq,
            features,
            w_mean,
            const,
        )
        X = Polytope.from_halfspaces(A_x, b_x)
        U = Polytope.from_halfspaces(A_u, b_u)
        x0_dist = InitialStateDist(x0_lo, x0_hi)
        prior = GaussianBelief(n, m, tuple(masks), tuple(_mask_means(A, B, c_off, masks)), tuple(covs),
                               sigma_F, reward, w_mean, w_cov, sigma_R)
    except (ValueError, TypeError) as exc:
        raise ConfigError([_field_message(exc)]) from exc

    spec = MpcSpec(T, delta, 1.0, c2, X, U, reg_u)
    problems = validate(spec, prior)
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(prior, spec, x0_dist, (box_lo, box_hi), c_delta, c1_mode, wb_std, N, seeds, M, agents, name)
    try:
        c_R = reward_bound_cR(reward, X, U, cfg.weight_bound, (box_lo, box_hi))
    except UnboundedSet as exc:
        raise ConfigError([f"constraints.x_box_low: {exc}"]) from exc
    if c1_mode == "theorem3":
        if c_delta <= 0:
            raise ConfigError(["mpc.c_delta: must be positive"])
        c1 = min_penalty_weight(T, c_R, c_delta, float(delta[0]))
    else:
        c1_raw = r.get("mpc.c1", kind=lambda v: np.asarray(v, dtype=float))
        if r.errors:
            raise ConfigError(r.errors)
        c1 = c1_raw
    try:
        spec = spec.with_c1(c1)
    except ValueError as exc:
        raise ConfigError([f"mpc.c1: {exc}"]) from exc
    problems = validate(spec, prior)
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(prior, spec, x0_dist, (box_lo, box_hi), c_delta, c1_mode, wb_std, N, seeds, M, agents, name, c_R)


def _mask_means(A, B, c_off, masks):
    full = np.hstack([A, B, c_off[:, None]])
    return [full[i, k] for i, k in enumerate(masks)]


def _field_message(exc: Exception) -> str:
    text = str(exc)
    return text if ":" in text.split(" ")[0] else f"config: {text}"


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Tables that parse_config maps back to an equal config."""
    pr = cfg.prior
    A, B, c = pr.matrices(pr.row_means)
    rw = pr.reward
    X_A, X_b = cfg.spec.X.halfspaces()
    U_A, U_b = cfg.spec.U.halfspaces()
    mpc = {"T": cfg.spec.T, "delta": cfg.spec.delta.tolist(), "c1_mode": cfg.c1_mode, "c2": cfg.spec.c2,
           "c_delta": cfg.c_delta, "reg_u": cfg.spec.reg_u}
    if cfg.c1_mode == "fixed":
        mpc["c1"] = cfg.spec.c1.tolist()
    return {
        "system": {
            "A": A.tolist(),
            "B": B.tolist(),
            "c_off": c.tolist(),
            "sigma_F": pr.sigma_F.tolist(),
            "masks": [k.tolist() for k in pr.masks],
            "row_covs": [S.tolist() for S in pr.row_covs],
        },
        "reward": {
            "sigma_R": pr.sigma_R,
            "weights_mean": pr.reward_mean.tolist(),
            "weights_cov": pr.reward_cov.tolist(),
            "weight_bound_std": cfg.weight_bound_std,
            "features": {"Cx": rw.features.Cx.tolist(), "Cu": rw.features.Cu.tolist(), "c0": rw.features.c0.tolist()},
            "fixed_quadratic": {"H": rw.H.tolist(), "g": rw.g.tolist(), "const": rw.const},
        },
        "constraints": {
            "A_x": X_A.tolist(),
            "b_x": X_b.tolist(),
            "A_u": U_A.tolist(),
            "b_u": U_b.tolist(),
            "x_box_low": np.asarray(cfg.x_box[0], float).tolist(),
            "x_box_high": np.asarray(cfg.x_box[1], float).tolist(),
        },
        "mpc": mpc,
        "experiment": {
            "name": cfg.name,
            "N": cfg.N,
            "seeds": list(cfg.seeds),
            "M_rollouts": cfg.M,
            "x0_low": cfg.x0_dist.low.tolist(),
            "x0_high": cfg.x0_dist.high.tolist(),
            "agents": list(cfg.agents),
        },
    }


def dumps_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def write_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps_config(cfg))


def loads_config(text: str) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc
    return parse_config(data)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"config: cannot read {path}: {exc.strerror}"]) from exc
    return loads_config(text)


def config_hash(cfg: ExperimentConfig) -> str:
    """Short digest of everything that affects results except the seed list."""
    d = config_to_dict(cfg)
    d["experiment"] = {k: v for k, v in d["experiment"].items() if k not in ("seeds", "name")}
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
