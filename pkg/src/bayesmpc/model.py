"""Domain types shared by the posterior, MPC, simulation and metrics layers.

All containers are frozen dataclasses holding read-only numpy arrays; every
type converts to and from plain dictionaries (see ``bayesmpc.config`` for the
TOML layer).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linprog


class UnboundedSet(ValueError):
    """Raised when a bound is requested over an unbounded polytope."""


class SpecMismatch(ValueError):
    """Raised when array dimensions of cooperating objects disagree."""


def _ro(a, ndim=None, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    if ndim == 2 and a.ndim < 2:
        a = a.reshape(1, -1) if a.size else a.reshape(0, 0)
    a.setflags(write=False)
    return a


def _list(a):
    return np.asarray(a).tolist()


@dataclass(frozen=True)
class Polytope:
    """The set {v : F v + offset <= 1}.

    Constraints A v <= b with b > 0 are stored as F = A / b (offset 0).
    Rows with b <= 0 (e.g. u >= 0) cannot be normalized that way and keep
    F = A with offset = 1 - b.
    """

    F: np.ndarray
    offset: np.ndarray = None

    def __post_init__(self):
        F = _ro(self.F, ndim=2)
        object.__setattr__(self, "F", F)
        off = np.zeros(F.shape[0]) if self.offset is None else self.offset
        object.__setattr__(self, "offset", _ro(off))

    @classmethod
    def from_halfspaces(cls, A, b) -> "Polytope":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float).ravel()
        if A.shape[0] != b.size:
            raise SpecMismatch("A and b have different row counts")
        pos = b > 0
        F = np.where(pos[:, None], A / np.where(pos, b, 1.0)[:, None], A)
        offset = np.where(pos, 0.0, 1.0 - b)
        return cls(F, offset)

    @classmethod
    def box(cls, low, high) -> "Polytope":
        low = np.asarray(low, dtype=float)
        high = np.asarray(high, dtype=float)
        d = low.size
        return cls.from_halfspaces(np.vstack([np.eye(d), -np.eye(d)]), np.concatenate([high, -low]))

    @property
    def rows(self) -> int:
        return self.F.shape[0]

    @property
    def dim(self) -> int:
        return self.F.shape[1]

    def halfspaces(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (A, b) with the set written as A v <= b."""
        return self.F, 1.0 - self.offset

    def g(self, v) -> np.ndarray:
        return self.F @ np.asarray(v, dtype=float) + self.offset

    def contains(self, v, tol: float = 1e-9) -> bool:
        return bool(np.all(self.g(v) <= 1.0 + tol))

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate-wise min/max over the set, by linear programming."""
        A, b = self.halfspaces()
        lo, hi = np.empty(self.dim), np.empty(self.dim)
        for i in range(self.dim):
            for sign, out in ((1.0, hi), (-1.0, lo)):
                c = np.zeros(self.dim)
                c[i] = -sign
                res = linprog(c, A_ub=A, b_ub=b, bounds=[(None, None)] * self.dim, method="highs")
                if res.status == 3:
                    raise UnboundedSet(f"polytope unbounded along coordinate {i}")
                if res.status != 0:
                    raise UnboundedSet(f"polytope bound LP failed: {res.message}")
                out[i] = sign * -res.fun
        return lo, hi

    def to_dict(self) -> dict:
        return {"F": _list(self.F), "offset": _list(self.offset)}

    @classmethod
    def from_dict(cls, d: dict) -> "Polytope":
        F = np.asarray(d["F"], dtype=float)
        return cls(F.reshape(len(d["F"]), -1) if F.size else F.reshape(0, 0), d.get("offset"))


@dataclass(frozen=True)
class FeatureMap:
    """Affine reward features psi(t, x, u) = Cx x + Cu u + c0."""

    Cx: np.ndarray
    Cu: np.ndarray
    c0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Cx", _ro(self.Cx, ndim=2))
        object.__setattr__(self, "Cu", _ro(self.Cu, ndim=2))
        object.__setattr__(self, "c0", _ro(self.c0))

    @property
    def dim(self) -> int:
        return self.c0.size

    def __call__(self, t, x, u) -> np.ndarray:
        return self.Cx @ x + self.Cu @ u + self.c0

    def batch(self, X, U) -> np.ndarray:
        return X @ self.Cx.T + U @ self.Cu.T + self.c0

    def to_dict(self) -> dict:
        return {"Cx": _list(self.Cx), "Cu": _list(self.Cu), "c0": _list(self.c0)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMap":
        c0 = np.asarray(d["c0"], dtype=float)
        k = c0.size
        return cls(np.asarray(d["Cx"], float).reshape(k, -1), np.asarray(d["Cu"], float).reshape(k, -1), c0)


@dataclass(frozen=True)
class RewardModel:
    """Mean reward l(t, x, u) = 0.5 w'Hw + g'w + const + theta' psi(t, x, u), w = [x; u].

    H must be negative semidefinite so that every MPC problem is a convex QP.
    """

    H: np.ndarray
    g: np.ndarray
    features: FeatureMap
    learned_weights: np.ndarray
    const: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "H", _ro(self.H, ndim=2))
        object.__setattr__(self, "g", _ro(self.g))
        object.__setattr__(self, "learned_weights", _ro(self.learned_weights))
        object.__setattr__(self, "const", float(self.const))

    @classmethod
    def linear_in_weights(cls, n, m, features: FeatureMap, weights, H=None, g=None, const=0.0):
        H = np.zeros((n + m, n + m)) if H is None else H
        g = np.zeros(n + m) if g is None else g
        return cls(H, g, features, weights, const)

    @property
    def n_ell(self) -> int:
        return self.features.dim

    @property
    def nz(self) -> int:
        return self.g.size

    def fixed(self, x, u) -> float:
        w = np.concatenate([x, u])
        return float(0.5 * w @ self.H @ w + self.g @ w + self.const)

    def __call__(self, t, x, u, weights=None) -> float:
        th = self.learned_weights if weights is None else weights
        return self.fixed(x, u) + float(th @ self.features(t, x, u))

    def with_weights(self, weights) -> "RewardModel":
        return replace(self, learned_weights=np.asarray(weights, dtype=float))

    def to_dict(self) -> dict:
        return {
            "H": _list(self.H),
            "g": _list(self.g),
            "const": self.const,
            "features": self.features.to_dict(),
            "learned_weights": _list(self.learned_weights),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RewardModel":
        g = np.asarray(d["g"], dtype=float)
        return cls(
            np.asarray(d["H"], float).reshape(g.size, g.size),
            g,
            FeatureMap.from_dict(d["features"]),
            d["learned_weights"],
            d.get("const", 0.0),
        )


@dataclass(frozen=True)
class InitialStateDist:
    """Uniform distribution on the box [low, high]; a point mass when low == high."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "low", _ro(self.low))
        object.__setattr__(self, "high", _ro(self.high))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.low + (self.high - self.low) * rng.random(self.low.size)

    def to_dict(self) -> dict:
        return {"low": _list(self.low), "high": _list(self.high)}

    @classmethod
    def from_dict(cls, d: dict) -> "InitialStateDist":
        return cls(d["low"], d["high"])


@dataclass(frozen=True)
class ParamSample:
    """A realized parameter vector: dynamics (A, B, c_off) plus reward weights."""

    A: np.ndarray
    B: np.ndarray
    c_off: np.ndarray
    reward: RewardModel
    episode: int = -1

    def __post_init__(self):
        object.__setattr__(self, "A", _ro(self.A, ndim=2))
        object.__setattr__(self, "B", _ro(self.B, ndim=2))
        object.__setattr__(self, "c_off", _ro(self.c_off))

    @property
    def theta_R(self) -> np.ndarray:
        return self.reward.learned_weights

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def predict(self, x, u) -> np.ndarray:
        return self.A @ x + self.B @ u + self.c_off

    def to_dict(self) -> dict:
        return {
            "A": _list(self.A),
            "B": _list(self.B),
            "c_off": _list(self.c_off),
            "reward": self.reward.to_dict(),
            "episode": self.episode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSample":
        c = np.asarray(d["c_off"], dtype=float)
        return cls(
            np.asarray(d["A"], float).reshape(c.size, c.size),
            np.asarray(d["B"], float).reshape(c.size, -1),
            c,
            RewardModel.from_dict(d["reward"]),
            int(d.get("episode", -1)),
        )


@dataclass(frozen=True)
class LinearSystemTruth:
    """Ground-truth plant: x+ = A x + B u + c_off + eps_F, r = l(t, x, u) + eps_R."""

    A: np.ndarray
    B: np.ndarray
    c_off: np.ndarray
    sigma_F: np.ndarray
    reward: RewardModel
    sigma_R: float
    x0_dist: InitialStateDist

    def __post_init__(self):
        object.__setattr__(self, "A", _ro(self.A, ndim=2))
        object.__setattr__(self, "B", _ro(self.B, ndim=2))
        object.__setattr__(self, "c_off", _ro(self.c_off))
        object.__setattr__(self, "sigma_F", _ro(np.broadcast_to(self.sigma_F, (self.c_off.size,))))
        object.__setattr__(self, "sigma_R", float(self.sigma_R))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A)))) if self.n else 0.0

    def as_sample(self, episode: int = -1) -> ParamSample:
        return ParamSample(self.A, self.B, self.c_off, self.reward, episode)

    def to_dict(self) -> dict:
        return {
            "A": _list(self.A),
            "B": _list(self.B),
            "c_off": _list(self.c_off),
            "sigma_F": _list(self.sigma_F),
            "reward": self.reward.to_dict(),
            "sigma_R": self.sigma_R,
            "x0": self.x0_dist.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearSystemTruth":
        c = np.asarray(d["c_off"], dtype=float)
        return cls(
            np.asarray(d["A"], float).reshape(c.size, c.size),
            np.asarray(d["B"], float).reshape(c.size, -1),
            c,
            d["sigma_F"],
            RewardModel.from_dict(d["reward"]),
            d["sigma_R"],
            InitialStateDist.from_dict(d["x0"]),
        )


@dataclass(frozen=True)
class GaussianBelief:
    """Independent Gaussian posteriors over masked transition rows and reward weights.

    Row i of the dynamics regresses x+_i on phi = [x; u; 1][masks[i]].  The
    reward block is a Gaussian over theta_R; ``reward`` supplies the known
    fixed part and the feature map.  Noise levels are known.
    """

    n: int
    m: int
    masks: tuple
    row_means: tuple
    row_covs: tuple
    sigma_F: np.ndarray
    reward: RewardModel
    reward_mean: np.ndarray
    reward_cov: np.ndarray
    sigma_R: float

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(_ro(k, dtype=int) for k in self.masks))
        object.__setattr__(self, "row_means", tuple(_ro(v) for v in self.row_means))
        object.__setattr__(self, "row_covs", tuple(_ro(S, ndim=2) for S in self.row_covs))
        object.__setattr__(self, "sigma_F", _ro(np.broadcast_to(self.sigma_F, (self.n,))))
        object.__setattr__(self, "reward_mean", _ro(self.reward_mean))
        object.__setattr__(self, "reward_cov", _ro(self.reward_cov, ndim=2))
        object.__setattr__(self, "sigma_R", float(self.sigma_R))

    @property
    def n_reg(self) -> int:
        return self.n + self.m + 1

    def matrices(self, rows) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Scatter per-row coefficient vectors into (A, B, c_off)."""
        full = np.zeros((self.n, self.n_reg))
        for i, (mask, v) in enumerate(zip(self.masks, rows)):
            full[i, mask] = v
        return full[:, : self.n], full[:, self.n : self.n + self.m], full[:, -1]

    def scaled(self, factor: float) -> "GaussianBelief":
        """Same means with every covariance multiplied by ``factor``."""
        return replace(
            self,
            row_covs=tuple(factor * S for S in self.row_covs),
            reward_cov=factor * self.reward_cov,
        )

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "masks": [_list(k) for k in self.masks],
            "row_means": [_list(v) for v in self.row_means],
            "row_covs": [_list(S) for S in self.row_covs],
            "sigma_F": _list(self.sigma_F),
            "reward": self.reward.to_dict(),
            "reward_mean": _list(self.reward_mean),
            "reward_cov": _list(self.reward_cov),
            "sigma_R": self.sigma_R,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianBelief":
        means = [np.asarray(v, float) for v in d["row_means"]]
        covs = [np.asarray(S, float).reshape(v.size, v.size) for S, v in zip(d["row_covs"], means)]
        rm = np.asarray(d["reward_mean"], float)
        return cls(
            int(d["n"]),
            int(d["m"]),
            tuple(np.asarray(k, int) for k in d["masks"]),
            tuple(means),
            tuple(covs),
            d["sigma_F"],
            RewardModel.from_dict(d["reward"]),
            rm,
            np.asarray(d["reward_cov"], float).reshape(rm.size, rm.size),
            d["sigma_R"],
        )


def tightening_schedule(T: int, delta0: float, delta_max: float) -> np.ndarray:
    """Linear schedule delta_k = delta0 + (delta_max - delta0) k / (T - 1)."""
    if T == 1:
        return np.array([delta0], dtype=float)
    return delta0 + (delta_max - delta0) * np.arange(T) / (T - 1)


@dataclass(frozen=True)
class MpcSpec:
    T: int
    delta: np.ndarray
    c1: np.ndarray
    c2: float
    X: Polytope
    U: Polytope
    reg_u: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "T", int(self.T))
        object.__setattr__(self, "delta", _ro(np.broadcast_to(self.delta, (self.T,))))
        object.__setattr__(self, "c1", _ro(np.broadcast_to(self.c1, (self.X.rows,))))
        object.__setattr__(self, "c2", float(self.c2))
        object.__setattr__(self, "reg_u", float(self.reg_u))

    @property
    def n_x(self) -> int:
        return self.X.rows

    def with_c1(self, c1) -> "MpcSpec":
        return replace(self, c1=np.broadcast_to(np.asarray(c1, dtype=float), (self.X.rows,)))

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "delta": _list(self.delta),
            "c1": _list(self.c1),
            "c2": self.c2,
            "X": self.X.to_dict(),
            "U": self.U.to_dict(),
            "reg_u": self.reg_u,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MpcSpec":
        return cls(d["T"], d["delta"], d["c1"], d["c2"], Polytope.from_dict(d["X"]), Polytope.from_dict(d["U"]), d.get("reg_u", 1e-6))


@dataclass(frozen=True)
class EpisodeRecord:
    """One episode of closed-loop data: rows t = 0..T-1 of (t, x, u, x+, r)."""

    episode: int
    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    r: np.ndarray
    rho: np.ndarray
    objective: np.ndarray
    theta: ParamSample | None = None

    def __post_init__(self):
        for name in ("x", "u", "x_next", "rho"):
            object.__setattr__(self, name, _ro(getattr(self, name), ndim=2))
        object.__setattr__(self, "r", _ro(self.r))
        object.__setattr__(self, "objective", _ro(self.objective))

    @property
    def T(self) -> int:
        return self.r.size

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.T)

    def tuples(self):
        return [(t, self.x[t], self.u[t], self.x_next[t], self.r[t]) for t in range(self.T)]

    def to_dict(self) -> dict:
        return {
            "episode": self.episode,
            "x": _list(self.x),
            "u": _list(self.u),
            "x_next": _list(self.x_next),
            "r": _list(self.r),
            "rho": _list(self.rho),
            "objective": _list(self.objective),
            "theta": None if self.theta is None else self.theta.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        theta = d.get("theta")
        return cls(
            d["episode"], d["x"], d["u"], d["x_next"], d["r"], d["rho"], d["objective"],
            None if theta is None else ParamSample.from_dict(theta),
        )


@dataclass
class LearningTrace:
    """Episodes of one agent; ``beliefs[e]`` is the belief used to choose episode e."""

    agent: str
    seed: int
    episodes: list = field(default_factory=list)
    beliefs: list = field(default_factory=list)

    @property
    def n_data(self) -> int:
        return sum(ep.T for ep in self.episodes)


def validate(spec: MpcSpec, model=None) -> list[str]:
    """Check type invariants; returns one message per violation, never raises."""
    out = []
    d = np.asarray(spec.delta)
    if spec.T < 1:
        out.append("mpc.T: must be >= 1")
    if d.size and not np.all(np.isfinite(d)):
        out.append("mpc.delta: entries must be finite")
    elif d.size:
        if d[0] <= 0:
            out.append("mpc.delta: delta_0 must be positive")
        if np.any(d > 1):
            out.append("mpc.delta: entries must be <= 1")
        if np.any(np.diff(d) < 0):
            out.append("mpc.delta: delta not non-decreasing")
    if np.any(~(np.asarray(spec.c1) > 0)):
        out.append("mpc.c1: c1 must be positive")
    if not spec.c2 >= 0:
        out.append("mpc.c2: must be >= 0")
    if not spec.reg_u >= 0:
        out.append("mpc.reg_u: must be >= 0")
    for name, P in (("constraints.X", spec.X), ("constraints.U", spec.U)):
        if not np.all(np.isfinite(P.F)) or not np.all(np.isfinite(P.offset)):
            out.append(f"{name}: entries must be finite")
        elif P.rows and np.any(np.all(P.F == 0, axis=1)):
            out.append(f"{name}: all-zero row")
    if model is None:
        return out
    n = model.n
    if spec.X.dim != n:
        out.append(f"constraints.X: dimension {spec.X.dim} != state dimension {n}")
    if spec.U.dim != model.m:
        out.append(f"constraints.U: dimension {spec.U.dim} != input dimension {model.m}")
    if isinstance(model, (LinearSystemTruth, GaussianBelief)):
        s = np.asarray(model.sigma_F)
        if s.size != n or np.any(~(s > 0)):
            out.append("system.sigma_F: must be positive with one entry per state")
        if not model.sigma_R > 0:
            out.append("reward.sigma_R: must be positive")
    reward = model.reward
    H = reward.H
    if H.shape != (n + model.m, n + model.m):
        out.append("reward.H: shape must be (n+m, n+m)")
    elif np.max(np.linalg.eigvalsh(0.5 * (H + H.T)), initial=0.0) > 1e-10:
        out.append("reward.H: fixed quadratic must be concave (negative semidefinite)")
    if isinstance(model, LinearSystemTruth):
        for name in ("A", "B", "c_off"):
            if not np.all(np.isfinite(getattr(model, name))):
                out.append(f"system.{name}: entries must be finite")
    if isinstance(model, GaussianBelief):
        for i, (k, mu, S) in enumerate(zip(model.masks, model.row_means, model.row_covs)):
            if k.size and (k.min() < 0 or k.max() >= model.n_reg or np.unique(k).size != k.size):
                out.append(f"system.masks[{i}]: indices must be distinct and within [0, n+m]")
            if mu.shape != (k.size,) or S.shape != (k.size, k.size):
                out.append(f"system.masks[{i}]: mean/covariance shape does not match mask")
            elif not _is_pd(S):
                out.append(f"system.row_covs[{i}]: covariance must be symmetric positive definite")
        nl = reward.n_ell
        if model.reward_mean.shape != (nl,) or model.reward_cov.shape != (nl, nl):
            out.append("reward.weights: mean/covariance shape does not match features")
        elif not _is_pd(model.reward_cov):
            out.append("reward.weights: covariance must be symmetric positive definite")
    return out


def _is_pd(S) -> bool:
    if S.size == 0:
        return True
    if not np.allclose(S, S.T, atol=1e-12 * max(1.0, np.abs(S).max())):
        return False
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return False
    return True


def _weight_intervals(reward: RewardModel, weight_bound) -> np.ndarray:
    k = reward.n_ell
    if weight_bound is None:
        w = reward.learned_weights
        return np.stack([w, w], axis=1)
    wb = np.asarray(weight_bound, dtype=float)
    if wb.ndim == 2:
        return wb.reshape(k, 2)
    wb = np.abs(np.broadcast_to(wb, (k,)))
    return np.stack([-wb, wb], axis=1)


def reward_bound_cR(reward: RewardModel, X: Polytope, U: Polytope, weight_bound=None, x_box=None) -> float:
    """Upper bound on |l(t, x, u; theta)| over X x U for theta within ``weight_bound``.

    ``weight_bound`` is None (weights fixed at ``reward.learned_weights``), a
    scalar or vector bound on |theta_j|, or an (n_ell, 2) array of intervals.
    ``x_box`` = (low, high) intersects X with an operating box, needed when X
    is unbounded.  Affine terms are bounded by linear programs over the
    polytopes, the quadratic part by interval arithmetic on the bounding box.
    """
    n, m = X.dim, U.dim
    Ax, bx = X.halfspaces()
    Au, bu = U.halfspaces()
    A = np.block([[Ax, np.zeros((Ax.shape[0], m))], [np.zeros((Au.shape[0], n)), Au]])
    b = np.concatenate([bx, bu])
    bounds = [(None, None)] * (n + m)
    if x_box is not None:
        lo, hi = np.broadcast_to(x_box[0], (n,)), np.broadcast_to(x_box[1], (n,))
        bounds[:n] = list(zip(lo, hi))
    eye = np.eye(n + m)
    wlo = np.array([_lp_extreme(eye[i], A, b, bounds, -1.0) for i in range(n + m)])
    whi = np.array([_lp_extreme(eye[i], A, b, bounds, 1.0) for i in range(n + m)])

    def value_range(c, c0=0.0):
        if not np.any(c):
            return c0, c0
        return _lp_extreme(c, A, b, bounds, -1.0) + c0, _lp_extreme(c, A, b, bounds, 1.0) + c0

    total = abs(reward.const)
    total += max(map(abs, value_range(reward.g)))
    wabs = np.maximum(np.abs(wlo), np.abs(whi))
    total += 0.5 * float(wabs @ np.abs(reward.H) @ wabs)
    intervals = _weight_intervals(reward, weight_bound)
    C = np.hstack([reward.features.Cx, reward.features.Cu])
    for j in range(reward.n_ell):
        plo, phi = value_range(C[j], reward.features.c0[j])
        total += float(np.max(np.abs(np.outer(intervals[j], [plo, phi]))))
    return float(total)


def _lp_extreme(c, A, b, bounds, sign) -> float:
    res = linprog(-sign * np.asarray(c, float), A_ub=A, b_ub=b, bounds=bounds, method="highs")
    if res.status == 3:
        raise UnboundedSet("reward term unbounded over the constraint sets")
    if res.status != 0:
        raise UnboundedSet(f"bound LP failed: {res.message}")
    return float(-sign * res.fun)
