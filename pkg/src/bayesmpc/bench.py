"""Cooling-grid benchmark: a rows x cols network of thermally coupled cooling units.

Unit i has temperature x_i and cooling input u_i in [0, u_max].  Heat leaks
to the environment at rate ``loss``, diffuses to the up/down/left/right
neighbors at rate ``coupling`` and is injected by a constant ``heat_load``:

    x_i+ = (1 - loss - coupling deg_i) x_i + coupling sum_{j in nbr(i)} x_j
           + cooling_gain u_i + heat_load + noise

and the per-step reward is the negative energy use -sum_i L_i u_i with
unknown efficiency factors L_i.  A fraction of the units are "old": their
efficiency is worse on average and much less certain than for new units.
Every number below is a tunable default, not a measured plant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    FeatureMap,
    GaussianBelief,
    InitialStateDist,
    MpcSpec,
    Polytope,
    RewardModel,
    reward_bound_cR,
    tightening_schedule,
)
from .mpc import min_penalty_weight


@dataclass(frozen=True)
class CoolingGridOptions:
    loss: float = 0.02
    coupling: float = 0.2
    cooling_gain: float = -5.0
    heat_load: float = 3.8
    u_max: float = 1.0
    temp_bound: float = 100.0
    old_fraction: float = 1.0 / 3.0
    new_efficiency: tuple = (1.0, 0.02)
    old_efficiency: tuple = (1.2, 0.4)
    A_std: float = 5e-4
    B_std: float = 0.02
    c_std: float = 0.05
    sigma_F: float = 0.05
    sigma_R: float = 0.1
    x0_range: tuple = (60.0, 90.0)
    x_box: tuple = (0.0, 120.0)
    T: int = 20
    delta0: float = 0.05
    delta_max: float = 0.10
    c2: float = 0.0
    c_delta: float = 1.0
    reg_u: float = 1e-6
    weight_bound_std: float = 3.0


@dataclass(frozen=True)
class CoolingGrid:
    rows: int
    cols: int
    neighbors: tuple
    old: np.ndarray
    prior: GaussianBelief
    X: Polytope
    U: Polytope
    x_box: tuple
    x0_dist: InitialStateDist
    spec: MpcSpec
    c_R: float
    weight_bound: np.ndarray
    c_delta: float
    options: CoolingGridOptions = field(default_factory=CoolingGridOptions)

    @property
    def n(self) -> int:
        return self.rows * self.cols


def grid_neighbors(rows: int, cols: int) -> tuple:
    """Up/down/left/right neighbors of each unit, row-major numbering."""
    out = []
    for r in range(rows):
        for c in range(cols):
            nb = []
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    nb.append(rr * cols + cc)
            out.append(tuple(sorted(nb)))
    return tuple(out)


def old_units(n: int, fraction: float) -> np.ndarray:
    """Spread round(fraction * n) old units evenly over the unit numbering."""
    k = int(round(fraction * n))
    mask = np.zeros(n, dtype=bool)
    if k > 0:
        mask[np.floor((np.arange(k) + 0.5) * n / k).astype(int)] = True
    return mask


def make_cooling_grid(rows: int, cols: int, options: CoolingGridOptions | None = None) -> CoolingGrid:
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    o = options or CoolingGridOptions()
    n = m = rows * cols
    nbrs = grid_neighbors(rows, cols)
    old = old_units(n, o.old_fraction)

    masks, means, covs = [], [], []
    for i in range(n):
        cols_x = sorted((i, *nbrs[i]))
        mask = np.array(cols_x + [n + i, 2 * n], dtype=int)
        a_ii = 1.0 - o.loss - o.coupling * len(nbrs[i])
        mean = [a_ii if j == i else o.coupling for j in cols_x]
        mean += [o.cooling_gain, o.heat_load]
        std = [o.A_std] * len(cols_x) + [o.B_std, o.c_std]
        masks.append(mask)
        means.append(np.array(mean))
        covs.append(np.diag(np.square(std)))

    features = FeatureMap(np.zeros((n, n)), -np.eye(n), np.zeros(n))
    eff_mean = np.where(old, o.old_efficiency[0], o.new_efficiency[0])
    eff_std = np.where(old, o.old_efficiency[1], o.new_efficiency[1])
    reward = RewardModel.linear_in_weights(n, m, features, eff_mean)
    prior = GaussianBelief(n, m, tuple(masks), tuple(means), tuple(covs), o.sigma_F, reward,
                           eff_mean, np.diag(eff_std**2), o.sigma_R)

    X = Polytope.from_halfspaces(np.eye(n), np.full(n, o.temp_bound))
    U = Polytope.from_halfspaces(np.vstack([np.eye(m), -np.eye(m)]), np.concatenate([np.full(m, o.u_max), np.zeros(m)]))
    x_box = (np.full(n, o.x_box[0]), np.full(n, o.x_box[1]))
    weight_bound = np.abs(eff_mean) + o.weight_bound_std * eff_std
    c_R = reward_bound_cR(reward, X, U, weight_bound, x_box)
    c1 = min_penalty_weight(o.T, c_R, o.c_delta, o.delta0)
    spec = MpcSpec(o.T, tightening_schedule(o.T, o.delta0, o.delta_max), c1, o.c2, X, U, o.reg_u)
    x0_dist = InitialStateDist(np.full(n, o.x0_range[0]), np.full(n, o.x0_range[1]))
    return CoolingGrid(rows, cols, nbrs, old, prior, X, U, x_box, x0_dist, spec, c_R, weight_bound, o.c_delta, o)


def prior_mean_spectral_radius(grid: CoolingGrid) -> float:
    A, _, _ = grid.prior.matrices(grid.prior.row_means)
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def grid_experiment(grid: CoolingGrid, N: int, seeds, M: int, agents=None, name: str = "cooling-grid"):
    """Experiment config running ``grid`` with its own prior, constraints and penalty weight."""
    from .config import ExperimentConfig
    from .sim import AGENTS

    return ExperimentConfig(
        grid.prior, grid.spec, grid.x0_dist, grid.x_box, grid.c_delta, "theorem3",
        grid.options.weight_bound_std, int(N), tuple(int(s) for s in seeds), int(M),
        tuple(agents or AGENTS), name, grid.c_R,
    )


def desk_config():
    """3x3 grid, T = 20, N = 50 episodes, seeds 0..19, 50 regret rollouts, all three agents."""
    return grid_experiment(make_cooling_grid(3, 3), N=50, seeds=range(20), M=50, name="desk-3x3")
