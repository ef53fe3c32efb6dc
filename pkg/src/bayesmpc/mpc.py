"""Shrinking-horizon, soft-constrained, constraint-tightened MPC for linear models.

At time t the controller plans over k = t..T-1 (horizon H = T - t) and solves

    max  sum_k l(k, x_k, u_k) - c1'rho_k - c2 |rho_k|^2 - reg_u |u_k|^2
    s.t. x_0 = s,  x_{k+1} = A x_k + B u_k + c,
         g_x(x_k) <= (1 - delta_k) 1 + rho_k,  rho_k >= 0,  g_u(u_k) <= 1

as a convex QP (sign flipped to minimization).  The states are eliminated
through the prediction x = Tx s + Su u + d, leaving the decision vector
z = (u_0..u_{H-1}, rho_0..rho_{H-1}).  The current state s then enters only
the linear cost and the inequality right-hand side, both affinely, so
``MpcPolicy`` keeps one ``QpSolver`` per t and reuses its factorizations
across states.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .model import MpcSpec, ParamSample, SpecMismatch
from .qp import QpProblem, QpSettings, QpSolution, QpSolver, QpStatus


class NegativeSlack(ValueError):
    pass


class MpcSolveError(RuntimeError):
    """The MPC QP did not reach Solved status."""

    def __init__(self, message, solution: QpSolution | None = None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class MpcIndex:
    """Where each block lives in the QP decision vector and constraint rows."""

    H: int
    n: int
    m: int
    n_x: int
    n_u: int

    @property
    def u_slice(self) -> slice:
        return slice(0, self.H * self.m)

    @property
    def rho_slice(self) -> slice:
        s = self.H * self.m
        return slice(s, s + self.H * self.n_x)

    @property
    def dim(self) -> int:
        return self.H * (self.m + self.n_x)

    @property
    def state_rows(self) -> slice:
        return slice(0, self.H * self.n_x)

    @property
    def input_rows(self) -> slice:
        s = self.H * self.n_x
        return slice(s, s + self.H * self.n_u)

    @property
    def slack_rows(self) -> slice:
        s = self.H * (self.n_x + self.n_u)
        return slice(s, s + self.H * self.n_x)

    def shift_active(self, active: np.ndarray) -> np.ndarray:
        """Map an active set of this horizon onto the next (one step shorter) one."""
        if self.H <= 1:
            return np.zeros(0, dtype=int)
        nxt = MpcIndex(self.H - 1, self.n, self.m, self.n_x, self.n_u)
        out = []
        for rows_self, rows_next, width in (
            (self.state_rows, nxt.state_rows, self.n_x),
            (self.input_rows, nxt.input_rows, self.n_u),
            (self.slack_rows, nxt.slack_rows, self.n_x),
        ):
            a = active[(active >= rows_self.start) & (active < rows_self.stop)] - rows_self.start
            a = a[a >= width] - width
            out.append(a + rows_next.start)
        return np.concatenate(out).astype(int)


@dataclass
class MpcSolveResult:
    u_first: np.ndarray
    u_sequence: np.ndarray
    x_predicted: np.ndarray
    rho_sequence: np.ndarray
    objective: float
    qp_status: QpStatus
    qp_solution: QpSolution
    index: MpcIndex


@dataclass(frozen=True)
class CondensedMpc:
    """The MPC QP at one time step as an affine function of the current state.

    For state s: q(s) = q0 + Lq s, h(s) = h0 + Lh s, the predicted states are
    Tx s + Su u + d, and the MPC value is -(qp objective + offset(s)).
    """

    problem: QpProblem
    index: MpcIndex
    Tx: np.ndarray
    Su: np.ndarray
    d: np.ndarray
    q0: np.ndarray
    Lq: np.ndarray
    h0: np.ndarray
    Lh: np.ndarray
    Q: np.ndarray
    qx: np.ndarray
    const: float

    def q(self, x) -> np.ndarray:
        return self.q0 + self.Lq @ x

    def h(self, x) -> np.ndarray:
        return self.h0 + self.Lh @ x

    def offset(self, x) -> float:
        e = self.Tx @ x + self.d
        return float(0.5 * e @ self.Q @ e + self.qx @ e + self.const)

    def states(self, x, u) -> np.ndarray:
        return (self.Tx @ x + self.d + self.Su @ u).reshape(self.index.H, self.index.n)


def condense_mpc(theta: ParamSample, spec: MpcSpec, t: int) -> CondensedMpc:
    """Assemble the state-parametric MPC QP at time t."""
    T = spec.T
    if not 0 <= t < T:
        raise SpecMismatch(f"time index {t} outside [0, {T})")
    n, m = theta.n, theta.m
    if spec.X.dim != n or spec.U.dim != m:
        raise SpecMismatch("constraint sets do not match the model dimensions")
    rw = theta.reward
    if rw.H.shape != (n + m, n + m):
        raise SpecMismatch("reward Hessian does not match the model dimensions")
    H = T - t
    n_x, n_u = spec.X.rows, spec.U.rows
    idx = MpcIndex(H, n, m, n_x, n_u)
    A, B, c = theta.A, theta.B, theta.c_off

    # prediction x_k = A^k s + sum_{j<k} A^{k-1-j} (B u_j + c)
    Tx = np.zeros((H * n, n))
    Su = np.zeros((H * n, H * m))
    d = np.zeros(H * n)
    Ak = np.eye(n)
    AkB = [B]
    for k in range(H):
        Tx[k * n:(k + 1) * n] = Ak
        if k:
            d[k * n:(k + 1) * n] = A @ d[(k - 1) * n:k * n] + c
            for j in range(k):
                Su[k * n:(k + 1) * n, j * m:(j + 1) * m] = AkB[k - 1 - j]
            AkB.append(A @ AkB[-1])
        Ak = A @ Ak

    # stage cost of the minimization: 0.5 x'Qx + x'N u + 0.5 u'R u + qx'x + qu'u
    I_H = np.eye(H)
    Q = np.kron(I_H, -rw.H[:n, :n])
    N = np.kron(I_H, -rw.H[:n, n:])
    R = np.kron(I_H, -rw.H[n:, n:] + 2.0 * spec.reg_u * np.eye(m))
    th = rw.learned_weights
    qx = np.tile(-(rw.g[:n] + rw.features.Cx.T @ th), H)
    qu = np.tile(-(rw.g[n:] + rw.features.Cu.T @ th), H)
    SQ = Su.T @ Q
    Puu = SQ @ Su + Su.T @ N + N.T @ Su + R
    Puu = 0.5 * (Puu + Puu.T)
    Lq_u = (SQ + N.T) @ Tx
    q0_u = (SQ + N.T) @ d + Su.T @ qx + qu
    nr = H * n_x
    P = np.block([[Puu, np.zeros((H * m, nr))], [np.zeros((nr, H * m)), 2.0 * spec.c2 * np.eye(nr)]])
    q0 = np.concatenate([q0_u, np.tile(spec.c1, H)])
    Lq = np.vstack([Lq_u, np.zeros((nr, n))])
    const = -H * (rw.const + float(th @ rw.features.c0))

    # inequalities: state rows, input rows, slack rows
    Fx = np.kron(I_H, spec.X.F)
    Gs = np.hstack([Fx @ Su, -np.eye(nr)])
    Gu = np.hstack([np.kron(I_H, spec.U.F), np.zeros((H * n_u, nr))])
    Gr = np.hstack([np.zeros((nr, H * m)), -np.eye(nr)])
    G = np.vstack([Gs, Gu, Gr])
    delta = spec.delta[:H]
    hs = ((1.0 - delta)[:, None] - spec.X.offset[None, :]).ravel() - Fx @ d
    h0 = np.concatenate([hs, np.tile(1.0 - spec.U.offset, H), np.zeros(nr)])
    Lh = np.vstack([-Fx @ Tx, np.zeros((H * n_u + nr, n))])
    problem = QpProblem(P, q0, G=G, h=h0)
    return CondensedMpc(problem, idx, Tx, Su, d, q0, Lq, h0, Lh, Q, qx, const)


def build_mpc_qp(theta: ParamSample, spec: MpcSpec, t: int, x) -> tuple[QpProblem, MpcIndex, float]:
    """The MPC QP at time t from state x.

    Returns (problem, index, offset) with the MPC value equal to
    -(problem.objective(z) + offset).
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (theta.n,):
        raise SpecMismatch(f"state has shape {x.shape}, expected {(theta.n,)}")
    cm = condense_mpc(theta, spec, t)
    problem = QpProblem(cm.problem.P, cm.q(x), G=cm.problem.G, h=cm.h(x))
    return problem, cm.index, cm.offset(x)


# MPC QPs are nearly linear programs, where ADMM crawls; go straight to the
# interior-point path when no cached active set fits.
MPC_QP_SETTINGS = QpSettings(method="ipm")


class MpcPolicy:
    """The MPC feedback law u*(t, x; theta) with per-step solver caches."""

    def __init__(self, theta: ParamSample, spec: MpcSpec, qp_settings: QpSettings | None = None):
        self.theta = theta
        self.spec = spec
        self.qp_settings = qp_settings or MPC_QP_SETTINGS
        self._solvers: dict = {}

    def _solver(self, t):
        entry = self._solvers.get(t)
        if entry is None:
            cm = condense_mpc(self.theta, self.spec, t)
            entry = (QpSolver(cm.problem, self.qp_settings), cm)
            self._solvers[t] = entry
        return entry

    def solve(self, t: int, x, warm: MpcSolveResult | None = None, active_guess=None) -> MpcSolveResult:
        """Optimal plan from state x at time t.

        ``warm`` is the result of the previous time step; its active set,
        shifted by one stage, is tried first.  ``active_guess`` adds more
        candidate active sets.  Neither changes the returned optimizer.
        """
        solver, cm = self._solver(t)
        x = np.asarray(x, dtype=float)
        if x.shape != (self.theta.n,):
            raise SpecMismatch(f"state has shape {x.shape}, expected {(self.theta.n,)}")
        guesses = list(active_guess) if isinstance(active_guess, (list, tuple)) else [active_guess]
        if warm is not None:
            guesses.insert(0, warm.index.shift_active(warm.qp_solution.active_set))
        q, h = cm.q(x), cm.h(x)
        sol = solver.solve(q=q, h=h, active_guess=[g for g in guesses if g is not None])
        if not sol.solved:
            raise MpcSolveError(
                f"MPC QP at t={t} returned {sol.status.value} "
                f"(primal {sol.primal_residual:.2e}, dual {sol.dual_residual:.2e})",
                sol,
            )
        idx = cm.index
        U = sol.z[idx.u_slice].reshape(idx.H, idx.m)
        R = sol.z[idx.rho_slice].reshape(idx.H, idx.n_x)
        Xp = cm.states(x, sol.z[idx.u_slice])
        P = cm.problem.P
        value = -(0.5 * sol.z @ (P @ sol.z) + q @ sol.z + cm.offset(x))
        return MpcSolveResult(U[0].copy(), U, Xp, np.maximum(R, 0.0), float(value), sol.status, sol, idx)

    def stats(self) -> Counter:
        """How solves were resolved, summed over the per-step solvers."""
        total = Counter()
        for solver, _ in self._solvers.values():
            total.update(solver.stats)
        return total

    def __call__(self, t: int, x) -> np.ndarray:
        return self.solve(t, x).u_first


def solve_policy(theta: ParamSample, spec: MpcSpec, t: int, x, qp_settings: QpSettings | None = None) -> MpcSolveResult:
    return MpcPolicy(theta, spec, qp_settings).solve(t, x)


def slack_of_state(x, spec: MpcSpec) -> np.ndarray:
    """Smallest rho >= 0 with x in the delta_0-tightened, rho-relaxed state set."""
    return np.maximum(0.0, spec.X.g(x) - (1.0 - spec.delta[0]))


def penalty(rho, spec: MpcSpec) -> float:
    """Exact penalty c1'rho + c2 rho'rho."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise NegativeSlack("slack must be nonnegative")
    return float(spec.c1 @ rho + spec.c2 * rho @ rho)


def min_penalty_weight(T: int, c_R: float, c_delta: float, delta_0: float) -> float:
    """Smallest linear penalty weight for which the unsafe-episode bound holds."""
    if T < 1 or c_R < 0 or c_delta <= 0 or delta_0 <= 0:
        raise ValueError("requires T >= 1, c_R >= 0, c_delta > 0, delta_0 > 0")
    return (2.0 * T * c_R + c_delta) / delta_0
