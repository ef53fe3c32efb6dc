"""Convex quadratic programming by operator splitting with active-set polishing.

Solves

    minimize    0.5 z'Pz + q'z
    subject to  Aeq z = beq
                G z  <= h

The iteration is the ADMM scheme on the stacked constraint l <= A z <= u
(A = [Aeq; G]) with Ruiz equilibration and adaptive step size.  Whenever the
iterates settle on an active set, the equality-constrained KKT system for
that set is solved directly ("polishing"), which yields solutions accurate to
machine precision.  ADMM converges slowly on nearly linear programs, so when
it stalls the solver switches to a primal-dual interior-point method
(Mehrotra predictor-corrector) on the same scaled data and polishes its
result the same way.  Polishing factorizations are cached by active set, so a
``QpSolver`` reused for many right-hand sides (the MPC use case, where only
the initial state changes) mostly costs a back-substitution per solve.

Duals follow the convention P z + q + Aeq' lam + G' mu = 0 with mu >= 0.
"""

from __future__ import annotations

import enum
from collections import Counter, OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels

_DENSE_LIMIT = 120
_MAX_BORDER = 40
_DENSE_ENTRIES = 2_000_000


class QpStatus(enum.Enum):
    SOLVED = "Solved"
    MAX_ITERATIONS = "MaxIterations"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"


class QpError(ValueError):
    pass


def _as_matrix(M, rows, cols):
    if M is None:
        return sp.csc_matrix((rows, cols))
    if sp.issparse(M):
        M = sp.csc_matrix(M, dtype=float)
    else:
        M = sp.csc_matrix(np.atleast_2d(np.asarray(M, dtype=float)).reshape(rows, cols))
    return M


@dataclass
class QpProblem:
    """Data of a convex QP.  Matrices may be dense arrays or scipy sparse."""

    P: object
    q: np.ndarray
    Aeq: object = None
    beq: np.ndarray | None = None
    G: object = None
    h: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        d = self.q.size
        self.beq = np.zeros(0) if self.beq is None else np.asarray(self.beq, dtype=float).ravel()
        self.h = np.zeros(0) if self.h is None else np.asarray(self.h, dtype=float).ravel()
        self.P = _as_matrix(self.P, d, d)
        self.Aeq = _as_matrix(self.Aeq, self.beq.size, d)
        self.G = _as_matrix(self.G, self.h.size, d)

    @property
    def dim(self) -> int:
        return self.q.size

    @property
    def n_eq(self) -> int:
        return self.beq.size

    @property
    def n_ineq(self) -> int:
        return self.h.size

    def check(self) -> None:
        """Raise ``QpError`` if the data violate the problem invariants."""
        d = self.dim
        if self.P.shape != (d, d):
            raise QpError(f"P has shape {self.P.shape}, expected {(d, d)}")
        if self.Aeq.shape != (self.n_eq, d):
            raise QpError(f"Aeq has shape {self.Aeq.shape}, expected {(self.n_eq, d)}")
        if self.G.shape != (self.n_ineq, d):
            raise QpError(f"G has shape {self.G.shape}, expected {(self.n_ineq, d)}")
        for name in ("P", "Aeq", "G"):
            if not np.all(np.isfinite(getattr(self, name).data)):
                raise QpError(f"{name} has non-finite entries")
        for name in ("q", "beq", "h"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise QpError(f"{name} has non-finite entries")
        asym = abs(self.P - self.P.T)
        if asym.nnz and asym.max() > 1e-10:
            raise QpError("P is not symmetric")

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.P @ z) + self.q @ z)


@dataclass
class QpSettings:
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    max_iterations: int = 20000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho_interval: int = 25
    scaling_iterations: int = 10
    eps_infeasible: float = 1e-7
    polish: bool = True
    polish_refine_steps: int = 3
    polish_active_set_iterations: int = 400
    polish_quick_iterations: int = 12
    polish_reg: float = 1e-10
    cache_size: int = 64
    method: str = "auto"
    admm_stall_iterations: int = 2000
    ipm_max_iterations: int = 100
    compiled: bool = True

    def __post_init__(self):
        if self.eps_abs <= 0 or self.eps_rel <= 0:
            raise QpError("tolerances must be positive")
        if self.max_iterations < 1:
            raise QpError("max_iterations must be >= 1")
        if self.method not in ("auto", "admm", "ipm"):
            raise QpError(f"unknown method {self.method!r}")


@dataclass
class QpSolution:
    z: np.ndarray
    lambda_eq: np.ndarray
    mu_ineq: np.ndarray
    status: QpStatus
    primal_residual: float
    dual_residual: float
    iterations: int
    polished: bool = False
    active_set: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def solved(self) -> bool:
        return self.status is QpStatus.SOLVED


def kkt_residuals(problem: QpProblem, solution: QpSolution) -> tuple[float, float, float, float]:
    """Infinity-norm residuals (stationarity, primal_eq, primal_ineq, complementarity)."""
    z = np.asarray(solution.z, dtype=float)
    lam = np.asarray(solution.lambda_eq, dtype=float)
    mu = np.asarray(solution.mu_ineq, dtype=float)
    if z.size != problem.dim or lam.size != problem.n_eq or mu.size != problem.n_ineq:
        raise QpError("solution dimensions do not match the problem")
    grad = problem.P @ z + problem.q + problem.Aeq.T @ lam + problem.G.T @ mu
    slack = problem.G @ z - problem.h
    eq = problem.Aeq @ z - problem.beq
    return (
        _inf_norm(grad),
        _inf_norm(eq),
        _inf_norm(np.maximum(slack, 0.0)),
        _inf_norm(mu * slack),
    )


def _inf_norm(v) -> float:
    v = np.asarray(v)
    return float(np.max(np.abs(v))) if v.size else 0.0


class _Factor:
    """LU factorization; dense arrays and small sparse matrices use LAPACK."""

    def __init__(self, M):
        if not sp.issparse(M) or M.shape[0] <= _DENSE_LIMIT:
            self._lu = sla.lu_factor(M.toarray() if sp.issparse(M) else M, check_finite=False)
            self._sparse = False
        else:
            self._lu = spla.splu(sp.csc_matrix(M))
            self._sparse = True

    def solve(self, b):
        if self._sparse:
            return self._lu.solve(b)
        return sla.lu_solve(self._lu, b, check_finite=False)


class QpSolver:
    """Reusable solver for a fixed (P, Aeq, G) with varying q, beq, h.

    Small problems are held as dense arrays so that active-set solves use
    LAPACK directly.  Inequality rows with a single nonzero are recognized as
    variable bounds; when active they fix their variable, which is then
    eliminated from the polishing KKT system.
    """

    def __init__(self, problem: QpProblem, settings: QpSettings | None = None):
        problem.check()
        self.problem = problem
        self.settings = settings or QpSettings()
        self._n, self._p, self._m = problem.dim, problem.n_eq, problem.n_ineq
        self._scale()
        self._dense = self._n * (self._n + self._p + self._m) <= _DENSE_ENTRIES
        if self._dense:
            if self._scaled_dense is not None:
                self._Pd, self._Ad = self._scaled_dense
            else:
                self._Pd = self._Ps.toarray()
                self._Ad = self._As.toarray()
            self._Pu = problem.P.toarray()
            self._Aequ = problem.Aeq.toarray()
            self._Gu = problem.G.toarray()
        else:
            self._Pu, self._Aequ, self._Gu = problem.P, problem.Aeq, problem.G
        G = sp.csr_matrix(self._As[self._p:])
        counts = np.diff(G.indptr)
        self._bound_var = np.full(self._m, -1)
        self._bound_coef = np.zeros(self._m)
        single = np.flatnonzero(counts == 1)
        self._bound_var[single] = G.indices[G.indptr[single]]
        self._bound_coef[single] = G.data[G.indptr[single]]
        # one bound row per bounded variable without curvature, lower bounds preferred
        diag = self._Ps.diagonal()
        flat = diag <= 1e-9 * max(float(np.max(diag, initial=0.0)), 1e-300)
        order = np.lexsort((self._bound_coef > 0, self._bound_var))
        order = order[self._bound_var[order] >= 0]
        order = order[flat[self._bound_var[order]]]
        _, first = np.unique(self._bound_var[order], return_index=True)
        self._cold = np.sort(order[first])
        self._counters = np.zeros(3, dtype=np.int64)
        self._admm_factor = None
        self._admm_rho = None
        self._polish_cache: OrderedDict = OrderedDict()
        self._recent: list = []
        self.stats: Counter = Counter()

    # -- scaling ---------------------------------------------------------
    def _scale(self) -> None:
        prob, s = self.problem, self.settings
        n = self._n
        A = sp.vstack([prob.Aeq, prob.G]).tocsc()
        P = prob.P.tocsc()
        D = np.ones(n)
        E = np.ones(A.shape[0])
        dense = n * (n + A.shape[0]) <= _DENSE_ENTRIES
        Ps, As = (P.toarray(), A.toarray()) if dense else (P.copy(), A.copy())
        for _ in range(s.scaling_iterations):
            col = np.maximum(_col_inf(Ps), _col_inf(As)) if A.shape[0] else _col_inf(Ps)
            dD = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
            dD[col == 0] = 1.0
            dE = np.ones(A.shape[0])
            if A.shape[0]:
                row = _row_inf(As)
                dE = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
                dE[row == 0] = 1.0
            if dense:
                Ps = dD[:, None] * Ps * dD
                As = dE[:, None] * As * dD
            else:
                Ps = sp.diags(dD) @ Ps @ sp.diags(dD)
                As = sp.diags(dE) @ As @ sp.diags(dD)
            D *= dD
            E *= dE
        self._D, self._E = D, E
        self._scaled_dense = (np.ascontiguousarray(Ps), np.ascontiguousarray(As)) if dense else None
        self._Ps = sp.csc_matrix(Ps)
        self._As = sp.csc_matrix(As)
        self._AsT = sp.csc_matrix(As.T)
        # cost scaling is refreshed per solve because q may change
        pcol = _col_inf(self._Ps)
        self._pnorm = float(np.mean(pcol)) if pcol.size else 0.0

    # -- public ----------------------------------------------------------
    def solve(
        self,
        q: np.ndarray | None = None,
        beq: np.ndarray | None = None,
        h: np.ndarray | None = None,
        warm_start: QpSolution | None = None,
        active_guess=None,
    ) -> QpSolution:
        """Solve with new vectors; the matrices are fixed at construction.

        ``active_guess`` is one candidate active set (indices into G's rows)
        or a list of candidates; each is tried with warm-started dual
        active-set corrections before falling back to the iterative methods.
        """
        prob = self.problem
        q = prob.q if q is None else np.asarray(q, dtype=float)
        beq = prob.beq if beq is None else np.asarray(beq, dtype=float)
        h = prob.h if h is None else np.asarray(h, dtype=float)
        data = _Data(q, beq, h)

        if self.settings.polish:
            guesses = []
            if active_guess is not None:
                if isinstance(active_guess, (list, tuple)):
                    guesses.extend(np.asarray(g, dtype=int) for g in active_guess if g is not None)
                else:
                    guesses.append(np.asarray(active_guess, dtype=int))
            if warm_start is not None and warm_start.polished:
                guesses.append(warm_start.active_set)
            n_explicit = len(guesses)
            guesses.extend(reversed(self._recent))
            unique, seen = [], set()
            for i, guess in enumerate(guesses):
                guess = np.unique(guess)
                key = _key(guess)
                if key not in seen:
                    seen.add(key)
                    unique.append((i < n_explicit, guess))
            # a short budget on every candidate first, then the full budget on the first one
            quick = min(self.settings.polish_quick_iterations, self.settings.polish_active_set_iterations)
            passes = [(quick, unique)]
            if unique and self.settings.polish_active_set_iterations > quick:
                passes.append((self.settings.polish_active_set_iterations, unique[:1]))
            for budget, candidates in passes:
                for explicit, guess in candidates:
                    sol = self._polish(data, guess, iterations=budget)
                    if sol is not None:
                        self.stats["guess" if explicit else "cache"] += 1
                        self._remember(sol)
                        return sol
            if self._dense and self.settings.compiled and self._cold.size:
                # a vertex with every bounded variable at a bound; the compiled
                # iterations are cheap enough to walk from there
                sol = self._polish(data, self._cold, iterations=2 * (self._n + self._m))
                if sol is not None:
                    self.stats["cold"] += 1
                    return self._remember(sol)
        method = self.settings.method
        self.stats[method] += 1
        if method == "ipm":
            return self._remember(self._ipm(data))
        if method == "admm":
            return self._admm(data, warm_start, self.settings.max_iterations)
        sol = self._admm(data, warm_start, min(self.settings.admm_stall_iterations, self.settings.max_iterations))
        if sol.status is QpStatus.MAX_ITERATIONS:
            ipm = self._ipm(data)
            if ipm.solved:
                ipm.iterations += sol.iterations
                return self._remember(ipm)
        return self._remember(sol)

    def _remember(self, sol):
        if sol.polished and sol.active_set is not None:
            key = _key(np.unique(sol.active_set))
            self._recent = [a for a in self._recent if _key(a) != key][-3:] + [np.frombuffer(key, dtype=np.int64)]
        return sol

    # -- ADMM ------------------------------------------------------------
    def _admm(self, data, warm_start, max_iterations):
        s = self.settings
        n, p, m = self._n, self._p, self._m
        D, E = self._D, self._E
        Ps, As, AsT = self._Ps, self._As, self._AsT
        qs = D * data.q
        c = 1.0 / max(self._pnorm, _inf_norm(qs), 1e-4) if qs.size else 1.0
        c = min(c, 1e4)
        qs = c * qs
        Pc = c * Ps
        l = E * np.concatenate([data.beq, np.full(m, -np.inf)])
        u = E * np.concatenate([data.beq, data.h])
        eq_rows = np.zeros(p + m, dtype=bool)
        eq_rows[:p] = True

        x = np.zeros(n)
        z = np.zeros(p + m)
        y = np.zeros(p + m)
        if warm_start is not None and warm_start.z.size == n:
            x = warm_start.z / D
            z = np.clip(As @ x, l, u)
            y = np.concatenate([warm_start.lambda_eq, warm_start.mu_ineq]) / E * c

        rho = s.rho
        rho_vec = np.where(eq_rows, 1e3 * rho, rho)
        factor = self._admm_factorization(rho, rho_vec, c)
        last_active = None
        it = 0
        sol = None
        for it in range(1, max_iterations + 1):
            x_prev, z_prev, y_prev = x, z, y
            rhs = s.sigma * x - qs + AsT @ (rho_vec * z - y)
            xt = factor.solve(rhs)
            zt = As @ xt
            x = s.alpha * xt + (1 - s.alpha) * x_prev
            zr = s.alpha * zt + (1 - s.alpha) * z_prev
            z = np.clip(zr + y / rho_vec, l, u)
            y = y + rho_vec * (zr - z)

            check = it % s.adaptive_rho_interval == 0 or it == max_iterations
            if not check:
                continue
            Ax = As @ x
            prim = _inf_norm((Ax - z) / E) if p + m else 0.0
            Px = Pc @ x
            ATy = AsT @ y
            dual = _inf_norm((Px + qs + ATy) / D) / c
            if prim <= s.eps_abs and dual <= s.eps_abs:
                sol = self._pack(x, y, c, QpStatus.SOLVED, prim, dual, it)
                break
            if s.polish and p + m:
                active = np.flatnonzero(~eq_rows & (y > 0) & (u - z < y / rho_vec)) - p
                key = _key(active)
                if key != last_active:
                    last_active = key
                    pol = self._polish(data, active, iterations=s.polish_active_set_iterations)
                    if pol is not None:
                        pol.iterations = it
                        return pol
            cert = self._infeasibility(x - x_prev, y - y_prev, Pc, qs, l, u, eq_rows, c)
            if cert is not None:
                return self._pack(x, y, c, cert, prim, dual, it)
            # adaptive step size
            pn = max(_inf_norm(Ax), _inf_norm(z), 1e-12)
            dn = max(_inf_norm(Px), _inf_norm(ATy), _inf_norm(qs), 1e-12)
            ratio = np.sqrt((prim / pn + 1e-30) / (dual / dn + 1e-30)) if dual > 0 else 1.0
            new_rho = float(np.clip(rho * ratio, 1e-6, 1e6))
            if new_rho > 5 * rho or new_rho < rho / 5:
                rho = new_rho
                rho_vec = np.where(eq_rows, 1e3 * rho, rho)
                factor = self._admm_factorization(rho, rho_vec, c)
        if sol is None:
            Ax = As @ x
            prim = _inf_norm((Ax - z) / E) if p + m else 0.0
            dual = _inf_norm((Pc @ x + qs + AsT @ y) / D) / c
            sol = self._pack(x, y, c, QpStatus.MAX_ITERATIONS, prim, dual, it)
        return sol

    # -- interior point ----------------------------------------------------
    def _ipm(self, data):
        """Mehrotra predictor-corrector on the scaled problem, then polishing."""
        st = self.settings
        n, p, m = self._n, self._p, self._m
        D, E = self._D, self._E
        if self._dense:
            Ps, Aeq, G = self._Pd, self._Ad[:p], self._Ad[p:]
            GT = G.T
        else:
            Ps = self._Ps
            Aeq, G = self._As[:p], self._As[p:]
            GT = sp.csc_matrix(G.T)
        qs = D * data.q
        c = 1.0 / max(self._pnorm, _inf_norm(qs), 1e-4) if qs.size else 1.0
        c = min(c, 1e4)
        Pc, qs = c * Ps, c * qs
        b = E[:p] * data.beq
        h = E[p:] * data.h
        reg = 1e-9
        I_n = sp.identity(n, format="csc")
        I_p = sp.identity(p, format="csc")

        def kkt(w):
            if self._dense:
                H = Pc + (GT * w) @ G + reg * np.eye(n)
                if p:
                    return _Factor(np.block([[H, Aeq.T], [Aeq, -reg * np.eye(p)]]))
                return _Factor(H)
            H = Pc + GT @ sp.diags(w) @ G + reg * I_n if m else Pc + reg * I_n
            if p:
                return _Factor(sp.bmat([[H, Aeq.T], [Aeq, -reg * I_p]], format="csc"))
            return _Factor(sp.csc_matrix(H))

        def newton(fac, w, rd, rp, rg, rc, s_, mu_):
            # eliminate ds = -rg - G dz and dmu = (-rc + mu (rg + G dz)) / s
            rhs_z = -rd - (GT @ ((-rc + mu_ * rg) / s_) if m else 0.0)
            sol = fac.solve(np.concatenate([rhs_z, -rp]))
            dz = sol[:n]
            dl = sol[n:]
            Gdz = G @ dz if m else np.zeros(0)
            ds = -rg - Gdz
            dmu = (-rc - mu_ * ds) / s_ if m else np.zeros(0)
            return dz, dl, ds, dmu

        # starting point
        fac = kkt(np.ones(m))
        sol = fac.solve(np.concatenate([-qs + (GT @ h if m else 0.0), b]))
        z = sol[:n]
        lam = np.zeros(p)
        s_ = h - G @ z if m else np.zeros(0)
        mu_ = np.ones(m)
        if m:
            shift = -np.min(s_)
            if shift >= 0:
                s_ = s_ + 1.0 + shift
            s_ = np.maximum(s_, 1e-2)

        def step_len(v, dv):
            neg = dv < 0
            return min(1.0, float(np.min(-v[neg] / dv[neg]))) if np.any(neg) else 1.0

        it = 0
        for it in range(1, st.ipm_max_iterations + 1):
            rd = Pc @ z + qs + (Aeq.T @ lam if p else 0.0) + (GT @ mu_ if m else 0.0)
            rp = Aeq @ z - b if p else np.zeros(0)
            rg = G @ z + s_ - h if m else np.zeros(0)
            gap = float(s_ @ mu_) / m if m else 0.0
            dual = _inf_norm(rd / D) / c
            prim = max(_inf_norm(rp / E[:p]) if p else 0.0, _inf_norm(rg / E[p:]) if m else 0.0)
            if dual <= st.eps_abs and prim <= st.eps_abs and gap <= st.eps_abs * 1e-2:
                break
            w = mu_ / s_ if m else np.zeros(0)
            fac = kkt(w)
            dz, dl, ds, dmu = newton(fac, w, rd, rp, rg, s_ * mu_, s_, mu_)
            if not m:
                z, lam = z + dz, lam + dl
                continue
            a = min(step_len(s_, ds), step_len(mu_, dmu))
            gap_aff = float((s_ + a * ds) @ (mu_ + a * dmu)) / m
            sigma = (gap_aff / gap) ** 3 if gap > 0 else 0.0
            rc = s_ * mu_ + ds * dmu - sigma * gap
            dz, dl, ds, dmu = newton(fac, w, rd, rp, rg, rc, s_, mu_)
            a = 0.99 * min(step_len(s_, ds), step_len(mu_, dmu))
            z, lam, s_, mu_ = z + a * dz, lam + a * dl, s_ + a * ds, mu_ + a * dmu
            s_ = np.maximum(s_, 1e-300)
            mu_ = np.maximum(mu_, 1e-300)

        if st.polish and m:
            guesses = [np.flatnonzero(mu_ > s_), np.flatnonzero(mu_ > 10 * s_), np.flatnonzero(10 * mu_ > s_)]
            for guess in guesses:
                pol = self._polish(data, guess, iterations=st.polish_active_set_iterations)
                if pol is not None:
                    pol.iterations = it
                    return pol
        y = np.concatenate([lam, mu_])
        rd = Pc @ z + qs + self._AsT @ y
        dual = _inf_norm(rd / D) / c
        Az = self._As @ z
        prim = max(_inf_norm((Az[:p] - b) / E[:p]) if p else 0.0, _inf_norm(np.maximum(Az[p:] - h, 0) / E[p:]) if m else 0.0)
        status = QpStatus.SOLVED if dual <= st.eps_abs and prim <= st.eps_abs else QpStatus.MAX_ITERATIONS
        out = self._pack(z, y, c, status, prim, dual, it)
        out.active_set = np.flatnonzero(mu_ > s_) if m else out.active_set
        return out

    def _admm_factorization(self, rho, rho_vec, c):
        key = (rho, c)
        if self._admm_rho == key:
            return self._admm_factor
        s = self.settings
        M = c * self._Ps + s.sigma * sp.identity(self._n) + self._AsT @ sp.diags(rho_vec) @ self._As
        self._admm_factor = _Factor(sp.csc_matrix(M))
        self._admm_rho = key
        return self._admm_factor

    def _infeasibility(self, dx, dy, Pc, qs, l, u, eq_rows, c):
        eps = self.settings.eps_infeasible
        D, E = self._D, self._E
        dy_n = _inf_norm(E * dy)
        if dy_n > 1e-12:
            lhs = _inf_norm((self._AsT @ dy) / D)
            ineq = ~eq_rows
            sign_ok = np.all(dy[ineq] >= -eps * dy_n) if ineq.any() else True
            ub = np.where(np.isfinite(u), u, 0.0) @ np.maximum(dy, 0.0)
            lb = np.where(np.isfinite(l), l, 0.0) @ np.minimum(dy, 0.0)
            if lhs <= eps * dy_n and sign_ok and ub + lb < -eps * dy_n:
                return QpStatus.PRIMAL_INFEASIBLE
        dx_n = _inf_norm(D * dx)
        if dx_n > 1e-12:
            Pdx = _inf_norm((Pc @ dx) / D) / c
            qdx = (qs @ dx) / c
            Adx = (self._As @ dx) / E
            eq_ok = np.all(np.abs(Adx[eq_rows]) <= eps * dx_n)
            in_ok = np.all(Adx[~eq_rows] <= eps * dx_n)
            if Pdx <= eps * dx_n and qdx < -eps * dx_n and eq_ok and in_ok:
                return QpStatus.DUAL_INFEASIBLE
        return None

    def _pack(self, x, y, c, status, prim, dual, it):
        z = self._D * x
        yy = self._E * y / c
        p = self._p
        mu = yy[p:]
        if status is QpStatus.SOLVED:
            mu = np.maximum(mu, 0.0)
        return QpSolution(z, yy[:p], mu, status, prim, dual, it)

    # -- polishing -------------------------------------------------------
    def _polish_factor(self, active):
        key = _key(active)
        if key in self._polish_cache:
            self._polish_cache.move_to_end(key)
            return self._polish_cache[key]
        sys = self._build_polish(active)
        self._polish_cache[key] = sys
        if len(self._polish_cache) > self.settings.cache_size:
            self._polish_cache.popitem(last=False)
        return sys

    def _build_polish(self, active):
        n, p = self._n, self._p
        reg = self.settings.polish_reg
        bvar = self._bound_var[active]
        bnd = active[bvar >= 0]
        gen = active[bvar < 0]
        fixed = self._bound_var[bnd]
        if np.unique(fixed).size != fixed.size:
            return None
        free = np.setdiff1d(np.arange(n), fixed)
        rows = np.concatenate([np.arange(p), p + gen])
        k = rows.size
        if self._dense:
            Pff = self._Pd[np.ix_(free, free)]
            C = self._Ad[np.ix_(rows, free)]
            Kt = np.block([[Pff, C.T], [C, np.zeros((k, k))]])
            K = Kt + np.diag(np.concatenate([np.full(free.size, reg), np.full(k, -reg)]))
            Px = self._Pd[np.ix_(free, fixed)]
            Cx = self._Ad[np.ix_(rows, fixed)]
        else:
            Ps = self._Ps.tocsr()
            As = self._As.tocsr()
            Pff = Ps[free][:, free]
            C = As[rows][:, free]
            Kt = sp.bmat([[Pff, C.T], [C, None]], format="csr") if k else sp.csr_matrix(Pff)
            K = sp.bmat(
                [[Pff + reg * sp.identity(free.size), C.T], [C, -reg * sp.identity(k)]], format="csc"
            ) if k else sp.csc_matrix(Pff + reg * sp.identity(free.size))
            Px = Ps[free][:, fixed]
            Cx = As[rows][:, fixed]
        if K.shape[0] == 0:
            lu = None
        else:
            try:
                lu = _Factor(K)
            except (RuntimeError, ValueError, np.linalg.LinAlgError):
                return None
        return _PolishSystem(lu, Kt, free, fixed, bnd, gen, rows, Px, Cx)

    def _kkt(self, sys, top, cons, fixed_vals):
        """Solve P z + C' y + sum mu_b e_b = top, C z = cons, z_fixed = fixed_vals (scaled space).

        Returns (z, y for sys.rows, mu for sys.bnd) or None on numerical failure.
        """
        zs = np.zeros(self._n)
        zs[sys.fixed] = fixed_vals
        rhs = np.concatenate([top[sys.free] - sys.Px @ fixed_vals, cons - sys.Cx @ fixed_vals])
        if sys.lu is not None:
            sol = sys.lu.solve(rhs)
            for _ in range(self.settings.polish_refine_steps):
                r = rhs - sys.Kt @ sol
                if _inf_norm(r) <= 1e-14 * max(1.0, _inf_norm(rhs)):
                    break
                sol = sol + sys.lu.solve(r)
            if not np.all(np.isfinite(sol)):
                return None
        else:
            sol = rhs
        nf = sys.free.size
        zs[sys.free] = sol[:nf]
        ys = sol[nf:]
        if self._dense:
            resid = top - self._Pd @ zs - ys @ self._Ad[sys.rows]
        else:
            resid = top - self._Ps @ zs
            if sys.rows.size:
                resid = resid - self._AsT[:, sys.rows] @ ys
        mu_b = resid[sys.fixed] / self._bound_coef[sys.bnd]
        return zs, ys, mu_b

    def _solve_on(self, data, W):
        """KKT point of the QP with inequality rows W held as equalities (scaled space)."""
        ws = self._working_set(W)
        if ws is None:
            return None
        E, p = self._E, self._p
        return ws.solve(-self._D * data.q, E[:p] * data.beq, E[p:] * data.h)

    def _working_set(self, W):
        return _Refactored.create(self, W)

    def _finish(self, data, W, zs, lam_s, mu_s):
        """Unscale and accept only if the KKT conditions hold within eps_abs."""
        s = self.settings
        p, m = self._p, self._m
        z = self._D * zs
        lam = self._E[:p] * lam_s
        mu = self._E[p:] * mu_s
        viol = self._Gu @ z - data.h if m else np.zeros(0)
        if np.any(viol > s.eps_abs) or np.any(mu < -s.eps_abs):
            return None
        mu = np.maximum(mu, 0.0)
        stat = self._Pu @ z + data.q
        if p:
            stat = stat + self._Aequ.T @ lam
        if m:
            stat = stat + self._Gu.T @ mu
        dual = _inf_norm(stat)
        prim = max(_inf_norm(self._Aequ @ z - data.beq) if p else 0.0, _inf_norm(np.maximum(viol, 0.0)))
        if dual <= s.eps_abs and prim <= s.eps_abs:
            return QpSolution(z, lam, mu, QpStatus.SOLVED, prim, dual, 0, True, W)
        return None

    def _dedupe_bounds(self, W, hs):
        """Keep one bound row per variable: the tightest lower bound, else the tightest upper bound."""
        var = self._bound_var[W]
        b = W[var >= 0]
        if np.unique(var[var >= 0]).size == b.size:
            return W
        coef = self._bound_coef[b]
        level = hs[b] / coef
        # lower bounds first (largest level first), then upper bounds (smallest level first)
        order = np.lexsort((np.where(coef < 0, -level, level), coef > 0))
        _, first = np.unique(self._bound_var[b[order]], return_index=True)
        return np.sort(np.concatenate([W[var < 0], b[order][first]]))

    def _polish(self, data, active, iterations):
        """Solve from a guessed active set with a warm-started dual active-set method.

        The guess is first pruned of constraints with negative multipliers;
        then the most violated constraint is added one at a time, dropping
        constraints whose multipliers reach zero on the way (partial steps).
        ``iterations`` bounds the number of working-set changes.
        """
        s = self.settings
        p, m = self._p, self._m
        E = self._E
        qs, beq_s, hs = -self._D * data.q, E[:p] * data.beq, E[p:] * data.h
        tol = s.eps_abs * 1e-2
        if self._dense and s.compiled and iterations > 0:
            try:
                status, zs, lam_s, mu_s, mask = _kernels.dual_active_set(
                    self._Pd, self._Ad, p, self._bound_var, self._bound_coef, E, qs, beq_s, hs,
                    np.unique(np.asarray(active, dtype=np.int64)), iterations, tol, s.polish_reg,
                    s.polish_refine_steps, _MAX_BORDER, self._counters,
                )
            except (np.linalg.LinAlgError, ZeroDivisionError, ValueError):
                return None
            if status != _kernels.OK:
                return None
            return self._finish(data, np.flatnonzero(mask), zs, lam_s, mu_s)
        W = self._dedupe_bounds(np.unique(np.asarray(active, dtype=int)), hs)
        ws = self._working_set(W)
        if ws is None:
            return None
        for _ in range(iterations + 1):
            if not ws.set(W):
                return None
            out = ws.solve(qs, beq_s, hs)
            if out is None:
                return None
            zs, lam_s, mu_s = out
            rel = mu_s[W] / E[p + W]
            j = int(np.argmin(rel)) if W.size else -1
            if j < 0 or rel[j] >= -tol:
                break
            if iterations == 0:
                return None
            # one at a time: dropping every negative multiplier at once tends to cascade
            W = np.delete(W, j)
        else:
            return None
        if m == 0 or iterations == 0:
            return self._finish(data, W, zs, lam_s, mu_s)
        G = self._Ad[p:] if self._dense else sp.csr_matrix(self._As[p:])
        zero_eq = np.zeros(p)
        zero_h = np.zeros(m)
        changes = 0
        while True:
            viol = (G @ zs - hs) / E[p:]
            viol[W] = -np.inf
            k = int(np.argmax(viol))
            if viol[k] <= tol:
                return self._finish(data, W, zs, lam_s, mu_s)
            gk = G[k] if self._dense else G[k].toarray().ravel()
            while True:
                changes += 1
                if changes > iterations or not ws.set(W):
                    return None
                out = ws.solve(-gk, zero_eq, zero_h)
                if out is None:
                    return None
                d, _, r = out
                gd = float(gk @ d)
                slack_k = float(gk @ zs - hs[k])
                t1 = -slack_k / gd if gd < -1e-14 * max(1.0, _inf_norm(gk)) * max(1.0, _inf_norm(d)) else np.inf
                rW = r[W]
                dec = rW < 0
                if np.any(dec):
                    ratios = mu_s[W][dec] / -rW[dec]
                    j = int(np.argmin(ratios))
                    t2 = float(ratios[j])
                    drop = W[dec][j]
                else:
                    t2, drop = np.inf, -1
                if not np.isfinite(t1) and not np.isfinite(t2):
                    return None
                if t2 < t1:
                    zs = zs + t2 * d
                    mu_s = mu_s + t2 * r
                    mu_s[drop] = 0.0
                    W = W[W != drop]
                    continue
                W = np.union1d(W, [k])
                if not ws.set(W):
                    return None
                out = ws.solve(qs, beq_s, hs)
                if out is None:
                    return None
                zs, lam_s, mu_s = out
                break


class _Refactored:
    """Working-set KKT solves that refactorize (through the cache) on every change."""

    def __init__(self, solver):
        self.solver = solver
        self.sys = None

    @classmethod
    def create(cls, solver, W):
        ws = cls(solver)
        return ws if ws.set(W) else None

    def set(self, W) -> bool:
        self.sys = self.solver._polish_factor(np.asarray(W, dtype=int))
        return self.sys is not None

    def solve(self, top, beq_s, hs):
        sv, sys = self.solver, self.sys
        p = sv._p
        out = sv._kkt(sys, top, np.concatenate([beq_s, hs[sys.gen]]), hs[sys.bnd] / sv._bound_coef[sys.bnd])
        if out is None:
            return None
        zs, ys, mu_b = out
        mu_s = np.zeros(sv._m)
        mu_s[sys.gen] = ys[p:]
        mu_s[sys.bnd] = mu_b
        return zs, ys[:p], mu_s


class _PolishSystem:
    __slots__ = ("lu", "Kt", "free", "fixed", "bnd", "gen", "rows", "Px", "Cx")

    def __init__(self, lu, Kt, free, fixed, bnd, gen, rows, Px, Cx):
        self.lu, self.Kt, self.free, self.fixed = lu, Kt, free, fixed
        self.bnd, self.gen, self.rows, self.Px, self.Cx = bnd, gen, rows, Px, Cx


class _Data:
    __slots__ = ("q", "beq", "h")

    def __init__(self, q, beq, h):
        self.q, self.beq, self.h = q, beq, h


def _key(active) -> bytes:
    return np.asarray(active, dtype=np.int64).tobytes()


def _col_inf(M) -> np.ndarray:
    if not sp.issparse(M):
        return np.abs(M).max(axis=0) if M.shape[0] else np.zeros(M.shape[1])
    M = sp.csc_matrix(M)
    if M.shape[0] == 0 or M.nnz == 0:
        return np.zeros(M.shape[1])
    return np.asarray(abs(M).max(axis=0).todense()).ravel()


def _row_inf(M) -> np.ndarray:
    if not sp.issparse(M):
        return np.abs(M).max(axis=1) if M.shape[1] else np.zeros(M.shape[0])
    M = sp.csr_matrix(M)
    if M.shape[1] == 0 or M.nnz == 0:
        return np.zeros(M.shape[0])
    return np.asarray(abs(M).max(axis=1).todense()).ravel()


def solve_qp(problem: QpProblem, settings: QpSettings | None = None) -> QpSolution:
    """Solve a single QP.  See ``QpSolver`` for repeated solves."""
    return QpSolver(problem, settings).solve()
