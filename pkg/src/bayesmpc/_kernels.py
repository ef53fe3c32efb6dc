"""Compiled dual active-set iterations for small dense QPs.

Convention (scaled space): minimize 1/2 z'Pz - top'z subject to
A[:p] z = beq and A[p:] z <= h.  Inequality rows with a single nonzero are
bounds; when in the working set they fix their variable, which is removed
from the KKT system.  Working-set changes relative to a base set W0 are
handled by bordering the inverse of the base KKT matrix:

* ``ROW``  an added inequality row (its multiplier is an extra unknown),
* ``DROP`` a general row of W0 that left the set (pins its multiplier to 0),
* ``VAR``  a variable fixed in W0 whose bound left the set (an extra unknown).

Each change costs a few products with the base inverse and a small dense
solve with the Schur complement; the base is rebuilt when the border grows.
"""

from __future__ import annotations

import numpy as np
from numba import njit

ROW, DROP, VAR = 0, 1, 2

OK = 0
FAIL_SINGULAR = 1
FAIL_BUDGET = 2
FAIL_INFEASIBLE = 3
FAIL_DUPLICATE = 4


@njit(cache=True)
def _inf(v):
    r = 0.0
    for x in v:
        a = abs(x)
        if a > r:
            r = a
    return r


@njit(cache=True)
def _build_base(P, A, p, bvar, Wmask, reg):
    """Inverse of the reduced KKT matrix for the working set given by Wmask."""
    n = P.shape[0]
    m = A.shape[0] - p
    fixed_by = np.full(n, -1)
    for i in range(m):
        if Wmask[i] and bvar[i] >= 0:
            if fixed_by[bvar[i]] >= 0:
                return False, np.zeros((1, 1)), np.zeros(0, np.int64), fixed_by, np.zeros(0, np.int64)
            fixed_by[bvar[i]] = i
    nf = 0
    for j in range(n):
        if fixed_by[j] < 0:
            nf += 1
    free = np.empty(nf, np.int64)
    k = 0
    for j in range(n):
        if fixed_by[j] < 0:
            free[k] = j
            k += 1
    ng = 0
    for i in range(m):
        if Wmask[i] and bvar[i] < 0:
            ng += 1
    rows = np.empty(p + ng, np.int64)
    for i in range(p):
        rows[i] = i
    k = p
    for i in range(m):
        if Wmask[i] and bvar[i] < 0:
            rows[k] = p + i
            k += 1
    N = nf + rows.size
    K = np.zeros((N, N))
    for a in range(nf):
        for b in range(nf):
            K[a, b] = P[free[a], free[b]]
        K[a, a] += reg
    for r in range(rows.size):
        for a in range(nf):
            v = A[rows[r], free[a]]
            K[nf + r, a] = v
            K[a, nf + r] = v
        K[nf + r, nf + r] = -reg
    Kinv = np.ascontiguousarray(np.linalg.inv(K))
    return True, Kinv, free, fixed_by, rows


@njit(cache=True)
def _border_column(P, A, p, free, rows, kind, idx, row_pos):
    nf = free.size
    b = np.zeros(nf + rows.size)
    if kind == ROW:
        for a in range(nf):
            b[a] = A[p + idx, free[a]]
    elif kind == DROP:
        b[row_pos[idx]] = 1.0
    else:
        for a in range(nf):
            b[a] = P[free[a], idx]
        for r in range(rows.size):
            b[nf + r] = A[rows[r], idx]
    return b


@njit(cache=True)
def _d_entry(P, A, p, ka, ia, kc, ic, same, reg):
    if ka == VAR and kc == VAR:
        return P[ia, ic] + (reg if same else 0.0)
    if ka == VAR and kc == ROW:
        return A[p + ic, ia]
    if ka == ROW and kc == VAR:
        return A[p + ia, ic]
    if ka == ROW and kc == ROW and same:
        return -reg
    return 0.0


@njit(cache=True)
def _support(v):
    """Indices of the nonzero entries of v."""
    count = 0
    for x in v:
        if x != 0.0:
            count += 1
    out = np.empty(count, np.int64)
    k = 0
    for i in range(v.size):
        if v[i] != 0.0:
            out[k] = i
            k += 1
    return out


@njit(cache=True)
def _stationarity(P, A, p, top, z, lam, mu, j, nz, act):
    """Component j of top - P z - A[:p]' lam - A[p:]' mu, using the supports of z and mu."""
    s = top[j]
    for i in nz:
        s -= P[j, i] * z[i]
    for r in range(p):
        s -= A[r, j] * lam[r]
    for i in act:
        s -= A[p + i, j] * mu[i]
    return s


@njit(cache=True)
def _row_dot(A, row, z, nz):
    s = 0.0
    for j in nz:
        s += A[row, j] * z[j]
    return s


@njit(cache=True)
def _solve_once(P, A, p, bvar, bcoef, Kinv, free, fixed_by0, rows, still_fixed,
                kinds, idxs, k, B, V, Sinv, top, beq, h):
    """One bordered solve; returns (z, lam, mu) on the current working set."""
    n = P.shape[0]
    m = A.shape[0] - p
    nf = free.size
    N0 = nf + rows.size
    z = np.zeros(n)
    # fixed values of variables still held by their base bound row
    for j in range(n):
        i = fixed_by0[j]
        if i >= 0 and still_fixed[j]:
            z[j] = h[i] / bcoef[i]
    fz = _support(z)
    r0 = np.empty(N0)
    for a in range(nf):
        s = top[free[a]]
        for j in fz:
            s -= P[free[a], j] * z[j]
        r0[a] = s
    for r in range(rows.size):
        row = rows[r]
        s = beq[row] if row < p else h[row - p]
        for j in fz:
            s -= A[row, j] * z[j]
        r0[nf + r] = s
    t = Kinv @ r0
    mu = np.zeros(m)
    if k > 0:
        r1 = np.empty(k)
        for c in range(k):
            kind = kinds[c]
            idx = idxs[c]
            if kind == ROW:
                s = h[idx]
                for j in fz:
                    s -= A[p + idx, j] * z[j]
                r1[c] = s
            elif kind == DROP:
                r1[c] = 0.0
            else:
                s = top[idx]
                for j in fz:
                    s -= P[idx, j] * z[j]
                r1[c] = s
        for c in range(k):
            r1[c] -= B[c] @ t
        w = Sinv @ r1
        for c in range(k):
            t -= w[c] * V[c]
        for c in range(k):
            if kinds[c] == ROW:
                mu[idxs[c]] = w[c]
            elif kinds[c] == VAR:
                z[idxs[c]] = w[c]
    for a in range(nf):
        z[free[a]] = t[a]
    lam = np.zeros(p)
    for r in range(rows.size):
        row = rows[r]
        if row < p:
            lam[row] = t[nf + r]
        else:
            mu[row - p] = t[nf + r]
    for c in range(k):
        if kinds[c] == DROP:
            mu[idxs[c]] = 0.0
    # multipliers of bounds that still fix their variable, from stationarity
    nz = _support(z)
    act = _support(mu)
    for j in range(n):
        i = fixed_by0[j]
        if i >= 0 and still_fixed[j]:
            mu[i] = _stationarity(P, A, p, top, z, lam, mu, j, nz, act) / bcoef[i]
    return z, lam, mu


@njit(cache=True)
def dual_active_set(P, A, p, bvar, bcoef, E, top, beq, h, W0, max_changes, tol, reg, refine, max_border, counters):
    """Warm-started dual active-set method; see the module docstring for the conventions.

    Returns (status, z, lam, mu, Wmask); ``counters`` accumulates the number
    of working-set changes, base factorizations and fresh solves.  ``tol`` is in unscaled units: rows
    are unscaled by E before comparing violations or multipliers.
    """
    n = P.shape[0]
    m = A.shape[0] - p
    Wmask = np.zeros(m, np.bool_)
    for i in W0:
        Wmask[i] = True
    # keep one bound row per variable: the tightest lower bound, else the tightest upper bound
    best = np.full(n, -1)
    for i in range(m):
        if Wmask[i] and bvar[i] >= 0:
            j = bvar[i]
            c = best[j]
            if c < 0:
                best[j] = i
            else:
                li = h[i] / bcoef[i]
                lc = h[c] / bcoef[c]
                lower_i = bcoef[i] < 0
                lower_c = bcoef[c] < 0
                take = False
                if lower_i and not lower_c:
                    take = True
                elif lower_i == lower_c:
                    take = li > lc if lower_i else li < lc
                if take:
                    Wmask[c] = False
                    best[j] = i
                else:
                    Wmask[i] = False

    z = np.zeros(n)
    lam = np.zeros(p)
    mu = np.zeros(m)
    kinds = np.zeros(max_border + 1, np.int64)
    idxs = np.zeros(max_border + 1, np.int64)
    B = np.zeros((max_border + 1, 1))
    V = np.zeros((max_border + 1, 1))
    codes = np.full(max_border + 1, -1)
    S = np.zeros((max_border + 1, max_border + 1))
    k = 0
    need_base = True
    Kinv = np.zeros((1, 1))
    free = np.zeros(0, np.int64)
    fixed_by0 = np.zeros(n, np.int64)
    rows = np.zeros(0, np.int64)
    row_pos = np.full(m, -1)
    base_mask = Wmask.copy()
    still_fixed = np.zeros(n, np.bool_)
    Sinv = np.zeros((0, 0))
    changes = 0
    add_k = -1
    muk = 0.0
    fresh = True
    is_fresh = False
    since_fresh = 0
    refresh = 25
    zero_eq = np.zeros(p)
    zero_h = np.zeros(m)
    while True:
        if need_base:
            counters[1] += 1
            good, Kinv, free, fixed_by0, rows = _build_base(P, A, p, bvar, Wmask, reg)
            if not good:
                return FAIL_DUPLICATE, z, lam, mu, Wmask
            if not np.all(np.isfinite(Kinv)):
                return FAIL_SINGULAR, z, lam, mu, Wmask
            N0 = free.size + rows.size
            B = np.zeros((max_border + 1, N0))
            V = np.zeros((max_border + 1, N0))
            codes = np.full(max_border + 1, -1)
            S = np.zeros((max_border + 1, max_border + 1))
            row_pos[:] = -1
            for r in range(rows.size):
                if rows[r] >= p:
                    row_pos[rows[r] - p] = free.size + r
            for j in range(n):
                still_fixed[j] = fixed_by0[j] >= 0
            k = 0
            Sinv = np.zeros((0, 0))
            need_base = False
            base_mask = Wmask.copy()
        # border items from the difference between Wmask and the base set
        k = 0
        overflow = False
        for j in range(n):
            still_fixed[j] = fixed_by0[j] >= 0 and Wmask[fixed_by0[j]]
        for i in range(m):
            if base_mask[i] and not Wmask[i]:
                if k >= max_border:
                    overflow = True
                    break
                if bvar[i] >= 0:
                    kinds[k] = VAR
                    idxs[k] = bvar[i]
                else:
                    kinds[k] = DROP
                    idxs[k] = i
                k += 1
            elif Wmask[i] and not base_mask[i]:
                if k >= max_border:
                    overflow = True
                    break
                if bvar[i] >= 0 and fixed_by0[bvar[i]] >= 0 and still_fixed[bvar[i]]:
                    return FAIL_DUPLICATE, z, lam, mu, Wmask
                kinds[k] = ROW
                idxs[k] = i
                k += 1
        if overflow:
            need_base = True
            continue
        if k > 0:
            newB = np.empty_like(B)
            newV = np.empty_like(V)
            newcodes = np.full(max_border + 1, -1)
            hitpos = np.full(k, -1)
            for c in range(k):
                code = kinds[c] * (n + m) + idxs[c]
                newcodes[c] = code
                for e in range(max_border + 1):
                    if codes[e] == code:
                        hitpos[c] = e
                        break
                if hitpos[c] >= 0:
                    newB[c] = B[hitpos[c]]
                    newV[c] = V[hitpos[c]]
                else:
                    b = _border_column(P, A, p, free, rows, kinds[c], idxs[c], row_pos)
                    newB[c] = b
                    newV[c] = Kinv @ b
            # Schur complement D - B'V; entries between persisting items are reused
            newS = np.empty_like(S)
            for a in range(k):
                for c in range(a, k):
                    if hitpos[a] >= 0 and hitpos[c] >= 0:
                        v = S[hitpos[a], hitpos[c]]
                    else:
                        v = _d_entry(P, A, p, kinds[a], idxs[a], kinds[c], idxs[c], a == c, reg)
                        v -= newB[a] @ newV[c]
                    newS[a, c] = v
                    newS[c, a] = v
            B = newB
            V = newV
            S = newS
            codes = newcodes
            Sinv = np.ascontiguousarray(np.linalg.inv(S[:k, :k]))
            if not np.all(np.isfinite(Sinv)):
                return FAIL_SINGULAR, z, lam, mu, Wmask
        else:
            Sinv = np.zeros((0, 0))

        if fresh:
            counters[2] += 1
            # KKT point on the working set, with refinement
            z, lam, mu = _solve_once(P, A, p, bvar, bcoef, Kinv, free, fixed_by0, rows, still_fixed,
                                     kinds, idxs, k, B, V, Sinv, top, beq, h)
            for _ in range(refine):
                nz = _support(z)
                act = _support(mu)
                rt = np.zeros(n)
                for j in range(n):
                    if not still_fixed[j]:
                        rt[j] = _stationarity(P, A, p, top, z, lam, mu, j, nz, act)
                re = np.empty(p)
                for r in range(p):
                    re[r] = beq[r] - _row_dot(A, r, z, nz)
                rh = np.zeros(m)
                for i in range(m):
                    if Wmask[i]:
                        rh[i] = h[i] - _row_dot(A, p + i, z, nz)
                if max(_inf(rt), _inf(re), _inf(rh)) <= 1e-14 * max(1.0, _inf(top), _inf(h)):
                    break
                dz, dl, dm = _solve_once(P, A, p, bvar, bcoef, Kinv, free, fixed_by0, rows, still_fixed,
                                         kinds, idxs, k, B, V, Sinv, rt, re, rh)
                z = z + dz
                lam = lam + dl
                mu = mu + dm
            if not (np.all(np.isfinite(z)) and np.all(np.isfinite(mu))):
                return FAIL_SINGULAR, z, lam, mu, Wmask
            fresh = False
            is_fresh = True
            since_fresh = 0
            add_k = -1
            muk = 0.0
            # prune the most negative multiplier, one at a time
            worst = -1
            worst_v = -tol
            for i in range(m):
                if Wmask[i]:
                    v = mu[i] * E[p + i]
                    if v < worst_v:
                        worst_v = v
                        worst = i
            if worst >= 0:
                changes += 1
                counters[0] += 1
                if changes > max_changes:
                    return FAIL_BUDGET, z, lam, mu, Wmask
                Wmask[worst] = False
                fresh = True
                continue

        if add_k < 0:
            # pick the most violated row outside the working set
            viol_best = tol
            nz = _support(z)
            for i in range(m):
                if not Wmask[i]:
                    v = (_row_dot(A, p + i, z, nz) - h[i]) / E[p + i]
                    if v > viol_best:
                        viol_best = v
                        add_k = i
            if add_k < 0:
                if is_fresh:
                    return OK, z, lam, mu, Wmask
                # verify the incrementally updated point with a fresh solve
                fresh = True
                continue
            muk = 0.0

        # step towards satisfying row add_k (partial steps drop blocking multipliers)
        gk = A[p + add_k]
        d, _, r = _solve_once(P, A, p, bvar, bcoef, Kinv, free, fixed_by0, rows, still_fixed,
                              kinds, idxs, k, B, V, Sinv, -gk, zero_eq, zero_h)
        gd = gk @ d
        slack_k = gk @ z - h[add_k]
        t1 = np.inf
        if gd < -1e-14 * max(1.0, _inf(gk)) * max(1.0, _inf(d)):
            t1 = -slack_k / gd
        t2 = np.inf
        drop = -1
        for i in range(m):
            if Wmask[i] and r[i] < 0:
                ratio = mu[i] / -r[i]
                if ratio < t2:
                    t2 = ratio
                    drop = i
        if not np.isfinite(t1) and not np.isfinite(t2):
            return FAIL_INFEASIBLE, z, lam, mu, Wmask
        changes += 1
        counters[0] += 1
        if changes > max_changes:
            return FAIL_BUDGET, z, lam, mu, Wmask
        is_fresh = False
        since_fresh += 1
        if t2 < t1:
            z = z + t2 * d
            mu = mu + t2 * r
            muk += t2
            mu[drop] = 0.0
            Wmask[drop] = False
        else:
            z = z + t1 * d
            mu = mu + t1 * r
            mu[add_k] = muk + t1
            Wmask[add_k] = True
            add_k = -1
            if since_fresh >= refresh:
                fresh = True
