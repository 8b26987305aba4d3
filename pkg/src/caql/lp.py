"""Dense bounded-variable primal simplex.

Solves ``max c.x  s.t.  row_lo <= A x <= row_hi,  col_lo <= x <= col_hi``
with finite column bounds. Rows become logical variables ``r = A x`` with
the row bounds; rows whose activity at the starting vertex violates them get
an artificial column, which phase one drives to zero. The tableau kernel is
compiled with numba; everything is deterministic for a given input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ERROR = "error"

FEAS_TOL = 1e-7
_PIVOT_TOL = 1e-9
_COST_TOL = 1e-9


class LPError(RuntimeError):
    """The simplex kernel failed numerically (distinct from infeasibility)."""


@dataclass
class LPResult:
    status: str
    x: np.ndarray | None = None
    objective: float = -np.inf
    iterations: int = 0


@numba.njit(cache=True)
def _run(T, basis, val, lo, hi, status, m, max_iter, it0):
    ncol = T.shape[1]
    it = it0
    degenerate = 0
    while True:
        if it >= max_iter:
            return 2, it
        bland = degenerate > 40
        q = -1
        best = 0.0
        for j in range(ncol):
            s = status[j]
            if s == 0 or hi[j] - lo[j] <= 0.0:
                continue
            d = T[m, j]
            if s == 1 and d > _COST_TOL:
                score = d
            elif s == 2 and d < -_COST_TOL:
                score = -d
            else:
                continue
            if bland:
                q = j
                break
            if score > best:
                best = score
                q = j
        if q < 0:
            return 0, it
        delta = 1.0 if status[q] == 1 else -1.0
        tmin = hi[q] - lo[q]
        r = -1
        ralpha = 0.0
        for i in range(m):
            alpha = delta * T[i, q]
            b = basis[i]
            if alpha > _PIVOT_TOL:
                if lo[b] == -np.inf:
                    continue
                lim = (val[b] - lo[b]) / alpha
            elif alpha < -_PIVOT_TOL:
                if hi[b] == np.inf:
                    continue
                lim = (hi[b] - val[b]) / (-alpha)
            else:
                continue
            if lim < 0.0:
                lim = 0.0
            if lim < tmin - 1e-12:
                tmin = lim
                r = i
                ralpha = alpha
            elif r >= 0 and lim <= tmin + 1e-12:
                if bland:
                    if basis[i] < basis[r]:
                        r = i
                        ralpha = alpha
                        tmin = min(tmin, lim)
                elif abs(alpha) > abs(ralpha):
                    r = i
                    ralpha = alpha
                    tmin = min(tmin, lim)
        if tmin == np.inf:
            return 3, it
        if tmin > 1e-12:
            degenerate = 0
        else:
            degenerate += 1
        step = delta * tmin
        val[q] += step
        for i in range(m):
            val[basis[i]] -= T[i, q] * step
        if r < 0:
            if status[q] == 1:
                status[q] = 2
                val[q] = hi[q]
            else:
                status[q] = 1
                val[q] = lo[q]
        else:
            b = basis[r]
            if ralpha > 0.0:
                val[b] = lo[b]
                status[b] = 1
            else:
                val[b] = hi[b]
                status[b] = 2
            basis[r] = q
            status[q] = 0
            piv = T[r, q]
            for j in range(ncol):
                T[r, j] /= piv
            for i in range(m + 1):
                if i == r:
                    continue
                f = T[i, q]
                if f != 0.0:
                    for j in range(ncol):
                        T[i, j] -= f * T[r, j]
                    T[i, q] = 0.0
            T[r, q] = 1.0
        it += 1


@numba.njit(cache=True)
def _price(T, basis, cost, m):
    ncol = T.shape[1]
    for j in range(ncol):
        T[m, j] = cost[j]
    for i in range(m):
        cb = cost[basis[i]]
        if cb != 0.0:
            for j in range(ncol):
                T[m, j] -= cb * T[i, j]


@numba.njit(cache=True)
def _simplex(A, rl, ru, cl, cu, c, max_iter):
    m, n = A.shape
    act = np.zeros(m)
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += A[i, j] * cl[j]
        act[i] = s
    n_art = 0
    for i in range(m):
        if act[i] < rl[i] - 1e-12 or act[i] > ru[i] + 1e-12:
            n_art += 1
    ncol = n + m + n_art
    T = np.zeros((m + 1, ncol))
    lo = np.empty(ncol)
    hi = np.empty(ncol)
    val = np.empty(ncol)
    status = np.zeros(ncol, dtype=np.int8)
    basis = np.empty(m, dtype=np.int64)
    for j in range(n):
        lo[j] = cl[j]
        hi[j] = cu[j]
        val[j] = cl[j]
        status[j] = 1
    k = n + m
    for i in range(m):
        for j in range(n):
            T[i, j] = A[i, j]
        T[i, n + i] = -1.0
        lo[n + i] = rl[i]
        hi[n + i] = ru[i]
        if act[i] < rl[i] - 1e-12 or act[i] > ru[i] + 1e-12:
            if act[i] < rl[i]:
                target = rl[i]
                status[n + i] = 1
            else:
                target = ru[i]
                status[n + i] = 2
            val[n + i] = target
            e = 1.0 if target > act[i] else -1.0
            T[i, k] = e
            lo[k] = 0.0
            hi[k] = np.inf
            val[k] = abs(target - act[i])
            status[k] = 0
            basis[i] = k
            diag = e
            k += 1
        else:
            basis[i] = n + i
            val[n + i] = act[i]
            status[n + i] = 0
            diag = -1.0
        for j in range(ncol):
            T[i, j] /= diag

    cost = np.zeros(ncol)
    it = 0
    if n_art > 0:
        for j in range(n + m, ncol):
            cost[j] = -1.0
        _price(T, basis, cost, m)
        code, it = _run(T, basis, val, lo, hi, status, m, max_iter, 0)
        if code != 0:
            return code, val[:n].copy(), it
        infeas = 0.0
        for j in range(n + m, ncol):
            infeas += val[j]
        if infeas > 1e-7:
            return 1, val[:n].copy(), it
        for j in range(n + m, ncol):
            hi[j] = 0.0
            if status[j] != 0:
                val[j] = 0.0
                status[j] = 1
            cost[j] = 0.0
    for j in range(n):
        cost[j] = c[j]
    _price(T, basis, cost, m)
    code, it = _run(T, basis, val, lo, hi, status, m, max_iter, it)
    # refresh basic values from the nonbasic ones to shed accumulated drift
    for i in range(m):
        s = 0.0
        for j in range(ncol):
            if status[j] != 0:
                s -= T[i, j] * val[j]
        val[basis[i]] = s
    return code, val[:n].copy(), it


@numba.njit(cache=True)
def _solve(A, rl, ru, cl, cu, c, max_iter):
    """Presolve singleton rows into column bounds, run the simplex, verify rows.

    Codes: 0 optimal, 1 infeasible, 2 numerical failure.
    """
    m, n = A.shape
    keep = np.ones(m, dtype=np.bool_)
    for i in range(m):
        nnz = 0
        col = -1
        for j in range(n):
            if A[i, j] != 0.0:
                nnz += 1
                col = j
        if nnz > 1:
            continue
        keep[i] = False
        if nnz == 0:
            if rl[i] > FEAS_TOL or ru[i] < -FEAS_TOL:
                return 1, np.zeros(n), 0
            continue
        a = A[i, col]
        if a > 0:
            lo_, hi_ = rl[i] / a, ru[i] / a
        else:
            lo_, hi_ = ru[i] / a, rl[i] / a
        cl[col] = max(cl[col], lo_)
        cu[col] = min(cu[col], hi_)
    for j in range(n):
        if cl[j] > cu[j] + FEAS_TOL:
            return 1, np.zeros(n), 0
        cu[j] = max(cu[j], cl[j])
    mk = 0
    for i in range(m):
        if keep[i]:
            if rl[i] > ru[i] + FEAS_TOL:
                return 1, np.zeros(n), 0
            mk += 1
    A_k = np.empty((mk, n))
    rl_k = np.empty(mk)
    ru_k = np.empty(mk)
    r = 0
    for i in range(m):
        if keep[i]:
            A_k[r] = A[i]
            rl_k[r] = rl[i]
            ru_k[r] = ru[i]
            r += 1
    if max_iter < 0:
        max_iter = 50 * (mk + n) + 1000
    code, x, iters = _simplex(A_k, rl_k, ru_k, cl, cu, c, max_iter)
    if code == 1:
        return 1, x, iters
    if code != 0:
        return 2, x, iters
    for j in range(n):
        x[j] = min(max(x[j], cl[j]), cu[j])
    viol = 0.0
    scale = 1.0
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += A[i, j] * x[j]
        viol = max(viol, rl[i] - s, s - ru[i])
        scale = max(scale, 1.0 + abs(s))
    if viol > 1e-6 * scale:
        return 2, x, iters
    return 0, x, iters


def solve_lp(c, A, row_lo, row_hi, col_lo, col_hi, max_iter: int | None = None) -> LPResult:
    """Maximize ``c.x`` over a row- and column-bounded polytope.

    Column bounds must be finite; row bounds may be infinite. Returns an
    :class:`LPResult` with status ``optimal``, ``infeasible`` or ``error``.
    """
    c = np.ascontiguousarray(c, dtype=np.float64)
    A = np.ascontiguousarray(A, dtype=np.float64).reshape(-1, c.size)
    rl = np.array(row_lo, dtype=np.float64)
    ru = np.array(row_hi, dtype=np.float64)
    cl = np.array(col_lo, dtype=np.float64)
    cu = np.array(col_hi, dtype=np.float64)
    if not (np.isfinite(cl).all() and np.isfinite(cu).all()):
        raise ValueError("column bounds must be finite")
    code, x, iters = _solve(A, rl, ru, cl, cu, c, -1 if max_iter is None else int(max_iter))
    if code == 1:
        return LPResult(INFEASIBLE, iterations=iters)
    if code == 2:
        return LPResult(ERROR, iterations=iters)
    return LPResult(OPTIMAL, x, float(c @ x), iters)
