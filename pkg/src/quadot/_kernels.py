"""Hot numerical kernels with a numba fast path and a pure-numpy fallback.

The solver's inner loops (exact hinge row solves, residual passes, the
breakpoint sweep of the section-deviation statistic) dominate the runtime of
the Monte Carlo experiments, so they live here in two interchangeable
implementations:

* a numba ``@njit`` path (default when numba imports successfully), and
* a pure-numpy path, selected by setting the environment variable
  ``QUADOT_NO_NUMBA=1`` before import.

Both implementations compute identical quantities (the numpy path uses pairwise
summation, so last-ulp differences between the two are possible and expected).
``IMPLEMENTATIONS`` exposes both for the benchmark script and the agreement
tests. All kernels expect C-contiguous float64 arrays.

Semantics
---------
``row_update_cold(C, opp, w, eps)``
    For every row i, the unique t solving ``sum_j w[j] * (t + opp[j] - C[i,j])_+
    = eps`` by the sorted-breakpoint closed form.
``row_update_warm(C, opp, w, eps, t0)``
    Same roots, found by a guarded Newton iteration started at ``t0`` (exact
    once the root's linear piece is reached; falls back to the sorted scan
    after 60 passes).
``hinge_stats(C, f, g, p, q)``
    Row sums ``sum_j q[j]*(xi_ij)_+``, column sums ``sum_i p[i]*(xi_ij)_+`` and
    the scalar ``sum_ij p[i] q[j] (xi_ij)_+^2`` where ``xi = f + g - C``.
``hinge_weighted_sum(C, f, g, wx, wy)``
    ``sum_ij wx[i] wy[j] (xi_ij)_+``.
``hinge_sq_stats(C, f, g, p, q)``
    Row sums ``sum_j q[j]*(xi_ij)_+^2`` and column sums
    ``sum_i p[i]*(xi_ij)_+^2``.
``vc_sweep_max(xi_pop, inc_pop, xi_emp, inc_emp)``
    For every row, sweep the merged breakpoints of ``-xi`` in ascending order
    accumulating the signed increments (ties grouped), and return the largest
    absolute running sum seen anywhere.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_DISABLED = os.environ.get("QUADOT_NO_NUMBA", "").strip() not in ("", "0")

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    HAS_NUMBA = False

NUMBA_ENABLED = HAS_NUMBA and not _ENV_DISABLED


# ---------------------------------------------------------------------------
# pure-numpy implementations (reference semantics)
# ---------------------------------------------------------------------------

def _np_row_update_cold(C, opp, w, eps):
    a = C - opp[None, :]
    order = np.argsort(a, axis=1, kind="stable")
    a_s = np.take_along_axis(a, order, axis=1)
    w_s = w[order]
    cw = np.cumsum(w_s, axis=1)
    caw = np.cumsum(w_s * a_s, axis=1)
    if a.shape[1] > 1:
        # F(a_k) = cw_{k-1} * a_k - caw_{k-1}; atom 0 always precedes the root
        f_break = cw[:, :-1] * a_s[:, 1:] - caw[:, :-1]
        kstar = np.sum(f_break < eps, axis=1)
    else:
        kstar = np.zeros(a.shape[0], dtype=np.int64)
    rows = np.arange(a.shape[0])
    return (eps + caw[rows, kstar]) / cw[rows, kstar]


def _np_row_update_warm(C, opp, w, eps, t0):
    # The fallback path has no cheap warm start; the cold solve is already exact.
    del t0
    return _np_row_update_cold(C, opp, w, eps)


def _np_hinge_stats(C, f, g, p, q):
    R = np.maximum(f[:, None] + g[None, :] - C, 0.0)
    row_h = R @ q
    col_h = p @ R
    sq = p @ (R * R) @ q
    return row_h, col_h, sq


def _np_hinge_weighted_sum(C, f, g, wx, wy):
    R = np.maximum(f[:, None] + g[None, :] - C, 0.0)
    return float(wx @ R @ wy)


def _np_hinge_sq_stats(C, f, g, p, q):
    R = np.maximum(f[:, None] + g[None, :] - C, 0.0)
    R *= R
    return R @ q, p @ R


def _np_vc_sweep_max(xi_pop, inc_pop, xi_emp, inc_emp):
    best = 0.0
    n_rows = xi_pop.shape[0]
    inc = np.concatenate([inc_pop, inc_emp])
    for i in range(n_rows):
        thr = np.concatenate([-xi_pop[i], -xi_emp[i]])
        order = np.argsort(thr, kind="stable")
        sorted_thr = thr[order]
        running = np.cumsum(inc[order])
        # evaluate only at the last entry of each tie group
        if sorted_thr.size > 1:
            ends = np.append(sorted_thr[1:] != sorted_thr[:-1], True)
        else:
            ends = np.ones(1, dtype=bool)
        row_best = np.max(np.abs(running[ends]))
        if row_best > best:
            best = float(row_best)
    return best


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _row_solve_sorted(a, w, eps):
        m = a.shape[0]
        order = np.argsort(a)
        cw = 0.0
        caw = 0.0
        for k in range(m):
            jk = order[k]
            ak = a[jk]
            if cw > 0.0 and cw * ak - caw >= eps:
                return (eps + caw) / cw
            cw += w[jk]
            caw += w[jk] * ak
        return (eps + caw) / cw

    @njit(cache=True)
    def _nb_row_update_cold(C, opp, w, eps):
        n, m = C.shape
        out = np.empty(n)
        a = np.empty(m)
        for i in range(n):
            for j in range(m):
                a[j] = C[i, j] - opp[j]
            out[i] = _row_solve_sorted(a, w, eps)
        return out

    @njit(cache=True)
    def _nb_row_update_warm(C, opp, w, eps, t0):
        n, m = C.shape
        out = np.empty(n)
        a = np.empty(m)
        for i in range(n):
            for j in range(m):
                a[j] = C[i, j] - opp[j]
            t = t0[i]
            solved = False
            for _ in range(60):
                F = 0.0
                d = 0.0
                a_min = np.inf
                for j in range(m):
                    s = t - a[j]
                    if s > 0.0:
                        F += w[j] * s
                        d += w[j]
                    elif s == 0.0:
                        d += w[j]
                    if a[j] < a_min:
                        a_min = a[j]
                r = eps - F
                if r == 0.0:
                    solved = True
                    break
                if d <= 0.0:
                    t = a_min
                    continue
                t_next = t + r / d
                if t_next == t:
                    solved = True
                    break
                t = t_next
            if solved:
                out[i] = t
            else:
                out[i] = _row_solve_sorted(a, w, eps)
        return out

    @njit(cache=True)
    def _nb_hinge_stats(C, f, g, p, q):
        n, m = C.shape
        row_h = np.empty(n)
        col_h = np.zeros(m)
        sq = 0.0
        for i in range(n):
            fi = f[i]
            pi = p[i]
            acc = 0.0
            acc_sq = 0.0
            for j in range(m):
                xi = fi + g[j] - C[i, j]
                if xi > 0.0:
                    qxi = q[j] * xi
                    acc += qxi
                    acc_sq += qxi * xi
                    col_h[j] += pi * xi
            row_h[i] = acc
            sq += pi * acc_sq
        return row_h, col_h, sq

    @njit(cache=True)
    def _nb_hinge_sq_stats(C, f, g, p, q):
        n, m = C.shape
        row_sq = np.zeros(n)
        col_sq = np.zeros(m)
        for i in range(n):
            fi = f[i]
            pi = p[i]
            acc = 0.0
            for j in range(m):
                s = fi + g[j] - C[i, j]
                if s > 0.0:
                    s2 = s * s
                    acc += q[j] * s2
                    col_sq[j] += pi * s2
            row_sq[i] = acc
        return row_sq, col_sq

    @njit(cache=True)
    def _nb_hinge_weighted_sum(C, f, g, wx, wy):
        n, m = C.shape
        total = 0.0
        for i in range(n):
            fi = f[i]
            acc = 0.0
            for j in range(m):
                xi = fi + g[j] - C[i, j]
                if xi > 0.0:
                    acc += wy[j] * xi
            total += wx[i] * acc
        return total

    @njit(cache=True)
    def _nb_vc_sweep_max(xi_pop, inc_pop, xi_emp, inc_emp):
        n_rows, mp = xi_pop.shape
        ne = xi_emp.shape[1]
        tot = mp + ne
        thr = np.empty(tot)
        inc = np.empty(tot)
        for j in range(mp):
            inc[j] = inc_pop[j]
        for k in range(ne):
            inc[mp + k] = inc_emp[k]
        best = 0.0
        for i in range(n_rows):
            for j in range(mp):
                thr[j] = -xi_pop[i, j]
            for k in range(ne):
                thr[mp + k] = -xi_emp[i, k]
            order = np.argsort(thr)
            running = 0.0
            idx = 0
            while idx < tot:
                v = thr[order[idx]]
                running += inc[order[idx]]
                idx += 1
                while idx < tot and thr[order[idx]] == v:
                    running += inc[order[idx]]
                    idx += 1
                mag = abs(running)
                if mag > best:
                    best = mag
        return best


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

IMPLEMENTATIONS = {
    "numpy": {
        "row_update_cold": _np_row_update_cold,
        "row_update_warm": _np_row_update_warm,
        "hinge_stats": _np_hinge_stats,
        "hinge_sq_stats": _np_hinge_sq_stats,
        "hinge_weighted_sum": _np_hinge_weighted_sum,
        "vc_sweep_max": _np_vc_sweep_max,
    }
}

if HAS_NUMBA:
    IMPLEMENTATIONS["numba"] = {
        "row_update_cold": _nb_row_update_cold,
        "row_update_warm": _nb_row_update_warm,
        "hinge_stats": _nb_hinge_stats,
        "hinge_sq_stats": _nb_hinge_sq_stats,
        "hinge_weighted_sum": _nb_hinge_weighted_sum,
        "vc_sweep_max": _nb_vc_sweep_max,
    }

_ACTIVE = IMPLEMENTATIONS["numba"] if NUMBA_ENABLED else IMPLEMENTATIONS["numpy"]

row_update_cold = _ACTIVE["row_update_cold"]
row_update_warm = _ACTIVE["row_update_warm"]
hinge_stats = _ACTIVE["hinge_stats"]
hinge_sq_stats = _ACTIVE["hinge_sq_stats"]
hinge_weighted_sum = _ACTIVE["hinge_weighted_sum"]
vc_sweep_max = _ACTIVE["vc_sweep_max"]


def warmup():
    """Touch every active kernel on a tiny instance (forces JIT compilation)."""
    C = np.array([[0.0, 1.0], [1.0, 0.5]])
    w = np.array([0.5, 0.5])
    f = np.array([0.1, 0.2])
    g = np.array([0.0, 0.3])
    row_update_cold(C, g, w, 0.5)
    row_update_warm(C, g, w, 0.5, f)
    hinge_stats(C, f, g, w, w)
    hinge_sq_stats(C, f, g, w, w)
    hinge_weighted_sum(C, f, g, w, w)
    vc_sweep_max(C, w, C[:, :1], -w[:1])
