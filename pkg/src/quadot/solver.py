"""Dual solvers for quadratically regularized optimal transport.

The problem: given discrete measures P (weights p on points x_i) and Q
(weights q on points y_j) and a regularization strength epsilon > 0, maximize
the concave dual

    D(f, g) = sum_i p_i f_i + sum_j q_j g_j
              - 1/(2 eps) * sum_ij p_i q_j (f_i + g_j - c_ij)_+^2,

with c_ij = 0.5 * ||x_i - y_j||^2.  The slack xi_ij = f_i + g_j - c_ij
determines the optimal coupling density (xi)_+ / eps.  Potentials are unique
only up to (f + a, g - a); the mean-balanced gauge (sum p f = sum q g) picks
the representative.

Three independent solution paths are provided:

* ``solve_alternating`` -- exact blockwise coordinate ascent.  Each f-row update
  given g solves its scalar first-order condition in closed form, so every
  sweep is an exact block maximization and the dual trace is nondecreasing.
* ``solve_gradient`` -- damped simultaneous fixed-step ascent, kept as an
  independent cross-check of the coordinate method.
* ``active_set_oracle`` -- brute-force enumeration of candidate supports for
  instances with at most 12 cells, used as ground truth in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels
from .errors import (
    DimensionMismatchError,
    NoConsistentActiveSetError,
    NonpositiveEpsilonError,
    NotConvergedError,
    TooLargeError,
)
from .measures import DiscreteMeasure

DEFAULT_REL_TOL = 1e-9
ORACLE_CELL_CAP = 12


def eval_cost(x, y) -> float:
    """Half squared euclidean distance between two points."""
    xv = np.atleast_1d(np.asarray(x, dtype=np.float64))
    yv = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if xv.shape != yv.shape:
        raise DimensionMismatchError(f"point dims {xv.shape} vs {yv.shape}")
    d = xv - yv
    return 0.5 * float(d @ d)


def cost_matrix_points(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Pairwise half squared distances, computed with one matrix product.

    Clamped at 0 to kill the tiny negatives the expanded form can produce for
    near-coincident points.
    """
    sx = 0.5 * np.einsum("ij,ij->i", X, X)
    sy = 0.5 * np.einsum("ij,ij->i", Y, Y)
    C = sx[:, None] + sy[None, :] - X @ Y.T
    np.maximum(C, 0.0, out=C)
    return np.ascontiguousarray(C)


@dataclass(frozen=True)
class QotProblem:
    """A QOT instance: two measures, epsilon, and the (fixed) cost convention.

    Zero-weight atoms are dropped at construction; they cannot affect any
    integral, and dropping them keeps section masses and active sets strictly
    meaningful.  All derived vectors (potentials, couplings) are indexed
    against the filtered supports stored here.
    """

    P: DiscreteMeasure
    Q: DiscreteMeasure
    epsilon: float
    cost_kind: str = "half_squared_euclidean"

    def __post_init__(self):
        if not (self.epsilon > 0.0):
            raise NonpositiveEpsilonError(f"epsilon = {self.epsilon!r} must be > 0")
        if self.cost_kind != "half_squared_euclidean":
            raise NotImplementedError(f"unknown cost_kind {self.cost_kind!r}")
        if self.P.dim != self.Q.dim:
            raise DimensionMismatchError(f"P.dim={self.P.dim} != Q.dim={self.Q.dim}")
        object.__setattr__(self, "P", self.P.drop_zero_weights())
        object.__setattr__(self, "Q", self.Q.drop_zero_weights())

    @property
    def n(self) -> int:
        return self.P.size

    @property
    def m(self) -> int:
        return self.Q.size

    @property
    def p(self) -> np.ndarray:
        return self.P.weights

    @property
    def q(self) -> np.ndarray:
        return self.Q.weights

    @cached_property
    def cost(self) -> np.ndarray:
        return cost_matrix_points(self.P.points, self.Q.points)

    @cached_property
    def cost_T(self) -> np.ndarray:
        return np.ascontiguousarray(self.cost.T)

    def swap(self) -> "QotProblem":
        """The symmetric instance with P and Q exchanged."""
        return QotProblem(self.Q, self.P, self.epsilon, self.cost_kind)

    def default_tol(self) -> float:
        """Residuals scale with epsilon, so the default tolerance is relative."""
        return DEFAULT_REL_TOL * self.epsilon


@dataclass(frozen=True)
class PotentialPair:
    """Dual variables (f over P's atoms, g over Q's atoms)."""

    f: np.ndarray
    g: np.ndarray
    gauge: str = "mean_balanced"

    def __init__(self, f, g, gauge="mean_balanced"):
        fa = np.ascontiguousarray(np.asarray(f, dtype=np.float64))
        ga = np.ascontiguousarray(np.asarray(g, dtype=np.float64))
        object.__setattr__(self, "f", fa)
        object.__setattr__(self, "g", ga)
        object.__setattr__(self, "gauge", gauge)
        fa.setflags(write=False)
        ga.setflags(write=False)

    def is_balanced(self, P: DiscreteMeasure, Q: DiscreteMeasure, tol: float = 1e-10) -> bool:
        return abs(float(P.weights @ self.f) - float(Q.weights @ self.g)) <= tol


@dataclass
class SolveReport:
    iterations: int
    final_residual: float
    dual_values: list = field(default_factory=list)
    converged: bool = False


def gauge_fix(pot: PotentialPair, P: DiscreteMeasure, Q: DiscreteMeasure) -> PotentialPair:
    """Shift to the mean-balanced representative: (f+a, g-a) with
    a = (sum q g - sum p f) / 2.  Leaves xi unchanged; idempotent."""
    a = 0.5 * (float(Q.weights @ pot.g) - float(P.weights @ pot.f))
    return PotentialPair(pot.f + a, pot.g - a)


def xi(problem: QotProblem, pot: PotentialPair, i: int, j: int) -> float:
    """Slack f_i + g_j - c_ij at one index pair."""
    return float(pot.f[i] + pot.g[j] - problem.cost[i, j])


def slack_matrix(problem: QotProblem, pot: PotentialPair) -> np.ndarray:
    """The full slack matrix xi = f + g - c."""
    return pot.f[:, None] + pot.g[None, :] - problem.cost


def dual_objective(problem: QotProblem, pot: PotentialPair) -> float:
    _, _, sq = _kernels.hinge_stats(problem.cost, pot.f, pot.g, problem.p, problem.q)
    return (
        float(problem.p @ pot.f)
        + float(problem.q @ pot.g)
        - sq / (2.0 * problem.epsilon)
    )


def marginal_residuals(problem: QotProblem, pot: PotentialPair):
    """First-order residuals r_f(i) = eps - sum_j q_j (xi_ij)_+ and r_g(j)
    = eps - sum_i p_i (xi_ij)_+.

    Both vanish exactly at dual optimizers.  Sign convention: the partial
    derivative of dual_objective in f_i equals +(p_i / eps) * r_f(i) (and in
    g_j equals +(q_j / eps) * r_g(j)), so ascent moves f_i in the direction of
    r_f(i).
    """
    row_h, col_h, _ = _kernels.hinge_stats(
        problem.cost, pot.f, pot.g, problem.p, problem.q
    )
    return problem.epsilon - row_h, problem.epsilon - col_h


def coordinate_update_row(g, q, c_row, epsilon) -> float:
    """The unique t with sum_j q_j (t + g_j - c_row_j)_+ = epsilon.

    Closed form: sort the thresholds a_j = c_row_j - g_j ascending; walk the
    prefix sums of q and q*a until the piecewise-linear map crosses epsilon;
    solve that linear piece.  Exact up to floating point, no iteration.
    """
    if not (epsilon > 0.0):
        raise NonpositiveEpsilonError(f"epsilon = {epsilon!r} must be > 0")
    g = np.asarray(g, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    c_row = np.asarray(c_row, dtype=np.float64)
    a = c_row - g
    order = np.argsort(a, kind="stable")
    a_s = a[order]
    q_s = q[order]
    cw = np.cumsum(q_s)
    caw = np.cumsum(q_s * a_s)
    if a_s.size > 1:
        f_break = cw[:-1] * a_s[1:] - caw[:-1]
        k = int(np.sum(f_break < epsilon))
    else:
        k = 0
    return float((epsilon + caw[k]) / cw[k])


def _solve_core(problem, tol, max_sweeps, f0, g0):
    """Alternating exact block maximization on raw arrays."""
    C, Ct = problem.cost, problem.cost_T
    p, q, eps = problem.p, problem.q, problem.epsilon
    f = np.ascontiguousarray(f0, dtype=np.float64).copy()
    g = np.ascontiguousarray(g0, dtype=np.float64).copy()

    def measure():
        row_h, col_h, sq = _kernels.hinge_stats(C, f, g, p, q)
        res = max(
            float(np.max(np.abs(eps - row_h))), float(np.max(np.abs(eps - col_h)))
        )
        dual = float(p @ f) + float(q @ g) - sq / (2.0 * eps)
        return res, dual

    res, dual = measure()
    trace = [dual]
    sweeps = 0
    while res > tol:
        if sweeps >= max_sweeps:
            return f, g, sweeps, res, trace, False
        f = _kernels.row_update_warm(C, g, q, eps, f)
        g = _kernels.row_update_warm(Ct, f, p, eps, g)
        sweeps += 1
        res, dual = measure()
        trace.append(dual)
    return f, g, sweeps, res, trace, True


def solve_alternating(
    problem: QotProblem,
    tol: float | None = None,
    max_sweeps: int = 2000,
    initial: PotentialPair | None = None,
):
    """Exact coordinate ascent: all f-rows given g (ascending index), then all
    g-columns given f, until the sup-norm of the marginal residuals is <= tol.

    Within a block, row i's exact update reads only the opposite potential, so
    the ascending-index order is deterministic and each half-sweep is an exact
    block maximization (the dual trace is nondecreasing).  Returns gauge-fixed
    potentials and a report; raises NotConvergedError (carrying the best
    iterate) if max_sweeps is exhausted.
    """
    if tol is None:
        tol = problem.default_tol()
    if tol <= 0.0:
        raise ValueError("tol must be > 0")
    f0 = initial.f if initial is not None else np.zeros(problem.n)
    g0 = initial.g if initial is not None else np.zeros(problem.m)
    f, g, sweeps, res, trace, ok = _solve_core(problem, tol, max_sweeps, f0, g0)
    pot = gauge_fix(PotentialPair(f, g), problem.P, problem.Q)
    report = SolveReport(
        iterations=sweeps, final_residual=res, dual_values=trace, converged=ok
    )
    if not ok:
        raise NotConvergedError(
            f"alternating solver: residual {res:.3e} > tol {tol:.3e} "
            f"after {sweeps} sweeps",
            potentials=pot,
            report=report,
        )
    return pot, report


def solve_gradient(
    problem: QotProblem,
    step: float | None = None,
    tol: float | None = None,
    max_iter: int = 50_000,
    initial: PotentialPair | None = None,
):
    """Simultaneous fixed-step dual ascent, as an independent cross-check.

    Update rule: f_i += (step / (2 eps)) * r_f(i) and likewise for g, with
    default step = eps.  The residual direction is the dual gradient with the
    marginal weights divided out; the extra factor 2 damps the overshoot of
    updating both blocks at once (with it, the linearized iteration matrix
    I - M/2 at step = eps has spectrum in [0, 1] for every active set, while
    the undamped update oscillates with period 2 on fully active instances).
    """
    eps = problem.epsilon
    if step is None:
        step = eps
    if step <= 0.0:
        raise ValueError("step must be > 0")
    if tol is None:
        tol = problem.default_tol()
    C, p, q = problem.cost, problem.p, problem.q
    f = (initial.f.copy() if initial is not None else np.zeros(problem.n))
    g = (initial.g.copy() if initial is not None else np.zeros(problem.m))
    theta = step / (2.0 * eps)
    trace = []
    for it in range(max_iter + 1):
        row_h, col_h, sq = _kernels.hinge_stats(C, f, g, p, q)
        r_f = eps - row_h
        r_g = eps - col_h
        res = max(float(np.max(np.abs(r_f))), float(np.max(np.abs(r_g))))
        trace.append(float(p @ f) + float(q @ g) - sq / (2.0 * eps))
        if res <= tol:
            pot = gauge_fix(PotentialPair(f, g), problem.P, problem.Q)
            return pot, SolveReport(it, res, trace, True)
        f = f + theta * r_f
        g = g + theta * r_g
    pot = gauge_fix(PotentialPair(f, g), problem.P, problem.Q)
    report = SolveReport(max_iter, res, trace, False)
    raise NotConvergedError(
        f"gradient solver: residual {res:.3e} > tol {tol:.3e} after {max_iter} steps",
        potentials=pot,
        report=report,
    )


def to_convex_form(pot: PotentialPair, P_points, Q_points):
    """Transformed potentials phi_i = |x_i|^2/2 - f_i, psi_j = |y_j|^2/2 - g_j.

    With them, <x_i, y_j> - phi_i - psi_j = xi_ij entrywise.
    """
    X = np.asarray(P_points, dtype=np.float64)
    Y = np.asarray(Q_points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != pot.f.shape[0] or Y.shape[0] != pot.g.shape[0]:
        raise DimensionMismatchError("potential/point lengths disagree")
    phi = 0.5 * np.einsum("ij,ij->i", X, X) - pot.f
    psi = 0.5 * np.einsum("ij,ij->i", Y, Y) - pot.g
    return phi, psi


def extend_potential(points, opposite: DiscreteMeasure, opposite_values, epsilon: float):
    """Potential values at new points from the first-order condition.

    For each new point x, returns the unique t with
    sum_j w_j (t + v_j - c(x, y_j))_+ = epsilon, where (y_j, w_j) runs over the
    opposite measure and v its potential values.  This is the canonical
    extension of a solved potential beyond its original support: it is exactly
    the value an atom at x with infinitesimal mass would receive.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    C = cost_matrix_points(X, opposite.points)
    vals = np.ascontiguousarray(np.asarray(opposite_values, dtype=np.float64))
    return _kernels.row_update_cold(C, vals, opposite.weights, float(epsilon))


# ---------------------------------------------------------------------------
# brute-force oracle for tiny instances
# ---------------------------------------------------------------------------

_MASK_CACHE: dict = {}


def _covering_masks(n: int, m: int) -> np.ndarray:
    """All support bitmasks that touch every row and every column."""
    key = (n, m)
    if key in _MASK_CACHE:
        return _MASK_CACHE[key]
    cells = n * m
    masks = np.arange(1, 1 << cells, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(cells)) & 1).astype(bool)
    grid = bits.reshape(-1, n, m)
    ok = grid.any(axis=2).all(axis=1) & grid.any(axis=1).all(axis=1)
    _MASK_CACHE[key] = masks[ok]
    return _MASK_CACHE[key]


def _components(S: np.ndarray) -> np.ndarray:
    """Connected components of the bipartite support graph.

    Returns labels over the n+m nodes (rows then columns).
    """
    n, m = S.shape
    parent = list(range(n + m))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(m):
            if S[i, j]:
                ra, rb = find(i), find(n + j)
                if ra != rb:
                    parent[ra] = rb
    return np.array([find(k) for k in range(n + m)])


def _difference_offsets(roots, xi_off, comp_i, comp_j):
    """Feasible component shifts for the off-support sign constraints.

    Constraints: a[comp_i[k]] - a[comp_j[k]] <= -xi_off[k].  Solved as a
    shortest-path (Bellman-Ford) system of difference constraints; returns the
    shift per component label, or None if infeasible (negative cycle).
    """
    index = {r: t for t, r in enumerate(roots)}
    k = len(roots)
    dist = [0.0] * k
    edges = [
        (index[cj], index[ci], -x + 1e-12)
        for ci, cj, x in zip(comp_i, comp_j, xi_off)
    ]
    for it in range(k + 1):
        changed = False
        for u, v, w in edges:
            if dist[u] + w < dist[v]:
                dist[v] = dist[u] + w
                changed = True
        if not changed:
            return np.array(dist)
    return None


def active_set_oracle(problem: QotProblem) -> PotentialPair:
    """Ground-truth potentials by enumerating candidate supports (<= 12 cells).

    For each support candidate S covering all rows and columns, solve the
    linear first-order system restricted to S (with the mean-balance row),
    then check the sign conditions: xi >= 0 on S and xi <= 0 off S.  When S's
    bipartite graph is disconnected the system determines potentials only up
    to per-component shifts; feasible shifts for the off-S sign constraints
    are found as a system of difference constraints.  The optimal coupling
    density is unique, so the first accepted candidate gives the right
    (xi)_+ even if several gauge representatives pass.
    """
    n, m = problem.n, problem.m
    if n * m > ORACLE_CELL_CAP:
        raise TooLargeError(f"{n}x{m} = {n * m} cells exceeds oracle cap {ORACLE_CELL_CAP}")
    C, p, q, eps = problem.cost, problem.p, problem.q, problem.epsilon
    cells = n * m
    bit_grid = np.arange(cells).reshape(n, m)
    scale = max(1.0, eps, float(np.max(np.abs(C))))
    pos = n + m

    for mask in _covering_masks(n, m):
        S = ((int(mask) >> bit_grid) & 1).astype(bool)
        Sq = S * q[None, :]
        Sp = S * p[:, None]
        M = np.zeros((pos + 1, pos))
        M[:n, :n] = np.diag(Sq.sum(axis=1))
        M[:n, n:] = Sq
        M[n:pos, :n] = Sp.T
        M[n:pos, n:] = np.diag(Sp.sum(axis=0))
        M[pos, :n] = p
        M[pos, n:] = -q
        SC = S * C
        b = np.empty(pos + 1)
        b[:n] = eps + SC @ q
        b[n:pos] = eps + p @ SC
        b[pos] = 0.0
        # cheap filter: ridge-regularized normal equations
        G = M.T @ M
        G[np.diag_indices_from(G)] += 1e-12 * scale
        try:
            u = np.linalg.solve(G, M.T @ b)
        except np.linalg.LinAlgError:
            continue
        if np.max(np.abs(M[:pos] @ u - b[:pos])) > 1e-6 * scale:
            continue
        # survivor: strict least-squares solve and re-check
        u, *_ = np.linalg.lstsq(M, b, rcond=None)
        if np.max(np.abs(M[:pos] @ u - b[:pos])) > 1e-9 * scale:
            continue
        f, g = u[:n].copy(), u[n:].copy()
        labels = _components(S)
        roots = sorted(set(labels.tolist()))
        if len(roots) > 1:
            off = ~S
            oi, oj = np.nonzero(off)
            xi_off = f[oi] + g[oj] - C[oi, oj]
            cross = labels[oi] != labels[n + oj]
            if np.any(cross):
                shifts = _difference_offsets(
                    roots,
                    xi_off[cross],
                    labels[oi[cross]],
                    labels[n + oj[cross]],
                )
                if shifts is None:
                    continue
                lookup = {r: s for r, s in zip(roots, shifts)}
                f = f + np.array([lookup[labels[i]] for i in range(n)])
                g = g - np.array([lookup[labels[n + j]] for j in range(m)])
        xi_mat = f[:, None] + g[None, :] - C
        if np.min(xi_mat[S]) < -1e-9 * scale:
            continue
        if (~S).any() and np.max(xi_mat[~S]) > 1e-9 * scale:
            continue
        return gauge_fix(PotentialPair(f, g), problem.P, problem.Q)
    raise NoConsistentActiveSetError(
        f"no active set of the {n}x{m} instance passes the sign checks"
    )
