"""Distributional-limit machinery: the section-averaging operator, its
quotient inverse, asymptotic covariances, and plug-in confidence intervals.

The operator pair

    (A1 g)(x_i) = sum_{j in S_i} q_j g_j / Q(S_i),
    (A2 f)(y_j) = sum_{i in T_j} p_i f_i / P(T_j),

with S_i = {j : xi_ij >= 0} and T_j = {i : xi_ij >= 0}, enters the limit laws
through L = I + A, A = [[0, A1], [A2, 0]].  L kills the constant-shift
direction e = (1_n, -1_m) — the dual gauge — so it is inverted on the quotient
by that direction.  We realize the quotient inverse with a bordered system

    [[I + A, e], [b^T, 0]] [u; c] = [v; 0],       b = (p, -q),

whose unique solution has mean-balanced u and (I + A) u = v modulo the gauge
direction.  The explicit u-block of the bordered inverse is what ``invert_L``
returns; applied to any representative v it produces the balanced solution of
the quotient equation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve
from scipy.special import ndtri

from . import _kernels
from .errors import (
    EmptySectionError,
    EmptySupportError,
    FactorizationFailureError,
    InputError,
    InvalidLevelError,
    SingularOnQuotientError,
)
from .measures import rng_stream
from .solver import QotProblem, PotentialPair, slack_matrix

__all__ = [
    "LimitLawModel",
    "ConfidenceInterval",
    "build_operator",
    "invert_L",
    "build_limit_model",
    "gaussian_covariances",
    "covariance_form_gap",
    "potentials_limit_cov",
    "cost_variance_plugin",
    "cost_ci",
    "coupling_functional_variance",
    "sample_limit_gaussian",
    "model_summary",
]

_COND_LIMIT = 1e12
_RESIDUAL_REL = 1e-9


# ---------------------------------------------------------------------------
# operator construction
# ---------------------------------------------------------------------------


def _support_and_masses(problem: QotProblem, pot: PotentialPair):
    xi_mat = slack_matrix(problem, pot)
    support = xi_mat >= 0.0
    mass_x = support @ problem.q  # Q(S_i) per x-atom
    mass_y = problem.p @ support  # P(T_j) per y-atom
    if np.any(mass_x <= 0.0) or np.any(mass_y <= 0.0):
        raise EmptySectionError("an atom has an empty support section")
    return xi_mat, support, mass_x, mass_y


def _normalize_rows_exact(rows: np.ndarray) -> np.ndarray:
    """Scale each row to unit sum, then compensate until the float sum is 1.0.

    Plain division leaves row sums off by an ulp now and then; conditional-
    probability rows should sum to one *exactly*, so the leftover defect is
    folded into the largest entry (a perturbation below 1e-15 relative).
    """
    out = rows.copy()
    for r in out:
        s = r.sum()
        if s == 0.0:
            raise EmptySectionError("cannot normalize an empty row")
        r /= s
        for _ in range(8):
            defect = r.sum() - 1.0
            if defect == 0.0:
                break
            r[int(np.argmax(r))] -= defect
    return out


def build_operator(pop_problem: QotProblem, pop_pot: PotentialPair) -> np.ndarray:
    """The (n+m) x (n+m) block operator A = [[0, A1], [A2, 0]].

    A1 and A2 average over support sections, so each of their rows is a
    conditional-probability vector: nonnegative with sum exactly 1.
    """
    _, support, _, _ = _support_and_masses(pop_problem, pop_pot)
    n, m = pop_problem.n, pop_problem.m
    A1 = _normalize_rows_exact(support * pop_problem.q[None, :])
    A2 = _normalize_rows_exact(support.T * pop_problem.p[None, :])
    A = np.zeros((n + m, n + m))
    A[:n, n:] = A1
    A[n:, :n] = A2
    return A


def _bordered(A_matrix: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    N = A_matrix.shape[0]
    n = p.shape[0]
    if A_matrix.shape != (N, N) or n + q.shape[0] != N:
        raise InputError("operator/weight shapes disagree")
    B = np.zeros((N + 1, N + 1))
    B[:N, :N] = A_matrix
    B[np.arange(N), np.arange(N)] += 1.0
    B[:n, N] = 1.0
    B[n:N, N] = -1.0
    B[N, :n] = p
    B[N, n:N] = -q
    return B


def _gauge_component_removed(r: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Shift a stacked (f, g) vector to its mean-balanced representative."""
    n = p.shape[0]
    a = 0.5 * (float(q @ r[n:]) - float(p @ r[:n]))
    out = r.copy()
    out[:n] += a
    out[n:] -= a
    return out


def _quotient_inverse(A_matrix: np.ndarray, p: np.ndarray, q: np.ndarray):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    B = _bordered(np.asarray(A_matrix, dtype=np.float64), p, q)
    N = A_matrix.shape[0]
    try:
        with warnings.catch_warnings():
            # exact singularity surfaces as a warning plus zero pivots; the
            # condition-number check below turns it into our own error
            warnings.simplefilter("ignore", LinAlgWarning)
            lu = lu_factor(B)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy raises ValueError
        raise SingularOnQuotientError(str(exc)) from exc
    if not np.all(np.isfinite(lu[0])):
        raise SingularOnQuotientError("LU factorization produced non-finite entries")
    cond = float(np.linalg.cond(B, 2))
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularOnQuotientError(f"condition number {cond:.3e} exceeds {_COND_LIMIT:.0e}")
    rhs = np.zeros((N + 1, N))
    rhs[:N, :] = np.eye(N)
    U = lu_solve(lu, rhs)[:N, :]

    probe_rng = rng_stream(0x1717, N)
    probes = [probe_rng.standard_normal(N) for _ in range(3)]
    probes.append(np.ones(N))
    IA = B[:N, :N]
    for v in probes:
        u = U @ v
        residual = _gauge_component_removed(IA @ u - v, p, q)
        bound = _RESIDUAL_REL * float(np.max(np.abs(v)))
        if float(np.max(np.abs(residual))) > bound:
            raise SingularOnQuotientError(
                "quotient inverse failed its residual check "
                f"({float(np.max(np.abs(residual))):.3e} > {bound:.3e})"
            )
    return U, cond


def invert_L(A_matrix: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Explicit inverse of L = I + A on the quotient by the gauge direction.

    Returns the (n+m) x (n+m) matrix U mapping a right-hand side v to the
    unique mean-balanced u with (I + A) u = v up to a multiple of
    e = (1, -1) (the bordered multiplier absorbs exactly that multiple; the
    residual vanishes once both sides are reduced to balanced representatives).
    U annihilates e itself, so it is well defined on equivalence classes.

    The solve is verified on probe right-hand sides to a reduced residual of
    1e-9 * ||v||_inf; failure, a singular factorization, or a condition number
    beyond 1e12 raises SingularOnQuotientError.
    """
    U, _ = _quotient_inverse(A_matrix, p, q)
    return U


# ---------------------------------------------------------------------------
# covariances
# ---------------------------------------------------------------------------


def gaussian_covariances(pop_problem: QotProblem, pop_pot: PotentialPair):
    """Covariances of the hinge integrals driving the limit laws.

    cov_GQ[i, i'] = sum_j q_j (xi_ij)_+ (xi_i'j)_+  -  (row sums product), an
    n x n matrix (one row of hinge values per x-atom integrated against Q);
    cov_GP is the m x m mirror under P.  At an optimizer every row hinge sum
    equals epsilon, but the centering uses the computed sums so the formula
    stays exact off-optimum too.
    """
    H = np.maximum(slack_matrix(pop_problem, pop_pot), 0.0)
    p, q = pop_problem.p, pop_problem.q
    row_h = H @ q
    col_h = p @ H
    cov_GQ = (H * q[None, :]) @ H.T - np.outer(row_h, row_h)
    cov_GP = (H.T * p[None, :]) @ H - np.outer(col_h, col_h)
    cov_GQ = 0.5 * (cov_GQ + cov_GQ.T)
    cov_GP = 0.5 * (cov_GP + cov_GP.T)
    return cov_GQ, cov_GP


def covariance_form_gap(pop_problem: QotProblem, pop_pot: PotentialPair):
    """Frobenius gap between hinge-form covariances and their raw-slack
    variants (xi in place of (xi)_+).

    The two displays coincide when every slack is active; on sparse supports
    they differ, and the hinge form is the one the limit laws use.  Reported
    as a diagnostic, never asserted.
    """
    xi_mat = slack_matrix(pop_problem, pop_pot)
    H = np.maximum(xi_mat, 0.0)
    p, q = pop_problem.p, pop_problem.q

    def _cov_pair(M):
        r = M @ q
        c = p @ M
        cq = (M * q[None, :]) @ M.T - np.outer(r, r)
        cp = (M.T * p[None, :]) @ M - np.outer(c, c)
        return cq, cp

    hq, hp = _cov_pair(H)
    rq, rp = _cov_pair(xi_mat)
    return float(np.linalg.norm(hq - rq)), float(np.linalg.norm(hp - rp))


# ---------------------------------------------------------------------------
# the assembled population model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LimitLawModel:
    """Everything the limit laws need about one solved population instance."""

    pop_problem: QotProblem
    pop_pot: PotentialPair
    A_matrix: np.ndarray
    L_inverse: np.ndarray
    cov_GQ: np.ndarray
    cov_GP: np.ndarray
    cost_sigma2: float
    hinge: np.ndarray  # (xi)_+ on the population grid
    support: np.ndarray  # boolean, xi >= 0
    mass_x: np.ndarray  # Q(S_i) per x-atom
    mass_y: np.ndarray  # P(T_j) per y-atom
    condition_number: float


def build_limit_model(pop_problem: QotProblem, pop_pot: PotentialPair) -> LimitLawModel:
    """Assemble the population model: operator, quotient inverse, covariances."""
    xi_mat, support, mass_x, mass_y = _support_and_masses(pop_problem, pop_pot)
    A = build_operator(pop_problem, pop_pot)
    U, cond = _quotient_inverse(A, pop_problem.p, pop_problem.q)
    cov_GQ, cov_GP = gaussian_covariances(pop_problem, pop_pot)
    sigma2 = cost_variance_plugin(pop_problem, pop_pot)
    return LimitLawModel(
        pop_problem=pop_problem,
        pop_pot=pop_pot,
        A_matrix=A,
        L_inverse=U,
        cov_GQ=cov_GQ,
        cov_GP=cov_GP,
        cost_sigma2=sigma2,
        hinge=np.maximum(xi_mat, 0.0),
        support=support,
        mass_x=mass_x,
        mass_y=mass_y,
        condition_number=cond,
    )


def potentials_limit_cov(model: LimitLawModel, eval_pairs) -> np.ndarray:
    """Limit covariance of sqrt(n) (f_n(x_i) + g_n(y_j) - f(x_i) - g(y_j))
    across the given (i, j) pairs.

    The potential fluctuation solves the linearized optimality system, i.e.
    equals L^+ applied to the section-averaged hinge fluctuations; those have
    covariance blockdiag(D cov_GQ D, E cov_GP E) with D = diag(1/Q(S_i)),
    E = diag(1/P(T_j)).  Conjugating by the pair-evaluation rows of L^+ gives
    the k x k matrix returned here.
    """
    n = model.pop_problem.n
    pairs = [(int(i), int(j)) for i, j in eval_pairs]
    for i, j in pairs:
        if not (0 <= i < n and 0 <= j < model.pop_problem.m):
            raise InputError(f"eval pair {(i, j)} out of range")
    R = np.stack([model.L_inverse[i, :] + model.L_inverse[n + j, :] for i, j in pairs])
    Rf = R[:, :n] / model.mass_x[None, :]
    Rg = R[:, n:] / model.mass_y[None, :]
    cov = Rf @ model.cov_GQ @ Rf.T + Rg @ model.cov_GP @ Rg.T
    return 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# scalar limits: cost and coupling functionals
# ---------------------------------------------------------------------------


def cost_variance_plugin(problem: QotProblem, pot: PotentialPair) -> float:
    """Plug-in variance of the cost functional's CLT.

    The influence kernel is v(i, j) = f_i + g_j - (1/(2 eps)) *
    (sum_i' p_i' (xi_i'j)_+^2 + sum_j' q_j' (xi_ij')_+^2), and sigma^2 is its
    variance under P (x) Q.  v separates as alpha_i + beta_j, and under a
    product measure the cross-covariance of the two parts vanishes, so the
    pair-enumeration variance reduces to Var_P(alpha) + Var_Q(beta) exactly.
    """
    row_sq, col_sq = _kernels.hinge_sq_stats(
        problem.cost, pot.f, pot.g, problem.p, problem.q
    )
    inv2e = 0.5 / problem.epsilon
    alpha = pot.f - inv2e * row_sq
    beta = pot.g - inv2e * col_sq
    var_a = float(problem.p @ (alpha * alpha)) - float(problem.p @ alpha) ** 2
    var_b = float(problem.q @ (beta * beta)) - float(problem.q @ beta) ** 2
    return var_a + var_b


@dataclass(frozen=True)
class ConfidenceInterval:
    center: float
    half_width: float
    level: float
    n: int

    @property
    def lower(self) -> float:
        return self.center - self.half_width

    @property
    def upper(self) -> float:
        return self.center + self.half_width

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def cost_ci(cost_hat: float, sigma2_hat: float, n: int, level: float) -> ConfidenceInterval:
    """Two-sided normal interval cost_hat +- z * sqrt(sigma2_hat / n)."""
    if not (0.0 < level < 1.0):
        raise InvalidLevelError(f"level must lie strictly in (0, 1), got {level!r}")
    if n <= 0:
        raise InputError(f"sample size must be positive, got {n!r}")
    if sigma2_hat < 0.0:
        raise InputError(f"variance estimate must be nonnegative, got {sigma2_hat!r}")
    z = float(ndtri(0.5 * (1.0 + level)))
    half = z * float(np.sqrt(sigma2_hat / n))
    return ConfidenceInterval(float(cost_hat), half, float(level), int(n))


def _eta_matrix(model: LimitLawModel, eta) -> np.ndarray:
    X = model.pop_problem.P.points
    Y = model.pop_problem.Q.points
    if isinstance(eta, np.ndarray):
        E = np.asarray(eta, dtype=np.float64)
    elif callable(eta):
        E = np.asarray(eta(X, Y), dtype=np.float64)
    else:
        raise InputError("eta must be an (n, m) array or a callable eta(X, Y)")
    if E.shape != (model.pop_problem.n, model.pop_problem.m):
        raise InputError(
            f"eta evaluated to shape {E.shape}, expected {(model.pop_problem.n, model.pop_problem.m)}"
        )
    return E


def coupling_functional_variance(model: LimitLawModel, eta) -> float:
    """Limit variance sigma^2(eta) for the linear coupling statistic
    int eta d(pi_n - pi).

    Follows the influence-function recipe: center eta over the closed support
    (eta_bar = eta - int_{xi >= 0} eta dP(x)Q); for a sample pair (a, b) the
    first-order response of the potentials is L^+ applied to the kernel pair
    ((xi(., y_b))_+/Q(S_.), (xi(x_a, .))_+/P(T_.)); integrating that response
    against eta_bar (xi)_+ and subtracting the direct term eta_bar_ab
    (xi_ab)_+ yields T(a, b), whose conditional expectations V_X, V_Y enter
    sigma^2(eta) = Var_{P x Q}(V_X + V_Y).

    Because the kernel pair splits into a b-part and an a-part, the integral
    against L^+ collapses to a single transposed solve: with
    w = (p_i sum_j q_j eta_bar (xi)_+, q_j sum_i p_i eta_bar (xi)_+) and
    z = (L^+)^T w, T(a, b) = z_g . k(a) + z_f . k(b) - eta_bar_ab (xi_ab)_+.
    Everything is then exact weighted summation; no per-pair solves occur.
    Var(V_X(X) + V_Y(Y)) splits as Var_P(V_X) + Var_Q(V_Y) by independence.
    """
    E = _eta_matrix(model, eta)
    H = model.hinge
    if float(H.max(initial=0.0)) == 0.0:
        raise EmptySupportError("the population coupling has empty support")
    p, q = model.pop_problem.p, model.pop_problem.q
    n = model.pop_problem.n

    c0 = float(p @ (model.support * E) @ q)
    Ebar_H = (E - c0) * H  # eta_bar * hinge, used everywhere below

    row_int = Ebar_H @ q  # per x-atom: sum_b q_b eta_bar_ab (xi_ab)_+
    col_int = p @ Ebar_H  # per y-atom
    w = np.concatenate([p * row_int, q * col_int])
    z = model.L_inverse.T @ w
    s_X = H @ (z[n:] / model.mass_y)
    s_Y = (z[:n] / model.mass_x) @ H

    V_X = s_X + float(q @ s_Y) - row_int
    V_Y = s_Y + float(p @ s_X) - col_int
    var_x = float(p @ (V_X * V_X)) - float(p @ V_X) ** 2
    var_y = float(q @ (V_Y * V_Y)) - float(q @ V_Y) ** 2
    return var_x + var_y


def sample_limit_gaussian(model: LimitLawModel, seed, count: int, eval_pairs) -> np.ndarray:
    """Deterministic draws from the potentials' limit Gaussian at eval pairs.

    The covariance matrix is PSD up to roundoff; eigenvalues in [-1e-8, 0) are
    clamped to zero, anything more negative raises FactorizationFailureError.
    Returns an array of shape (count, len(eval_pairs)).
    """
    if count <= 0:
        raise InputError(f"count must be positive, got {count!r}")
    cov = potentials_limit_cov(model, eval_pairs)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if float(eigvals.min(initial=0.0)) < -1e-8:
        raise FactorizationFailureError(
            f"covariance eigenvalue {float(eigvals.min()):.3e} below the repair band"
        )
    eigvals = np.maximum(eigvals, 0.0)
    root = eigvecs * np.sqrt(eigvals)[None, :]
    rng = rng_stream(seed, 0x11D)
    return rng.standard_normal((int(count), cov.shape[0])) @ root.T


def model_summary(model: LimitLawModel) -> dict:
    """JSON-ready scalar summary of a population model."""
    return {
        "n": model.pop_problem.n,
        "m": model.pop_problem.m,
        "epsilon": model.pop_problem.epsilon,
        "condition_number": model.condition_number,
        "cost_sigma2": model.cost_sigma2,
        "min_section_mass_x": float(model.mass_x.min()),
        "min_section_mass_y": float(model.mass_y.min()),
        "support_count": int(model.support.sum()),
        "fill_ratio": float(model.support.sum() / model.support.size),
    }
