"""Section geometry of the transformed (convex) potentials.

In convex form the slack reads ``<x, y> - phi(x) - psi(y)``, so the section
``S_x(beta)`` — the y-atoms within ``beta`` of touching the subdifferential at
x — is ``{y : phi(x) + psi(y) <= <x, y> + beta}``.  Everything here is exact
summation over atoms; there is no sampling and no iteration.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import EmptySectionError, InputError
from .measures import DiscreteMeasure
from .solver import QotProblem, PotentialPair, extend_potential, slack_matrix

__all__ = [
    "SectionReport",
    "section",
    "min_section_mass",
    "barycenter_gradient",
    "lipschitz_beta_diagnostic",
    "gradient_lipschitz_diagnostic",
    "vc_sup_deviation",
    "product_thickening",
    "write_diagnostics_csv",
]


def _slack_rows(problem: QotProblem, pot_convex) -> np.ndarray:
    """<x_i, y_j> - phi_i - psi_j for all pairs (equals the dual slack xi)."""
    phi, psi = pot_convex
    phi = np.asarray(phi, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    if phi.shape[0] != problem.n or psi.shape[0] != problem.m:
        raise InputError(
            f"pot_convex lengths ({phi.shape[0]}, {psi.shape[0]}) do not match "
            f"the instance ({problem.n}, {problem.m})"
        )
    inner = problem.P.points @ problem.Q.points.T
    return inner - phi[:, None] - psi[None, :]


@dataclass(frozen=True)
class SectionReport:
    """One section S_x(beta): which Q-atoms belong, their mass, their mean."""

    x_index: int
    beta: float
    members: np.ndarray  # sorted Q-atom indices
    mass: float
    barycenter: np.ndarray | None  # None exactly when mass == 0


def section(problem: QotProblem, pot_convex, x_index: int, beta: float) -> SectionReport:
    """Membership, mass and barycenter of S_{x_i}(beta).

    Membership is the inclusive inequality phi(x) + psi(y_j) <= <x, y_j> + beta,
    so beta = 0 recovers the support sections of the optimal coupling.
    """
    i = int(x_index)
    if not (0 <= i < problem.n):
        raise InputError(f"x_index {i} out of range [0, {problem.n})")
    s = _slack_rows(problem, pot_convex)[i]
    members = np.flatnonzero(s >= -beta)
    mass = float(problem.q[members].sum()) if members.size else 0.0
    if mass > 0.0:
        bary = (problem.q[members] @ problem.Q.points[members]) / mass
    else:
        bary = None
    return SectionReport(i, float(beta), members, mass, bary)


def min_section_mass(problem: QotProblem, pot_convex) -> float:
    """min_i Q(S_{x_i}(0)); positive at any solved instance."""
    s = _slack_rows(problem, pot_convex)
    masses = (s >= 0.0) @ problem.q
    return float(masses.min())


def barycenter_gradient(problem: QotProblem, pot_convex, x_index: int) -> np.ndarray:
    """The gradient of phi at x_i: the Q-barycenter of the support section.

    Raises EmptySectionError when S_{x_i}(0) has zero mass (phi is not
    differentiable there and the instance is not solved).
    """
    rep = section(problem, pot_convex, x_index, 0.0)
    if rep.barycenter is None:
        raise EmptySectionError(f"section at x-atom {x_index} has zero mass")
    return rep.barycenter


def _probe_values(probe, points: np.ndarray) -> np.ndarray:
    """Evaluate a probe function (vectorized or per-point) on atom locations."""
    if isinstance(probe, np.ndarray):
        vals = np.asarray(probe, dtype=np.float64)
    else:
        try:
            vals = np.asarray(probe(points), dtype=np.float64)
        except (TypeError, ValueError):
            vals = np.array([float(probe(pt)) for pt in points])
    vals = vals.reshape(-1)
    if vals.shape[0] != points.shape[0]:
        raise InputError("probe evaluation length does not match atom count")
    return vals


def _default_probes(points: np.ndarray) -> list:
    """Bounded probes: the constant 1 and each coordinate rescaled into [-1, 1]."""
    probes = [np.ones(points.shape[0])]
    for k in range(points.shape[1]):
        col = points[:, k]
        lo, hi = float(col.min()), float(col.max())
        if hi > lo:
            probes.append(2.0 * (col - lo) / (hi - lo) - 1.0)
    return probes


def lipschitz_beta_diagnostic(
    problem: QotProblem, pot_convex, beta_grid, probe_functions=None
) -> float:
    """Largest observed slope of beta -> int_{S_x(beta)} g dQ across the grid.

    For every x-atom, every adjacent pair in ``beta_grid`` and every probe g
    (sup-norm at most 1), computes |I(beta') - I(beta)| / |beta' - beta| with
    I(b) = sum_{j in S_x(b)} q_j g(y_j), and returns the maximum.  A finite,
    stable value as the grid refines is evidence of Lipschitz dependence of
    section integrals on the thickening parameter.
    """
    betas = np.sort(np.asarray(beta_grid, dtype=np.float64).reshape(-1))
    if betas.size < 2:
        raise InputError("beta_grid needs at least two values")
    if probe_functions is None:
        probes = _default_probes(problem.Q.points)
    else:
        probes = list(probe_functions)
    G = np.column_stack(
        [_probe_values(g, problem.Q.points) for g in probes]
    )  # (m, k)
    weighted = problem.q[:, None] * G
    s = _slack_rows(problem, pot_convex)
    gaps = np.diff(betas)
    if np.any(gaps <= 0.0):
        raise InputError("beta_grid values must be distinct")
    worst = 0.0
    for i in range(problem.n):
        # membership for every beta at once: (B, m) mask, then integrals (B, k)
        mask = s[i][None, :] >= -betas[:, None]
        integrals = mask @ weighted
        ratios = np.abs(np.diff(integrals, axis=0)) / gaps[:, None]
        row_worst = float(ratios.max()) if ratios.size else 0.0
        if row_worst > worst:
            worst = row_worst
    return worst


def gradient_lipschitz_diagnostic(problem: QotProblem, pot_convex):
    """Difference-quotient bounds for grad(phi) and for section masses.

    Scans consecutive x-atoms (in stored order, skipping coincident points) and
    returns the pair of maxima

        max ||grad phi(x) - grad phi(x')|| / ||x - x'||,
        max |Q(S_x) - Q(S_x')| / ||x - x'||.

    On a lexicographic grid consecutive atoms are geometric neighbours, so this
    probes the local Lipschitz behaviour of both the map and its section masses.
    """
    s = _slack_rows(problem, pot_convex)
    member = s >= 0.0
    masses = member @ problem.q
    if np.any(masses <= 0.0):
        raise EmptySectionError("an x-atom has an empty support section")
    barys = (member * problem.q[None, :]) @ problem.Q.points / masses[:, None]
    X = problem.P.points
    dx = np.linalg.norm(np.diff(X, axis=0), axis=1)
    keep = dx > 0.0
    if not np.any(keep):
        return 0.0, 0.0
    grad_jumps = np.linalg.norm(np.diff(barys, axis=0), axis=1)[keep] / dx[keep]
    mass_jumps = np.abs(np.diff(masses))[keep] / dx[keep]
    return float(grad_jumps.max()), float(mass_jumps.max())


def vc_sup_deviation(problem_pop: QotProblem, pot_convex_pop, Q_n: DiscreteMeasure, g) -> float:
    """sup over x-atoms and thickenings delta of |int_{S_x(delta)} g d(Q - Q_n)|.

    Exact: as delta grows, atoms of Q and Q_n enter S_x(delta) at computable
    thresholds, so the supremum over a continuum of delta reduces to a sweep
    over merged breakpoints (ties entering together).  Q_n's atoms get their
    psi values by the canonical one-row extension of the population potential,
    so no empirical solve is involved.
    """
    if Q_n.dim != problem_pop.Q.dim:
        raise InputError("Q_n dimension does not match the population")
    phi, psi = pot_convex_pop
    phi = np.asarray(phi, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    X = problem_pop.P.points
    xn2 = np.einsum("ij,ij->i", X, X)
    f_pop = 0.5 * xn2 - phi

    Y_emp = Q_n.points
    g_ext = extend_potential(Y_emp, problem_pop.P, f_pop, problem_pop.epsilon)
    psi_ext = 0.5 * np.einsum("ij,ij->i", Y_emp, Y_emp) - g_ext

    xi_pop = X @ problem_pop.Q.points.T - phi[:, None] - psi[None, :]
    xi_emp = X @ Y_emp.T - phi[:, None] - psi_ext[None, :]

    inc_pop = problem_pop.q * _probe_values(g, problem_pop.Q.points)
    inc_emp = -Q_n.weights * _probe_values(g, Y_emp)
    return float(
        _kernels.vc_sweep_max(
            np.ascontiguousarray(xi_pop),
            np.ascontiguousarray(inc_pop),
            np.ascontiguousarray(xi_emp),
            np.ascontiguousarray(inc_emp),
        )
    )


def product_thickening(problem: QotProblem, pot: PotentialPair, beta: float) -> set:
    """Index pairs within beta of the active set: {(i, j) : xi_ij >= -beta}.

    beta = 0 gives the closed active set itself; the family is nested in beta
    and contains the support of the optimal coupling for every beta >= 0.
    """
    s = slack_matrix(problem, pot)
    ii, jj = np.nonzero(s >= -beta)
    return {(int(a), int(b)) for a, b in zip(ii, jj)}


def write_diagnostics_csv(path, rows) -> None:
    """Write (diagnostic, param, value) rows with a format_version comment."""
    with open(path, "w", newline="") as fh:
        fh.write("# format_version: 1\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["diagnostic", "param", "value"])
        for name, param, value in rows:
            writer.writerow([name, param, repr(float(value))])
