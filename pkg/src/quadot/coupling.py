"""Primal objects: the coupling induced by dual potentials.

The optimal coupling has density (xi)_+ / eps against the product measure
P (x) Q, so it is sparse: only index pairs with positive slack carry mass.
``SparseCoupling`` stores exactly those entries.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleCouplingError
from .measures import DiscreteMeasure
from .solver import (
    DEFAULT_REL_TOL,
    PotentialPair,
    QotProblem,
    dual_objective,
    slack_matrix,
)


@dataclass(frozen=True)
class SparseCoupling:
    """Optimal plan as explicit positive entries.

    ``i_idx[k], j_idx[k]`` index P's and Q's atoms; ``mass[k] = p_i q_j *
    density[k]`` and ``density[k] = (xi_ij)_+ / eps > 0``.  Entries are sorted
    by (i, j).  ``x_points``/``y_points`` carry the supports so marginals and
    CSV export need no extra context.
    """

    i_idx: np.ndarray
    j_idx: np.ndarray
    mass: np.ndarray
    density: np.ndarray
    shape: tuple
    x_points: np.ndarray
    y_points: np.ndarray

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())

    @property
    def nonzero_count(self) -> int:
        return int(self.mass.shape[0])

    def entries(self):
        """Iterate (i, j, mass, density) tuples."""
        for k in range(self.nonzero_count):
            yield (
                int(self.i_idx[k]),
                int(self.j_idx[k]),
                float(self.mass[k]),
                float(self.density[k]),
            )

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.i_idx, self.j_idx] = self.mass
        return out


def primal_from_dual(problem: QotProblem, pot: PotentialPair) -> SparseCoupling:
    """Coupling with density (xi)_+ / eps; entries exactly where xi > 0."""
    xi_mat = slack_matrix(problem, pot)
    ii, jj = np.nonzero(xi_mat > 0.0)
    density = xi_mat[ii, jj] / problem.epsilon
    mass = problem.p[ii] * problem.q[jj] * density
    return SparseCoupling(
        i_idx=ii,
        j_idx=jj,
        mass=mass,
        density=density,
        shape=(problem.n, problem.m),
        x_points=problem.P.points,
        y_points=problem.Q.points,
    )


def primal_objective(problem: QotProblem, coupling: SparseCoupling) -> float:
    """Transport cost plus the quadratic penalty:
    sum mass*c + (eps/2) * sum p_i q_j density^2."""
    c_vals = problem.cost[coupling.i_idx, coupling.j_idx]
    transport = float(coupling.mass @ c_vals)
    # p_i q_j density^2 == mass * density on stored entries
    penalty = 0.5 * problem.epsilon * float(coupling.mass @ coupling.density)
    return transport + penalty


def marginals(coupling: SparseCoupling):
    """Row and column mass sums as measures on the original supports.

    The weight sums equal total_mass, which matches 1 only up to the solve's
    feasibility tolerance, so these measures skip the strict normalization
    check.
    """
    n, m = coupling.shape
    row = np.zeros(n)
    col = np.zeros(m)
    np.add.at(row, coupling.i_idx, coupling.mass)
    np.add.at(col, coupling.j_idx, coupling.mass)
    return (
        DiscreteMeasure._unchecked(coupling.x_points, row),
        DiscreteMeasure._unchecked(coupling.y_points, col),
    )


def marginal_defects(problem: QotProblem, coupling: SparseCoupling):
    """Sup-norm deviations of the coupling's marginals from (p, q)."""
    left, right = marginals(coupling)
    return (
        float(np.max(np.abs(left.weights - problem.p))),
        float(np.max(np.abs(right.weights - problem.q))),
    )


def duality_gap(
    problem: QotProblem, pot: PotentialPair, tol_feas: float = DEFAULT_REL_TOL
) -> float:
    """primal_objective - dual_objective at the coupling induced by pot.

    Only meaningful when that coupling is (near-)feasible; raises
    InfeasibleCouplingError when a marginal defect exceeds 10 * tol_feas.
    At optimizers the gap is 0 (strong duality); it is >= 0 up to rounding
    whenever the coupling is feasible.
    """
    coupling = primal_from_dual(problem, pot)
    dl, dr = marginal_defects(problem, coupling)
    if max(dl, dr) > 10.0 * tol_feas:
        raise InfeasibleCouplingError(
            f"marginal defects ({dl:.3e}, {dr:.3e}) exceed 10*tol_feas = {10 * tol_feas:.3e}"
        )
    return primal_objective(problem, coupling) - dual_objective(problem, pot)


def support_stats(coupling: SparseCoupling):
    """(nonzero_count, fill_ratio, max_density); fill is count / (n*m)."""
    count = coupling.nonzero_count
    n, m = coupling.shape
    fill = count / float(n * m)
    max_density = float(coupling.density.max()) if count else 0.0
    return count, fill, max_density


def write_coupling_csv(path, coupling: SparseCoupling) -> None:
    """Entries sorted by (i, j): header ``i,j,x...,y...,mass,density``."""
    dx = coupling.x_points.shape[1]
    dy = coupling.y_points.shape[1]
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("# format_version: 1\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["i", "j"]
            + [f"x{k + 1}" for k in range(dx)]
            + [f"y{k + 1}" for k in range(dy)]
            + ["mass", "density"]
        )
        for i, j, mass, density in coupling.entries():
            writer.writerow(
                [i, j]
                + [repr(float(c)) for c in coupling.x_points[i]]
                + [repr(float(c)) for c in coupling.y_points[j]]
                + [repr(mass), repr(density)]
            )
