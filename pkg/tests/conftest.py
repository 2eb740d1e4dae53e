"""Shared fixtures: tiny instances with hand-derived solutions."""

import numpy as np
import pytest

import quadot


@pytest.fixture(scope="session", autouse=True)
def _compiled_kernels():
    # JIT-compile once up front so individual tests don't pay for it.
    quadot.warmup()


@pytest.fixture
def two_point_instance():
    """P = Q = uniform on {0, 1} in 1-d, eps = 0.1.

    By symmetry f = g = (t, t) with 0.5*(t + t - 0) + 0.5*(t + t - 0.5)_+ = 0.1
    solved by t = 0.1 (the off-diagonal slack 2t - 0.5 = -0.3 stays inactive).
    So xi = [[0.2, -0.3], [-0.3, 0.2]], densities 2 on the diagonal, cost 0.1.
    """
    P = quadot.DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5])
    return quadot.QotProblem(P, P, 0.1)


@pytest.fixture
def two_point_solution():
    return quadot.PotentialPair([0.1, 0.1], [0.1, 0.1])


@pytest.fixture
def single_atom_instance():
    """P = delta_0, Q = delta_1, eps = 1: c = 0.5, f + g = 1.5, cost 1.0."""
    P = quadot.DiscreteMeasure([[0.0]], [1.0])
    Q = quadot.DiscreteMeasure([[1.0]], [1.0])
    return quadot.QotProblem(P, Q, 1.0)


def make_random_instance(rng, n=None, m=None, eps=0.5, d=2, uniform_weights=True):
    n = int(n if n is not None else rng.integers(1, 4))
    m = int(m if m is not None else rng.integers(1, 5))
    if uniform_weights:
        wp, wq = np.full(n, 1.0 / n), np.full(m, 1.0 / m)
    else:
        wp = rng.dirichlet(np.ones(n))
        wq = rng.dirichlet(np.ones(m))
    P = quadot.DiscreteMeasure(rng.uniform(0.0, 1.0, (n, d)), wp)
    Q = quadot.DiscreteMeasure(rng.uniform(0.0, 1.0, (m, d)), wq)
    return quadot.QotProblem(P, Q, eps)
