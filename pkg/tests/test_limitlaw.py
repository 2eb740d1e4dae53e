"""Limit-law machinery: operator, quotient inverse, covariances, CIs, sampling."""

import dataclasses

import numpy as np
import pytest

from quadot import (
    DomainSpec,
    EmptySupportError,
    FactorizationFailureError,
    InputError,
    InvalidLevelError,
    QotProblem,
    SingularOnQuotientError,
    build_limit_model,
    build_operator,
    cost_ci,
    cost_variance_plugin,
    coupling_functional_variance,
    covariance_form_gap,
    gaussian_covariances,
    invert_L,
    model_summary,
    potentials_limit_cov,
    quadrature_grid,
    sample_limit_gaussian,
    slack_matrix,
    solve_alternating,
)
from conftest import make_random_instance


@pytest.fixture(scope="module")
def grid_model():
    """Population model on an 8-point 1-d grid against itself (connected support)."""
    g = quadrature_grid(DomainSpec.uniform_box([0.0], [1.0]), 8)
    prob = QotProblem(g, g, 0.5)
    pot, _ = solve_alternating(prob, tol=1e-13)
    return build_limit_model(prob, pot)


def _solved(rng, **kw):
    prob = make_random_instance(rng, **kw)
    pot, _ = solve_alternating(prob, tol=1e-13 * prob.epsilon)
    return prob, pot


# --- operator ----------------------------------------------------------------


def test_operator_single_atom(single_atom_instance):
    pot, _ = solve_alternating(single_atom_instance)
    A = build_operator(single_atom_instance, pot)
    assert np.array_equal(A, [[0.0, 1.0], [1.0, 0.0]])


def test_operator_two_point_diagonal_support(two_point_instance, two_point_solution):
    A = build_operator(two_point_instance, two_point_solution)
    # each section holds exactly one atom, so both blocks are identities
    assert np.array_equal(A[:2, 2:], np.eye(2))
    assert np.array_equal(A[2:, :2], np.eye(2))


def test_operator_rows_sum_to_one_exactly(grid_model):
    A = grid_model.A_matrix
    sums = A.sum(axis=1)
    assert np.all(sums == 1.0)  # exact row-stochasticity, not approximate


def test_operator_rows_exact_on_random_instances():
    rng = np.random.default_rng(43)
    for _ in range(10):
        prob, pot = _solved(rng, eps=0.5, uniform_weights=False)
        A = build_operator(prob, pot)
        assert np.all(A.sum(axis=1) == 1.0)
        assert np.all(A >= 0.0)


# --- quotient inverse --------------------------------------------------------


def test_invert_single_atom():
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    U = invert_L(A, np.ones(1), np.ones(1))
    assert np.allclose(U, 0.25)
    # (I+A)(Uv) = v holds up to the gauge direction: here c = 1/2 exactly
    v = np.array([1.0, 0.0])
    r = (np.eye(2) + A) @ (U @ v) - v
    assert np.allclose(r, [-0.5, 0.5], atol=1e-15)


def test_inverse_kills_gauge_direction(grid_model):
    n = grid_model.pop_problem.n
    e = np.concatenate([np.ones(n), -np.ones(grid_model.pop_problem.m)])
    assert np.max(np.abs(grid_model.L_inverse @ e)) < 1e-12


def test_inverse_round_trip_up_to_gauge(grid_model):
    prob = grid_model.pop_problem
    n, m = prob.n, prob.m
    rng = np.random.default_rng(3)
    L = np.eye(n + m) + grid_model.A_matrix
    for _ in range(5):
        v = rng.standard_normal(n + m)
        r = L @ (grid_model.L_inverse @ v) - v
        # the defect is a pure gauge multiple; remove it and nothing remains
        a = 0.5 * (prob.q @ r[n:] - prob.p @ r[:n])
        r_reduced = np.concatenate([r[:n] + a, r[n:] - a])
        assert np.max(np.abs(r_reduced)) <= 1e-9 * np.max(np.abs(v))


def test_invert_rejects_disconnected_support(two_point_instance, two_point_solution):
    # diagonal support splits the instance into two components, leaving more
    # than the gauge direction in the kernel of I + A
    A = build_operator(two_point_instance, two_point_solution)
    with pytest.raises(SingularOnQuotientError):
        invert_L(A, two_point_instance.p, two_point_instance.q)


def test_invert_validates_shapes():
    with pytest.raises(InputError):
        invert_L(np.zeros((3, 3)), np.ones(1), np.ones(1))


# --- covariances -------------------------------------------------------------


def test_two_point_hinge_covariance(two_point_instance, two_point_solution):
    cov_GQ, cov_GP = gaussian_covariances(two_point_instance, two_point_solution)
    # hinge rows (0.2, 0) and (0, 0.2) under q = (1/2, 1/2):
    # E[h_i h_i'] - eps^2 gives 0.01 on the diagonal, -0.01 off it
    want = np.array([[0.01, -0.01], [-0.01, 0.01]])
    assert np.allclose(cov_GQ, want, atol=1e-15)
    assert np.allclose(cov_GP, want, atol=1e-15)


def test_single_atom_covariances_vanish(single_atom_instance):
    pot, _ = solve_alternating(single_atom_instance)
    cov_GQ, cov_GP = gaussian_covariances(single_atom_instance, pot)
    assert np.allclose(cov_GQ, 0.0, atol=1e-15)
    assert np.allclose(cov_GP, 0.0, atol=1e-15)


def test_covariances_are_psd():
    rng = np.random.default_rng(47)
    for _ in range(10):
        prob, pot = _solved(rng, eps=0.5, uniform_weights=False)
        cov_GQ, cov_GP = gaussian_covariances(prob, pot)
        assert np.linalg.eigvalsh(cov_GQ).min() > -1e-12
        assert np.linalg.eigvalsh(cov_GP).min() > -1e-12


def test_covariance_form_gap_zero_iff_support_full():
    rng = np.random.default_rng(51)
    # eps large: every slack is nonnegative, hinge == xi, gap vanishes
    prob, pot = _solved(rng, eps=50.0)
    assert np.all(slack_matrix(prob, pot) >= 0.0)
    assert covariance_form_gap(prob, pot) == (0.0, 0.0)
    # sparse support: the raw-slack variant really is a different bilinear form
    gq, gp = covariance_form_gap(*_solved(np.random.default_rng(52), n=3, m=4, eps=0.05))
    assert gq > 0.0 and gp > 0.0


# --- cost variance and confidence intervals ----------------------------------


def brute_force_cost_variance(prob, pot):
    """Enumerate the influence kernel v(i, j) over all pairs."""
    H = np.maximum(slack_matrix(prob, pot), 0.0)
    inv2e = 0.5 / prob.epsilon
    v = (
        pot.f[:, None]
        + pot.g[None, :]
        - inv2e * ((H * H) @ prob.q)[:, None]
        - inv2e * (prob.p @ (H * H))[None, :]
    )
    w = np.outer(prob.p, prob.q)
    mean = float((w * v).sum())
    return float((w * v * v).sum()) - mean * mean


def test_plugin_variance_matches_enumeration():
    rng = np.random.default_rng(53)
    for eps in (0.05, 0.5, 5.0):
        for _ in range(5):
            prob, pot = _solved(rng, eps=eps, uniform_weights=False)
            assert cost_variance_plugin(prob, pot) == pytest.approx(
                brute_force_cost_variance(prob, pot), rel=1e-10, abs=1e-12
            )


def test_plugin_variance_gauge_invariant():
    rng = np.random.default_rng(57)
    prob, pot = _solved(rng, eps=0.5)
    from quadot import PotentialPair

    shifted = PotentialPair(pot.f + 3.25, pot.g - 3.25)
    assert cost_variance_plugin(prob, shifted) == pytest.approx(
        cost_variance_plugin(prob, pot), rel=1e-10, abs=1e-13
    )


def test_single_atom_plugin_variance_is_zero(single_atom_instance):
    pot, _ = solve_alternating(single_atom_instance)
    assert cost_variance_plugin(single_atom_instance, pot) == pytest.approx(0.0, abs=1e-15)


def test_cost_ci_quantile_value():
    ci = cost_ci(0.0, 1.0, 100, 0.95)
    assert ci.half_width == pytest.approx(0.1959964, abs=1e-7)
    assert ci.lower == -ci.upper
    assert ci.contains(0.19) and not ci.contains(0.20)


def test_cost_ci_level_monotone():
    widths = [cost_ci(1.0, 2.0, 50, lv).half_width for lv in (0.5, 0.9, 0.95, 0.99)]
    assert widths == sorted(widths)
    assert widths[0] > 0.0


def test_cost_ci_degenerate_variance():
    ci = cost_ci(4.0, 0.0, 10, 0.95)
    assert ci.half_width == 0.0
    assert ci.contains(4.0) and not ci.contains(4.0 + 1e-12)


def test_cost_ci_validates_inputs():
    with pytest.raises(InvalidLevelError):
        cost_ci(0.0, 1.0, 10, 0.0)
    with pytest.raises(InvalidLevelError):
        cost_ci(0.0, 1.0, 10, 1.0)
    with pytest.raises(InputError):
        cost_ci(0.0, 1.0, 0, 0.95)
    with pytest.raises(InputError):
        cost_ci(0.0, -1.0, 10, 0.95)


# --- potentials' limit covariance --------------------------------------------


def test_single_atom_limit_cov_is_zero(single_atom_instance):
    pot, _ = solve_alternating(single_atom_instance)
    model = build_limit_model(single_atom_instance, pot)
    cov = potentials_limit_cov(model, [(0, 0)])
    assert cov.shape == (1, 1)
    assert cov[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_limit_cov_is_symmetric_psd(grid_model):
    pairs = [(0, 0), (3, 4), (7, 7), (2, 5)]
    cov = potentials_limit_cov(grid_model, pairs)
    assert cov.shape == (4, 4)
    assert np.array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() > -1e-12


def test_limit_cov_validates_pairs(grid_model):
    with pytest.raises(InputError):
        potentials_limit_cov(grid_model, [(0, 99)])


# --- coupling functional variance --------------------------------------------


def naive_coupling_variance(model, E):
    """Per-pair linearization: one quotient solve for every sample pair."""
    prob = model.pop_problem
    p, q, H = prob.p, prob.q, model.hinge
    n, m = prob.n, prob.m
    U = model.L_inverse
    c0 = float(p @ (model.support * E) @ q)
    Ebar_H = (E - c0) * H
    T = np.empty((n, m))
    for a in range(n):
        for b in range(m):
            v = np.concatenate([H[:, b] / model.mass_x, H[a, :] / model.mass_y])
            delta = U @ v
            lin = float(p @ (Ebar_H * (delta[:n, None] + delta[None, n:])) @ q)
            T[a, b] = lin - Ebar_H[a, b]
    V_X = T @ q
    V_Y = p @ T
    var_x = float(p @ (V_X * V_X)) - float(p @ V_X) ** 2
    var_y = float(q @ (V_Y * V_Y)) - float(q @ V_Y) ** 2
    return var_x + var_y


def test_coupling_variance_matches_per_pair_solves(grid_model):
    rng = np.random.default_rng(61)
    X = grid_model.pop_problem.P.points
    Y = grid_model.pop_problem.Q.points
    etas = [
        np.outer(X[:, 0], Y[:, 0]),
        (X[:, 0][:, None] <= 0.5) * (Y[:, 0][None, :] <= 0.5) * 1.0,
        rng.standard_normal((8, 8)),
    ]
    for E in etas:
        got = coupling_functional_variance(grid_model, E)
        want = naive_coupling_variance(grid_model, E)
        assert got == pytest.approx(want, rel=1e-9, abs=1e-13)


def test_coupling_variance_constant_eta_is_zero(grid_model):
    assert coupling_functional_variance(grid_model, np.full((8, 8), 7.7)) == pytest.approx(
        0.0, abs=1e-13
    )


def test_coupling_variance_accepts_callable(grid_model):
    def eta(X, Y):
        return np.outer(X[:, 0] ** 2, np.ones(Y.shape[0]))

    arr = eta(grid_model.pop_problem.P.points, grid_model.pop_problem.Q.points)
    assert coupling_functional_variance(grid_model, eta) == pytest.approx(
        coupling_functional_variance(grid_model, arr)
    )


def test_coupling_variance_validates_eta(grid_model):
    with pytest.raises(InputError):
        coupling_functional_variance(grid_model, np.zeros((3, 3)))
    with pytest.raises(InputError):
        coupling_functional_variance(grid_model, "not an eta")


def test_coupling_variance_empty_support(grid_model):
    hollow = dataclasses.replace(grid_model, hinge=np.zeros_like(grid_model.hinge))
    with pytest.raises(EmptySupportError):
        coupling_functional_variance(hollow, np.ones((8, 8)))


# --- sampling the limit Gaussian ----------------------------------------------


def test_sample_limit_gaussian_deterministic(grid_model):
    pairs = [(0, 0), (4, 4)]
    a = sample_limit_gaussian(grid_model, 99, 16, pairs)
    b = sample_limit_gaussian(grid_model, 99, 16, pairs)
    c = sample_limit_gaussian(grid_model, 100, 16, pairs)
    assert a.shape == (16, 2)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sample_limit_gaussian_covariance(grid_model):
    pairs = [(1, 1), (4, 2), (6, 7)]
    want = potentials_limit_cov(grid_model, pairs)
    draws = sample_limit_gaussian(grid_model, 7, 200_000, pairs)
    got = np.cov(draws.T)
    assert np.linalg.norm(got - want) < 0.02 * max(np.linalg.norm(want), 1e-12)


def test_sample_limit_gaussian_validates_count(grid_model):
    with pytest.raises(InputError):
        sample_limit_gaussian(grid_model, 1, 0, [(0, 0)])


def test_sample_limit_gaussian_repair_band(grid_model, monkeypatch):
    import quadot.limitlaw as mod

    monkeypatch.setattr(mod, "potentials_limit_cov", lambda m, pairs: np.array([[-1e-9]]))
    draws = mod.sample_limit_gaussian(grid_model, 1, 8, [(0, 0)])
    assert np.all(draws == 0.0)  # eigenvalue inside the band clamps to zero

    monkeypatch.setattr(mod, "potentials_limit_cov", lambda m, pairs: np.array([[-1.0]]))
    with pytest.raises(FactorizationFailureError):
        mod.sample_limit_gaussian(grid_model, 1, 8, [(0, 0)])


# --- model assembly -----------------------------------------------------------


def test_build_limit_model_fields(grid_model):
    prob = grid_model.pop_problem
    assert grid_model.hinge.shape == (prob.n, prob.m)
    assert grid_model.support.dtype == bool
    assert np.all(grid_model.mass_x > 0.0) and np.all(grid_model.mass_y > 0.0)
    assert grid_model.cost_sigma2 == pytest.approx(
        cost_variance_plugin(prob, grid_model.pop_pot)
    )
    assert grid_model.condition_number < 1e12


def test_model_summary_keys(grid_model):
    s = model_summary(grid_model)
    assert s["n"] == 8 and s["m"] == 8
    assert s["epsilon"] == 0.5
    assert 0.0 < s["fill_ratio"] <= 1.0
    assert s["support_count"] == int(grid_model.support.sum())
    assert s["min_section_mass_x"] == pytest.approx(grid_model.mass_x.min())
