"""Monte Carlo experiment harness: rate fits, KS, configs, runners, reports."""

import json
import math

import numpy as np
import pytest

from quadot import (
    DegenerateInputError,
    DiscreteMeasure,
    DomainSpec,
    EtaSpec,
    ExperimentConfig,
    InputError,
    NotConvergedError,
    TooFewSamplesError,
    fit_rate,
    ks_distance,
    run_consistency,
    run_cost_clt,
    run_coupling_clt,
    run_potential_rate,
    run_vc_rate,
)
from quadot.experiments import (
    _coupling_integral,
    _replication_loop,
    qq_csv_text,
    rate_csv_text,
    records_csv_text,
    report_json_text,
    write_report_files,
)


# --- rate fitting -------------------------------------------------------------


def test_fit_rate_recovers_exact_power_laws():
    ns = [100, 400, 1600, 6400]
    for target in (-0.5, -1.0, 0.0):
        errors = [3.0 * n**target for n in ns]
        slope, stderr = fit_rate(ns, errors)
        assert slope == pytest.approx(target, abs=1e-12)
        assert stderr == pytest.approx(0.0, abs=1e-10)


def test_fit_rate_stderr_reflects_scatter():
    rng = np.random.default_rng(0)
    ns = [100, 200, 400, 800, 1600]
    errors = [n**-0.5 * math.exp(rng.normal(scale=0.1)) for n in ns]
    slope, stderr = fit_rate(ns, errors)
    assert stderr > 0.0
    assert abs(slope - (-0.5)) < 5 * stderr + 0.2


def test_fit_rate_zero_error_sentinel():
    slope, stderr = fit_rate([10, 100, 1000], [0.1, 0.0, 0.001])
    assert slope == float("-inf")
    assert math.isnan(stderr)


def test_fit_rate_needs_three_points():
    with pytest.raises(DegenerateInputError):
        fit_rate([10, 100], [1.0, 0.1])
    with pytest.raises(DegenerateInputError):
        fit_rate([10, 100, 1000], [1.0, 0.1])
    with pytest.raises(DegenerateInputError):
        fit_rate([10, -5, 1000], [1.0, 0.1, 0.01])


# --- KS distance ----------------------------------------------------------------


def test_ks_needs_ten_samples():
    with pytest.raises(TooFewSamplesError):
        ks_distance(np.zeros(9))


def test_ks_all_zeros_is_half():
    assert ks_distance(np.zeros(10)) == 0.5
    assert ks_distance(np.zeros(500)) == 0.5


def test_ks_of_plugin_quantiles():
    from scipy.special import ndtri

    n = 1000
    sample = ndtri((np.arange(1, n + 1) - 0.5) / n)
    # the empirical CDF brackets each (k - 0.5)/n point by exactly 0.5/n
    assert ks_distance(sample) == pytest.approx(0.5 / n, abs=1e-12)


def test_ks_detects_wrong_scale():
    rng = np.random.default_rng(2)
    good = rng.standard_normal(2000)
    bad = 3.0 * rng.standard_normal(2000)
    assert ks_distance(good) < 0.05
    assert ks_distance(bad) > 0.2


# --- eta specifications ---------------------------------------------------------


def test_eta_box_indicator_is_inclusive():
    eta = EtaSpec(
        "box_indicator", x_lower=(0.0,), x_upper=(0.5,), y_lower=(0.0,), y_upper=(0.5,)
    )
    X = np.array([[0.0], [0.5], [0.7]])
    Y = np.array([[0.5], [0.51]])
    u, v = eta.factor_values(X, Y)
    assert list(u) == [1.0, 1.0, 0.0]  # both endpoints belong to the box
    assert list(v) == [1.0, 0.0]
    assert np.array_equal(eta.matrix(X, Y), np.outer(u, v))


def test_eta_constant():
    eta = EtaSpec("constant", value=2.5)
    u, v = eta.factor_values(np.zeros((3, 2)), np.zeros((4, 2)))
    assert np.all(u == 2.5) and np.all(v == 1.0)


def test_eta_dict_round_trip():
    eta = EtaSpec(
        "box_indicator",
        x_lower=(0.0, 0.0),
        x_upper=(0.5, 0.5),
        y_lower=(0.0, 0.0),
        y_upper=(0.5, 0.5),
        value=2.0,
    )
    assert EtaSpec.from_dict(eta.to_dict()) == eta
    assert EtaSpec.from_dict(EtaSpec("constant").to_dict()) == EtaSpec("constant")


def test_eta_validation():
    with pytest.raises(InputError):
        EtaSpec("gaussian_bump")
    with pytest.raises(InputError):
        EtaSpec("box_indicator")  # no bounds given
    with pytest.raises(InputError):
        EtaSpec.from_dict({"value": 1.0})
    with pytest.raises(InputError):
        EtaSpec.from_dict({"kind": "constant", "wavelength": 3})


def test_eta_box_dimension_checked():
    eta = EtaSpec(
        "box_indicator", x_lower=(0.0,), x_upper=(1.0,), y_lower=(0.0,), y_upper=(1.0,)
    )
    with pytest.raises(InputError):
        eta.factor_values(np.zeros((3, 2)), np.zeros((3, 2)))


# --- experiment config -----------------------------------------------------------


BOX = DomainSpec.uniform_box([0.0], [1.0])


def small_config(**overrides):
    base = dict(
        population=BOX,
        m_per_axis=8,
        epsilon=0.5,
        sample_sizes=(8, 16, 32),
        replications=3,
        master_seed=7,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def test_config_validation():
    with pytest.raises(InputError):
        small_config(sample_sizes=(16, 8))
    with pytest.raises(InputError):
        small_config(sample_sizes=())
    with pytest.raises(InputError):
        small_config(replications=1)
    with pytest.raises(InputError):
        small_config(ci_level=1.0)
    with pytest.raises(InputError):
        small_config(m_per_axis=0)
    with pytest.raises(InputError):
        small_config(epsilon=0.0)


def test_config_dict_round_trip():
    cfg = small_config(
        eta=EtaSpec("constant", value=3.0), assertions={"coverage_min": 0.9}
    )
    back = ExperimentConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    assert back.eta == cfg.eta
    assert back.sample_sizes == cfg.sample_sizes


def test_config_explicit_population_round_trip():
    m = DiscreteMeasure([[0.25], [0.75]], [0.5, 0.5])
    cfg = small_config(population=DomainSpec.explicit(m))
    back = ExperimentConfig.from_dict(cfg.to_dict())
    assert back.population.kind == "explicit"
    assert np.array_equal(back.population.measure.points, m.points)


def test_config_from_dict_rejects_bad_shapes():
    good = small_config().to_dict()
    with pytest.raises(InputError):
        ExperimentConfig.from_dict("not a dict")
    with pytest.raises(InputError):
        ExperimentConfig.from_dict({**good, "population": {"kind": "lebesgue"}})
    no_pop = dict(good)
    del no_pop["population"]
    with pytest.raises(InputError):
        ExperimentConfig.from_dict(no_pop)
    with pytest.raises(InputError):
        ExperimentConfig.from_dict({**good, "surprise": 1})
    missing = dict(good)
    del missing["epsilon"]
    with pytest.raises(InputError):
        ExperimentConfig.from_dict(missing)


# --- replication loop ------------------------------------------------------------


def test_replication_loop_aborts_on_excess_failures():
    cfg = small_config(sample_sizes=(2, 3), replications=2)

    def body(n, rep):
        raise NotConvergedError("synthetic")

    with pytest.raises(NotConvergedError, match="aborting"):
        _replication_loop(cfg, body)


def test_replication_loop_tolerates_rare_failures():
    cfg = small_config(sample_sizes=(2, 3, 4), replications=100)

    def body(n, rep):
        if n == 3 and rep == 17:
            raise NotConvergedError("synthetic")
        return {"err": 1.0}, 1.0

    records, outcomes, failures, total = _replication_loop(cfg, body)
    assert failures == 1 and total == 300
    assert len(records) == 300
    failed = [r for r in records if r.get("failed")]
    assert failed == [{"n": 3, "rep": 17, "failed": True}]
    assert len(outcomes[3]) == 99 and len(outcomes[2]) == 100


# --- runners (small smoke runs; full scale lives in the acceptance suite) ---------


def test_cost_clt_report_structure():
    rep = run_cost_clt(small_config())
    assert rep.kind == "cost_clt"
    assert rep.failures == 0 and rep.total_replications == 9
    assert rep.passed is True  # no assertion bands configured
    for n in (8, 16, 32):
        stats = rep.per_n[n]
        assert stats["completed"] == 3
        assert 0.0 <= stats["coverage"] <= 1.0
        assert stats["ks_normalized"] is None  # fewer than 10 replications
    assert rep.extras["reference_bias"] is not None
    assert rep.extras["population_sigma2"] > 0.0
    assert len(rep.records) == 9
    assert {"n", "rep", "cost_hat", "sigma2_hat", "covered", "norm_err"} <= set(
        rep.records[0]
    )


def test_cost_clt_is_deterministic():
    a = run_cost_clt(small_config()).to_json_dict()
    b = run_cost_clt(small_config()).to_json_dict()
    a.pop("runtime_seconds"), b.pop("runtime_seconds")
    assert a == b


def test_cost_clt_assertion_bands():
    impossible = run_cost_clt(small_config(assertions={"coverage_min": 2.0}))
    assert impossible.passed is False
    assert all(v is False for v in impossible.assertions.values())
    trivial = run_cost_clt(small_config(assertions={"coverage_min": 0.0}))
    assert trivial.passed is True


def test_cost_clt_explicit_population_has_no_bias_reference():
    m = DiscreteMeasure([[0.2], [0.8]], [0.5, 0.5])
    rep = run_cost_clt(
        small_config(population=DomainSpec.explicit(m), sample_sizes=(4, 8), replications=2)
    )
    assert rep.extras["reference_bias"] is None


def test_single_atom_population_degenerates_cleanly():
    pop = DomainSpec.explicit(DiscreteMeasure([[0.5]], [1.0]))
    rep = run_cost_clt(small_config(population=pop, sample_sizes=(2, 4), replications=3))
    for n in (2, 4):
        assert rep.per_n[n]["coverage"] == 1.0  # exact cost, zero-width CI covers
        assert rep.per_n[n]["mean_err"] == 0.0
    rate = run_potential_rate(
        small_config(population=pop, sample_sizes=(2, 4, 8), replications=2)
    )
    assert rate.rate["slope"] == float("-inf")  # zero errors: the flagged sentinel
    assert math.isnan(rate.rate["stderr"])


def test_potential_rate_report_structure():
    rep = run_potential_rate(small_config(assertions={"slope_min": -5.0, "slope_max": 5.0}))
    assert rep.kind == "potential_rate"
    assert set(rep.rate) == {"slope", "stderr"}
    assert rep.assertions["slope_in_band"] is True
    for n in (8, 16, 32):
        assert rep.per_n[n]["median_err"] > 0.0
    assert {"n", "rep", "err"} <= set(rep.records[0])


def test_vc_rate_report_structure():
    rep = run_vc_rate(small_config())
    assert rep.kind == "vc_rate"
    for n in (8, 16, 32):
        assert rep.per_n[n]["median_stat"] > 0.0
    assert {"n", "rep", "stat"} <= set(rep.records[0])


def test_vc_rate_custom_probe():
    rep = run_vc_rate(small_config(sample_sizes=(8, 16), replications=2), probe=lambda pts: pts[:, 0])
    assert all(not r["failed"] for r in rep.records)


def test_coupling_clt_requires_eta():
    with pytest.raises(InputError):
        run_coupling_clt(small_config())


def test_coupling_clt_report_structure():
    eta = EtaSpec(
        "box_indicator", x_lower=(0.0,), x_upper=(0.5,), y_lower=(0.0,), y_upper=(0.5,)
    )
    rep = run_coupling_clt(small_config(eta=eta, sample_sizes=(16, 32), replications=3))
    assert rep.kind == "coupling_clt"
    assert rep.extras["sigma2_eta"] > 0.0
    assert rep.extras["limit_variance"] == pytest.approx(
        rep.extras["sigma2_eta"] / 0.5**2
    )
    assert rep.per_n[32]["mc_variance"] >= 0.0
    assert "variance_ratio" in rep.per_n[32]
    assert {"n", "rep", "integral_hat", "norm_err"} <= set(rep.records[0])


def test_consistency_runs_nested_prefixes():
    rep = run_consistency(small_config(sample_sizes=(8, 32, 128), replications=2))
    assert rep.kind == "consistency"
    assert [r["n"] for r in rep.records] == [8, 32, 128]
    errs = [r["err"] for r in rep.records]
    assert rep.extras["first_error"] == errs[0]
    assert rep.extras["final_error"] == errs[-1]
    assert rep.assertions["final_error_lt_first"] == (errs[-1] < errs[0])
    assert rep.passed is bool(errs[-1] < errs[0])


# --- coupling integral helper ------------------------------------------------------


def test_coupling_integral_matches_dense_sum():
    from quadot import QotProblem, solve_alternating, slack_matrix

    rng = np.random.default_rng(71)
    pts = rng.uniform(0, 1, size=(5, 2))
    P = DiscreteMeasure(pts, rng.dirichlet(np.ones(5)))
    Q = DiscreteMeasure(rng.uniform(0, 1, size=(7, 2)), rng.dirichlet(np.ones(7)))
    prob = QotProblem(P, Q, 0.5)
    pot, _ = solve_alternating(prob)
    u = rng.standard_normal(prob.n)
    v = rng.standard_normal(prob.m)
    H = np.maximum(slack_matrix(prob, pot), 0.0)
    dense = float((prob.p * u) @ H @ (prob.q * v)) / prob.epsilon
    assert _coupling_integral(prob, pot, u, v) == pytest.approx(dense, rel=1e-12)


# --- report serialization ------------------------------------------------------------


@pytest.fixture(scope="module")
def cost_report():
    return run_cost_clt(small_config(sample_sizes=(8, 16), replications=12))


def test_report_json_text(cost_report):
    data = json.loads(report_json_text(cost_report))
    assert data["format_version"] == 1
    assert data["kind"] == "cost_clt"
    assert data["per_n"]["8"]["completed"] == 12
    assert data["config"]["m_per_axis"] == 8


def test_records_csv_text(cost_report):
    text = records_csv_text(cost_report)
    lines = text.strip().split("\n")
    assert lines[0] == "# format_version: 1"
    assert lines[1] == "n,rep,cost_hat,sigma2_hat,covered,norm_err"
    assert len(lines) == 2 + 24
    first = lines[2].split(",")
    assert first[0] == "8" and first[1] == "0"
    assert first[4] in ("0", "1")  # booleans render as 0/1


def test_qq_csv_text(cost_report):
    text = qq_csv_text(cost_report)
    lines = text.strip().split("\n")
    assert lines[1] == "theoretical_q,empirical_q"
    assert len(lines) == 2 + 12  # one row per replication at the largest n
    qs = [float(line.split(",")[1]) for line in lines[2:]]
    assert qs == sorted(qs)


def test_rate_csv_text_by_kind(cost_report):
    text = rate_csv_text(cost_report)
    assert text.splitlines()[1] == "n,median_abs_err"
    pot = run_potential_rate(small_config(sample_sizes=(8, 16), replications=2))
    assert rate_csv_text(pot).splitlines()[1] == "n,median_err"
    eta = EtaSpec("constant")
    cpl = run_coupling_clt(small_config(eta=eta, sample_sizes=(8, 16), replications=2))
    assert rate_csv_text(cpl) is None


def test_write_report_files(tmp_path, cost_report):
    paths = write_report_files(tmp_path, cost_report)
    names = sorted(p.split("/")[-1] for p in paths)
    assert names == ["qq.csv", "rate.csv", "records.csv", "report.json"]
    loaded = json.loads((tmp_path / "report.json").read_text())
    assert loaded["format_version"] == 1
