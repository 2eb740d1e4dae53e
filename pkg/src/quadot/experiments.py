"""Monte Carlo harness for the asymptotic claims at desk scale.

Every runner follows the same pattern: solve one "population" instance on a
quadrature grid, then repeatedly (a) draw i.i.d. samples, (b) solve the
empirical instance warm-started from the population potentials, (c) record a
statistic, and finally aggregate.  The continuous population the theory wants
is proxied by a fine grid; the discretization bias of that proxy is measured
(coarse-vs-fine reference gap) rather than assumed away.

Reproducibility: every random draw is keyed by
(master_seed, n, replication_index, role), so reports depend only on the
config and not on scheduling or parallelism.  The runtime_seconds field is
informational and deliberately excluded from that determinism contract.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from . import _kernels
from .errors import (
    DegenerateInputError,
    InputError,
    NotConvergedError,
    TooFewSamplesError,
)
from .measures import (
    DiscreteMeasure,
    DomainSpec,
    derive_seed,
    quadrature_grid,
    sample_empirical,
)
from .solver import (
    QotProblem,
    PotentialPair,
    dual_objective,
    extend_potential,
    solve_alternating,
)
from .limitlaw import (
    build_limit_model,
    cost_ci,
    cost_variance_plugin,
    coupling_functional_variance,
)
from .geometry import vc_sup_deviation

__all__ = [
    "EtaSpec",
    "ExperimentConfig",
    "ExperimentReport",
    "run_cost_clt",
    "run_potential_rate",
    "run_vc_rate",
    "run_coupling_clt",
    "run_consistency",
    "fit_rate",
    "ks_distance",
    "report_json_text",
    "records_csv_text",
    "qq_csv_text",
    "rate_csv_text",
    "write_report_files",
]

_X_ROLE = 0
_Y_ROLE = 1
MAX_FAILURE_FRACTION = 0.01


# ---------------------------------------------------------------------------
# config types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EtaSpec:
    """A test functional eta(x, y) for the coupling CLT.

    ``box_indicator`` is 1 exactly when x and y both lie in their (closed)
    boxes, times ``value``; ``constant`` is ``value`` everywhere.  Both factor
    as u(x) * v(y), which the runners exploit to integrate against couplings
    without materializing eta on the product grid.
    """

    kind: str
    x_lower: tuple = ()
    x_upper: tuple = ()
    y_lower: tuple = ()
    y_upper: tuple = ()
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("box_indicator", "constant"):
            raise InputError(f"unknown eta kind {self.kind!r}")
        if self.kind == "box_indicator":
            for lo, hi in ((self.x_lower, self.x_upper), (self.y_lower, self.y_upper)):
                if len(lo) != len(hi) or not lo:
                    raise InputError("box_indicator needs equal-length lower/upper bounds")

    @staticmethod
    def _in_box(points: np.ndarray, lower, upper) -> np.ndarray:
        lo = np.asarray(lower, dtype=np.float64)
        hi = np.asarray(upper, dtype=np.float64)
        if points.shape[1] != lo.shape[0]:
            raise InputError("eta box dimension does not match the points")
        return np.all((points >= lo) & (points <= hi), axis=1).astype(np.float64)

    def factor_values(self, X: np.ndarray, Y: np.ndarray):
        """(u, v) with eta(x_i, y_j) = u_i * v_j."""
        if self.kind == "constant":
            return (
                np.full(X.shape[0], float(self.value)),
                np.ones(Y.shape[0]),
            )
        u = self._in_box(X, self.x_lower, self.x_upper) * float(self.value)
        v = self._in_box(Y, self.y_lower, self.y_upper)
        return u, v

    def matrix(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        u, v = self.factor_values(X, Y)
        return np.outer(u, v)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "value": self.value}
        if self.kind == "box_indicator":
            d.update(
                x_lower=list(self.x_lower),
                x_upper=list(self.x_upper),
                y_lower=list(self.y_lower),
                y_upper=list(self.y_upper),
            )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EtaSpec":
        kw = dict(d)
        kind = kw.pop("kind", None)
        if kind is None:
            raise InputError("eta spec needs a 'kind'")
        for key in ("x_lower", "x_upper", "y_lower", "y_upper"):
            if key in kw:
                kw[key] = tuple(float(v) for v in kw[key])
        try:
            return cls(kind=kind, **kw)
        except TypeError as exc:
            raise InputError(f"bad eta spec: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    population: DomainSpec
    m_per_axis: int
    epsilon: float
    sample_sizes: tuple
    replications: int
    master_seed: int
    ci_level: float = 0.95
    eta: EtaSpec | None = None
    max_sweeps: int = 5000
    assertions: dict = field(default_factory=dict)

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.sample_sizes)
        object.__setattr__(self, "sample_sizes", sizes)
        if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise InputError("sample_sizes must be nonempty and strictly increasing")
        if min(sizes) < 1:
            raise InputError("sample sizes must be positive")
        if self.replications < 2:
            raise InputError("replications must be at least 2")
        if not (0.0 < self.ci_level < 1.0):
            raise InputError("ci_level must lie in (0, 1)")
        if self.m_per_axis < 1:
            raise InputError("m_per_axis must be >= 1")
        if not (self.epsilon > 0.0):
            raise InputError("epsilon must be positive")

    def to_dict(self) -> dict:
        if self.population.kind == "uniform_box":
            pop = {
                "kind": "uniform_box",
                "lower": [float(v) for v in self.population.lower],
                "upper": [float(v) for v in self.population.upper],
            }
        else:
            pop = {
                "kind": "explicit",
                "points": self.population.measure.points.tolist(),
                "weights": self.population.measure.weights.tolist(),
            }
        return {
            "population": pop,
            "m_per_axis": self.m_per_axis,
            "epsilon": self.epsilon,
            "sample_sizes": list(self.sample_sizes),
            "replications": self.replications,
            "master_seed": self.master_seed,
            "ci_level": self.ci_level,
            "eta": None if self.eta is None else self.eta.to_dict(),
            "max_sweeps": self.max_sweeps,
            "assertions": dict(self.assertions),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise InputError("experiment config must be a JSON object")
        data = dict(d)
        pop = data.pop("population", None)
        if not isinstance(pop, dict) or "kind" not in pop:
            raise InputError("config needs a population object with a 'kind'")
        if pop["kind"] == "uniform_box":
            population = DomainSpec.uniform_box(pop["lower"], pop["upper"])
        elif pop["kind"] == "explicit":
            population = DomainSpec.explicit(
                DiscreteMeasure(pop["points"], pop["weights"])
            )
        else:
            raise InputError(f"unknown population kind {pop['kind']!r}")
        eta = data.pop("eta", None)
        if eta is not None:
            eta = EtaSpec.from_dict(eta)
        known = {
            "m_per_axis",
            "epsilon",
            "sample_sizes",
            "replications",
            "master_seed",
            "ci_level",
            "max_sweeps",
            "assertions",
        }
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        missing = {"m_per_axis", "epsilon", "sample_sizes", "replications", "master_seed"} - set(data)
        if missing:
            raise InputError(f"config missing keys: {sorted(missing)}")
        try:
            return cls(population=population, eta=eta, **data)
        except TypeError as exc:
            raise InputError(f"bad experiment config: {exc}") from exc


@dataclass
class ExperimentReport:
    kind: str
    config: dict
    master_seed: int
    per_n: dict  # n -> summary dict
    records: list  # per-replication dicts, order fixed by (n, rep)
    extras: dict
    rate: dict | None
    assertions: dict
    passed: bool
    failures: int
    total_replications: int
    runtime_seconds: float

    def to_json_dict(self) -> dict:
        return {
            "format_version": 1,
            "kind": self.kind,
            "config": self.config,
            "master_seed": self.master_seed,
            "per_n": {str(n): self.per_n[n] for n in sorted(self.per_n)},
            "records": self.records,
            "extras": self.extras,
            "rate": self.rate,
            "assertions": self.assertions,
            "passed": self.passed,
            "failures": self.failures,
            "total_replications": self.total_replications,
            "runtime_seconds": self.runtime_seconds,
        }


# ---------------------------------------------------------------------------
# plumbing statistics
# ---------------------------------------------------------------------------


def fit_rate(ns, errors):
    """Least-squares slope of log(error) on log(n), with its standard error.

    Needs at least three points.  Zero or negative errors cannot be fitted on
    the log scale; they yield the flagged sentinel (-inf, nan) instead of a
    slope (callers treat the sentinel as 'degenerate, faster than any rate').
    """
    ns = [float(v) for v in ns]
    errors = [float(v) for v in errors]
    if len(ns) != len(errors) or len(ns) < 3:
        raise DegenerateInputError("rate fit needs >= 3 (n, error) pairs")
    if any(v <= 0.0 for v in ns):
        raise DegenerateInputError("sample sizes must be positive")
    if any(e <= 0.0 for e in errors):
        return float("-inf"), float("nan")
    x = np.log(np.asarray(ns))
    y = np.log(np.asarray(errors))
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise DegenerateInputError("all sample sizes equal; slope undefined")
    slope = float(xc @ (y - y.mean())) / sxx
    resid = (y - y.mean()) - slope * xc
    dof = len(ns) - 2
    stderr = float(np.sqrt(float(resid @ resid) / dof / sxx))
    return slope, stderr


def ks_distance(sample) -> float:
    """Kolmogorov-Smirnov sup-distance to the standard normal."""
    z = np.sort(np.asarray(sample, dtype=np.float64).reshape(-1))
    n = z.shape[0]
    if n < 10:
        raise TooFewSamplesError(f"KS needs >= 10 samples, got {n}")
    cdf = ndtr(z)
    grid = np.arange(1, n + 1) / n
    return float(max(np.max(grid - cdf), np.max(cdf - (grid - 1.0 / n))))


# ---------------------------------------------------------------------------
# shared population setup and replication loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Population:
    grid: DiscreteMeasure
    problem: QotProblem
    pot: PotentialPair


def _build_population(config: ExperimentConfig) -> _Population:
    if config.population.kind == "uniform_box":
        grid = quadrature_grid(config.population, config.m_per_axis)
    else:
        grid = config.population.measure
    problem = QotProblem(grid, grid, config.epsilon)
    pot, _ = solve_alternating(problem, max_sweeps=config.max_sweeps)
    return _Population(grid, problem, pot)


def _draw_pair(config: ExperimentConfig, n: int, rep: int):
    P_n = sample_empirical(
        config.population, n, derive_seed(config.master_seed, n, rep, _X_ROLE)
    )
    Q_n = sample_empirical(
        config.population, n, derive_seed(config.master_seed, n, rep, _Y_ROLE)
    )
    return P_n, Q_n


def _solve_empirical(config: ExperimentConfig, pop: _Population, P_n, Q_n):
    """Solve the empirical instance, warm-started by extending the population
    potentials to the sampled atoms (one exact row pass per atom)."""
    problem = QotProblem(P_n, Q_n, config.epsilon)
    f0 = extend_potential(P_n.points, pop.problem.Q, pop.pot.g, config.epsilon)
    g0 = extend_potential(Q_n.points, pop.problem.P, pop.pot.f, config.epsilon)
    pot, _ = solve_alternating(
        problem, max_sweeps=config.max_sweeps, initial=PotentialPair(f0, g0)
    )
    return problem, pot


def _replication_loop(config: ExperimentConfig, body):
    """Run body(n, rep) for every (n, replication); collect results and
    failures.  Aborts when more than MAX_FAILURE_FRACTION of replications fail
    to converge; failed replications are recorded but contribute nothing else.
    """
    records = []
    outcomes = {n: [] for n in config.sample_sizes}
    failures = 0
    total = len(config.sample_sizes) * config.replications
    for n in config.sample_sizes:
        for rep in range(config.replications):
            try:
                rec, value = body(n, rep)
            except NotConvergedError:
                failures += 1
                if failures > MAX_FAILURE_FRACTION * total:
                    raise NotConvergedError(
                        f"{failures} of {total} replications failed to converge; "
                        "aborting the experiment"
                    )
                records.append({"n": n, "rep": rep, "failed": True})
                continue
            rec = {"n": n, "rep": rep, "failed": False, **rec}
            records.append(rec)
            outcomes[n].append(value)
    return records, outcomes, failures, total


def _finish(config, kind, per_n, records, extras, rate, assertions, failures, total, t0):
    passed = all(bool(v) for v in assertions.values()) if assertions else True
    return ExperimentReport(
        kind=kind,
        config=config.to_dict(),
        master_seed=config.master_seed,
        per_n=per_n,
        records=records,
        extras=extras,
        rate=rate,
        assertions=assertions,
        passed=passed,
        failures=failures,
        total_replications=total,
        runtime_seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------


def run_cost_clt(config: ExperimentConfig) -> ExperimentReport:
    """Coverage and normality of the plug-in cost CI against the grid reference.

    Per replication: empirical cost, plug-in variance, the CI at the
    configured level, whether it covers the population (grid) cost, and the
    normalized error sqrt(n) (cost_n - cost) / sigma_hat.  The grid reference
    carries a discretization bias; the report includes the coarse-vs-fine
    reference gap so callers can budget it against the CI half-width.
    """
    t0 = time.perf_counter()
    pop = _build_population(config)
    ref_cost = dual_objective(pop.problem, pop.pot)
    pop_sigma2 = cost_variance_plugin(pop.problem, pop.pot)

    reference_bias = None
    if config.population.kind == "uniform_box" and config.m_per_axis >= 2:
        coarse_grid = quadrature_grid(config.population, config.m_per_axis // 2)
        coarse_problem = QotProblem(coarse_grid, coarse_grid, config.epsilon)
        coarse_pot, _ = solve_alternating(coarse_problem, max_sweeps=config.max_sweeps)
        reference_bias = abs(dual_objective(coarse_problem, coarse_pot) - ref_cost)

    def body(n, rep):
        P_n, Q_n = _draw_pair(config, n, rep)
        problem, pot = _solve_empirical(config, pop, P_n, Q_n)
        cost_hat = dual_objective(problem, pot)
        sigma2_hat = cost_variance_plugin(problem, pot)
        ci = cost_ci(cost_hat, sigma2_hat, n, config.ci_level)
        covered = ci.contains(ref_cost)
        sigma = float(np.sqrt(sigma2_hat))
        norm_err = float(np.sqrt(n)) * (cost_hat - ref_cost) / sigma if sigma > 0 else 0.0
        rec = {
            "cost_hat": cost_hat,
            "sigma2_hat": sigma2_hat,
            "covered": bool(covered),
            "norm_err": norm_err,
            "half_width": ci.half_width,
        }
        return rec, rec

    records, outcomes, failures, total = _replication_loop(config, body)

    per_n = {}
    for n, vals in outcomes.items():
        if not vals:
            per_n[n] = {"completed": 0}
            continue
        covered = np.array([v["covered"] for v in vals], dtype=np.float64)
        errs = np.array([v["cost_hat"] - ref_cost for v in vals])
        norm_errs = [v["norm_err"] for v in vals]
        cov_rate = float(covered.mean())
        per_n[n] = {
            "completed": len(vals),
            "coverage": cov_rate,
            "coverage_mc_se": float(np.sqrt(cov_rate * (1.0 - cov_rate) / len(vals))),
            "mean_err": float(errs.mean()),
            "median_abs_err": float(np.median(np.abs(errs))),
            "mean_half_width": float(np.mean([v["half_width"] for v in vals])),
            "ks_normalized": ks_distance(norm_errs) if len(norm_errs) >= 10 else None,
            "norm_errs": norm_errs,
        }

    extras = {
        "population_cost": ref_cost,
        "population_sigma2": pop_sigma2,
        "reference_bias": reference_bias,
        "ci_level": config.ci_level,
    }

    assertions = {}
    bands = config.assertions
    if "coverage_min" in bands or "coverage_max" in bands:
        lo = bands.get("coverage_min", 0.0)
        hi = bands.get("coverage_max", 1.0)
        for n in config.sample_sizes:
            cov = per_n[n].get("coverage")
            assertions[f"coverage_in_band_n{n}"] = cov is not None and lo <= cov <= hi
    if "ks_max" in bands:
        ks = per_n[max(config.sample_sizes)].get("ks_normalized")
        assertions["ks_at_largest_n"] = ks is not None and ks <= bands["ks_max"]
    if "bias_factor_max" in bands and reference_bias is not None:
        hw = per_n[max(config.sample_sizes)].get("mean_half_width", 0.0)
        assertions["reference_bias_budget"] = reference_bias <= bands["bias_factor_max"] * hw

    return _finish(
        config, "cost_clt", per_n, records, extras, None, assertions, failures, total, t0
    )


def _sup_pair_error(pop: _Population, f_on_grid, g_on_grid):
    """sup over grid pairs of |(f_n + g_n) - (f + g)| — gauge-invariant."""
    df = f_on_grid - pop.pot.f
    dg = g_on_grid - pop.pot.g
    return max(float(df.max() + dg.max()), -float(df.min() + dg.min()))


def run_potential_rate(config: ExperimentConfig) -> ExperimentReport:
    """Decay of the sup-norm potential error (in the gauge-invariant f+g form).

    Empirical potentials are carried to the population grid by the exact
    one-row extension against the empirical opposite marginal, then compared
    with the population potentials over all grid pairs; per n the median over
    replications enters a log-log rate fit.
    """
    t0 = time.perf_counter()
    pop = _build_population(config)
    grid_pts = pop.grid.points

    def body(n, rep):
        P_n, Q_n = _draw_pair(config, n, rep)
        problem, pot = _solve_empirical(config, pop, P_n, Q_n)
        f_on_grid = extend_potential(grid_pts, problem.Q, pot.g, config.epsilon)
        g_on_grid = extend_potential(grid_pts, problem.P, pot.f, config.epsilon)
        err = _sup_pair_error(pop, f_on_grid, g_on_grid)
        return {"err": err}, err

    records, outcomes, failures, total = _replication_loop(config, body)
    per_n, medians = {}, []
    for n in config.sample_sizes:
        vals = outcomes[n]
        med = float(np.median(vals)) if vals else float("nan")
        medians.append(med)
        per_n[n] = {
            "completed": len(vals),
            "median_err": med,
            "mean_err": float(np.mean(vals)) if vals else float("nan"),
        }
    slope, stderr = (
        fit_rate(config.sample_sizes, medians)
        if len(config.sample_sizes) >= 3
        else (float("nan"), float("nan"))
    )
    rate = {"slope": slope, "stderr": stderr}

    assertions = {}
    bands = config.assertions
    if "slope_min" in bands or "slope_max" in bands:
        assertions["slope_in_band"] = (
            bands.get("slope_min", float("-inf"))
            <= slope
            <= bands.get("slope_max", float("inf"))
        )
    return _finish(
        config, "potential_rate", per_n, records, {}, rate, assertions, failures, total, t0
    )


def run_vc_rate(config: ExperimentConfig, probe=None) -> ExperimentReport:
    """Decay of the section-family sup-deviation statistic.

    Per replication, draws one empirical measure and evaluates the exact
    sup over all x-atoms and thickenings of |int_S g d(Q - Q_n)| against the
    population sections; no empirical solves are involved.  The default probe
    is g = 1 (pure section-mass discrepancy).
    """
    t0 = time.perf_counter()
    pop = _build_population(config)
    phi = 0.5 * np.einsum("ij,ij->i", pop.grid.points, pop.grid.points) - pop.pot.f
    psi = 0.5 * np.einsum("ij,ij->i", pop.grid.points, pop.grid.points) - pop.pot.g
    if probe is None:
        def probe(pts):
            return np.ones(pts.shape[0])

    def body(n, rep):
        Q_n = sample_empirical(
            config.population, n, derive_seed(config.master_seed, n, rep, _Y_ROLE)
        )
        stat = vc_sup_deviation(pop.problem, (phi, psi), Q_n, probe)
        return {"stat": stat}, stat

    records, outcomes, failures, total = _replication_loop(config, body)
    per_n, medians = {}, []
    for n in config.sample_sizes:
        vals = outcomes[n]
        med = float(np.median(vals)) if vals else float("nan")
        medians.append(med)
        per_n[n] = {"completed": len(vals), "median_stat": med}
    slope, stderr = (
        fit_rate(config.sample_sizes, medians)
        if len(config.sample_sizes) >= 3
        else (float("nan"), float("nan"))
    )
    rate = {"slope": slope, "stderr": stderr}
    assertions = {}
    bands = config.assertions
    if "slope_min" in bands or "slope_max" in bands:
        assertions["slope_in_band"] = (
            bands.get("slope_min", float("-inf"))
            <= slope
            <= bands.get("slope_max", float("inf"))
        )
    return _finish(
        config, "vc_rate", per_n, records, {}, rate, assertions, failures, total, t0
    )


def _coupling_integral(problem: QotProblem, pot: PotentialPair, u, v) -> float:
    """int u(x) v(y) d(coupling) = sum p_i u_i q_j v_j (xi_ij)_+ / eps."""
    return (
        _kernels.hinge_weighted_sum(
            problem.cost, pot.f, pot.g, problem.p * u, problem.q * v
        )
        / problem.epsilon
    )


def run_coupling_clt(config: ExperimentConfig) -> ExperimentReport:
    """CLT for a linear coupling statistic int eta d(pi_n - pi).

    The theoretical limit has variance sigma2(eta) / eps^2; the report records
    the Monte Carlo variance of sqrt(n) * (integral error), their ratio, and a
    KS distance of the errors normalized by the *theoretical* scale.
    """
    if config.eta is None:
        raise InputError("run_coupling_clt needs config.eta")
    t0 = time.perf_counter()
    pop = _build_population(config)
    model = build_limit_model(pop.problem, pop.pot)
    sigma2_eta = coupling_functional_variance(
        model, config.eta.matrix(pop.grid.points, pop.grid.points)
    )
    limit_var = sigma2_eta / config.epsilon**2
    u_pop, v_pop = config.eta.factor_values(pop.grid.points, pop.grid.points)
    pop_integral = _coupling_integral(pop.problem, pop.pot, u_pop, v_pop)
    scale = float(np.sqrt(limit_var))

    def body(n, rep):
        P_n, Q_n = _draw_pair(config, n, rep)
        problem, pot = _solve_empirical(config, pop, P_n, Q_n)
        u, v = config.eta.factor_values(P_n.points, Q_n.points)
        integral_hat = _coupling_integral(problem, pot, u, v)
        delta = float(np.sqrt(n)) * (integral_hat - pop_integral)
        rec = {
            "integral_hat": integral_hat,
            "scaled_err": delta,
            "norm_err": delta / scale if scale > 0 else 0.0,
        }
        return rec, rec

    records, outcomes, failures, total = _replication_loop(config, body)
    per_n = {}
    for n, vals in outcomes.items():
        if not vals:
            per_n[n] = {"completed": 0}
            continue
        scaled = np.array([v["scaled_err"] for v in vals])
        mc_var = float(scaled.var(ddof=1))
        norm_errs = [v["norm_err"] for v in vals]
        per_n[n] = {
            "completed": len(vals),
            "mc_variance": mc_var,
            "variance_ratio": mc_var / limit_var if limit_var > 0 else float("nan"),
            "ks_normalized": ks_distance(norm_errs) if len(norm_errs) >= 10 else None,
            "norm_errs": norm_errs,
        }
    extras = {
        "population_integral": pop_integral,
        "sigma2_eta": sigma2_eta,
        "limit_variance": limit_var,
    }
    assertions = {}
    bands = config.assertions
    if "var_ratio_min" in bands or "var_ratio_max" in bands:
        ratio = per_n[max(config.sample_sizes)].get("variance_ratio")
        assertions["variance_ratio_in_band"] = (
            ratio is not None
            and bands.get("var_ratio_min", 0.0) <= ratio <= bands.get("var_ratio_max", float("inf"))
        )
    if "ks_max" in bands:
        ks = per_n[max(config.sample_sizes)].get("ks_normalized")
        assertions["ks_at_largest_n"] = ks is not None and ks <= bands["ks_max"]
    return _finish(
        config, "coupling_clt", per_n, records, extras, None, assertions, failures, total, t0
    )


def run_consistency(config: ExperimentConfig) -> ExperimentReport:
    """One nested-sample trajectory of the potential error over increasing n.

    The same underlying draws are reused as prefixes (sample n contains sample
    n' for n' < n), so the error sequence tracks a single 'data stream' the
    way the almost-sure statement reads.  Asserts final error < first error.
    """
    t0 = time.perf_counter()
    pop = _build_population(config)
    n_max = max(config.sample_sizes)
    base_X = sample_empirical(
        config.population, n_max, derive_seed(config.master_seed, n_max, 0, _X_ROLE)
    )
    base_Y = sample_empirical(
        config.population, n_max, derive_seed(config.master_seed, n_max, 0, _Y_ROLE)
    )
    grid_pts = pop.grid.points

    records = []
    errors = []
    failures = 0
    for n in config.sample_sizes:
        P_n = DiscreteMeasure(base_X.points[:n], np.full(n, 1.0 / n))
        Q_n = DiscreteMeasure(base_Y.points[:n], np.full(n, 1.0 / n))
        try:
            problem, pot = _solve_empirical(config, pop, P_n, Q_n)
        except NotConvergedError:
            failures += 1
            raise
        f_on_grid = extend_potential(grid_pts, problem.Q, pot.g, config.epsilon)
        g_on_grid = extend_potential(grid_pts, problem.P, pot.f, config.epsilon)
        err = _sup_pair_error(pop, f_on_grid, g_on_grid)
        errors.append(err)
        records.append({"n": n, "err": err, "failed": False})

    per_n = {
        n: {"err": errors[k], "completed": 1} for k, n in enumerate(config.sample_sizes)
    }
    assertions = {"final_error_lt_first": bool(errors[-1] < errors[0])}
    extras = {"first_error": errors[0], "final_error": errors[-1]}
    return _finish(
        config,
        "consistency",
        per_n,
        records,
        extras,
        None,
        assertions,
        failures,
        len(config.sample_sizes),
        t0,
    )


# ---------------------------------------------------------------------------
# serialization (text builders; atomic writing is the CLI's job)
# ---------------------------------------------------------------------------

_CSV_FIELDS = {
    "cost_clt": ("n", "rep", "cost_hat", "sigma2_hat", "covered", "norm_err"),
    "potential_rate": ("n", "rep", "err"),
    "vc_rate": ("n", "rep", "stat"),
    "coupling_clt": ("n", "rep", "integral_hat", "norm_err"),
    "consistency": ("n", "err"),
}


def _render(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_json_text(report: ExperimentReport) -> str:
    return json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"


def records_csv_text(report: ExperimentReport) -> str:
    """Per-replication records; failed replications are omitted (they carry
    no statistics) but remain visible in the JSON report."""
    fields = _CSV_FIELDS[report.kind]
    buf = io.StringIO()
    buf.write("# format_version: 1\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for rec in report.records:
        if rec.get("failed"):
            continue
        writer.writerow([_render(rec[f]) for f in fields])
    return buf.getvalue()


def qq_csv_text(report: ExperimentReport) -> str | None:
    """QQ plot data (normalized errors at the largest n vs normal quantiles)."""
    ns = [n for n in report.per_n if report.per_n[n].get("norm_errs")]
    if not ns:
        return None
    n = max(ns)
    errs = np.sort(np.asarray(report.per_n[n]["norm_errs"]))
    k = errs.shape[0]
    theo = ndtri((np.arange(1, k + 1) - 0.5) / k)
    buf = io.StringIO()
    buf.write("# format_version: 1\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["theoretical_q", "empirical_q"])
    for t, e in zip(theo, errs):
        writer.writerow([repr(float(t)), repr(float(e))])
    return buf.getvalue()


def rate_csv_text(report: ExperimentReport) -> str | None:
    """Rate-curve plot data: n against the per-n central error statistic."""
    key_by_kind = {
        "potential_rate": "median_err",
        "vc_rate": "median_stat",
        "consistency": "err",
        "cost_clt": "median_abs_err",
    }
    key = key_by_kind.get(report.kind)
    if key is None:
        return None
    buf = io.StringIO()
    buf.write("# format_version: 1\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n", key])
    for n in sorted(report.per_n):
        val = report.per_n[n].get(key)
        if val is None:
            continue
        writer.writerow([n, repr(float(val))])
    return buf.getvalue()


def write_report_files(out_dir, report: ExperimentReport) -> list:
    """Plain (non-atomic) writer used by tests; returns the paths written."""
    import os

    paths = []
    items = [("report.json", report_json_text(report)), ("records.csv", records_csv_text(report))]
    qq = qq_csv_text(report)
    if qq is not None:
        items.append(("qq.csv", qq))
    rc = rate_csv_text(report)
    if rc is not None:
        items.append(("rate.csv", rc))
    for name, text in items:
        path = os.path.join(out_dir, name)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        paths.append(path)
    return paths
