"""Command-line surface: solve instances, compute CIs, run experiment suites,
emit diagnostics.

Exit codes: 0 success, 1 input error, 2 convergence failure, 3 experiment
assertion failure (the report is still written).  All outputs carry a
``format_version`` field or header comment, use LF line endings and repr-exact
floats, and are written atomically (temp file + rename), so a failing command
never leaves partial files behind.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from .errors import NotConvergedError, QuadotError
from .measures import DiscreteMeasure, DomainSpec, quadrature_grid, read_measure_csv
from .solver import (
    QotProblem,
    PotentialPair,
    dual_objective,
    marginal_residuals,
    solve_alternating,
    to_convex_form,
)
from .coupling import (
    marginal_defects,
    primal_from_dual,
    primal_objective,
    support_stats,
    write_coupling_csv,
)
from .geometry import (
    lipschitz_beta_diagnostic,
    gradient_lipschitz_diagnostic,
    min_section_mass,
    write_diagnostics_csv,
)
from .limitlaw import cost_ci, cost_variance_plugin, covariance_form_gap
from . import experiments

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOT_CONVERGED = 2
EXIT_ASSERTION = 3


# ---------------------------------------------------------------------------
# small IO helpers
# ---------------------------------------------------------------------------


def _write_atomic_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_atomic_with(path: str, writer) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_text(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def potentials_csv_text(pot: PotentialPair) -> str:
    buf = io.StringIO()
    buf.write("# format_version: 1\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["kind", "index", "value"])
    for k, v in enumerate(pot.f):
        writer.writerow(["f", k, repr(float(v))])
    for k, v in enumerate(pot.g):
        writer.writerow(["g", k, repr(float(v))])
    return buf.getvalue()


def read_potentials_csv(path: str) -> PotentialPair:
    from .errors import InputError

    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    if not rows or [c.strip() for c in rows[0]] != ["kind", "index", "value"]:
        raise InputError(f"{path}: expected header kind,index,value")
    vals = {"f": {}, "g": {}}
    for r, row in enumerate(rows[1:]):
        if len(row) != 3 or row[0] not in vals:
            raise InputError(f"{path}: bad row {r + 2}")
        try:
            vals[row[0]][int(row[1])] = float(row[2])
        except ValueError as exc:
            raise InputError(f"{path}: row {r + 2}: {exc}") from exc
    out = []
    for kind in ("f", "g"):
        d = vals[kind]
        if sorted(d) != list(range(len(d))):
            raise InputError(f"{path}: {kind} indices must be 0..{len(d) - 1}")
        out.append(np.array([d[k] for k in range(len(d))]))
    return PotentialPair(out[0], out[1])


def _load_measure(path: str) -> DiscreteMeasure:
    from .errors import InputError

    if not os.path.exists(path):
        raise InputError(f"no such file: {path}")
    return read_measure_csv(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_solve(args) -> int:
    P = _load_measure(args.p)
    Q = _load_measure(args.q)
    problem = QotProblem(P, Q, args.epsilon)
    initial = read_potentials_csv(args.warm_start) if args.warm_start else None
    converged = True
    try:
        pot, report = solve_alternating(
            problem, tol=args.tol, max_sweeps=args.max_sweeps, initial=initial
        )
    except NotConvergedError as exc:
        pot = exc.potentials
        report = exc.report
        converged = False
        print(f"solve: {exc}", file=sys.stderr)

    coupling = primal_from_dual(problem, pot)
    primal = primal_objective(problem, coupling)
    dual = dual_objective(problem, pot)
    count, fill, max_density = support_stats(coupling)
    defect_p, defect_q = marginal_defects(problem, coupling)
    summary = {
        "format_version": 1,
        "epsilon": problem.epsilon,
        "n": problem.n,
        "m": problem.m,
        "cost": primal,
        "dual_value": dual,
        "gap": primal - dual,
        "residual": report.final_residual,
        "marginal_defect_max": max(
            float(np.max(np.abs(defect_p))), float(np.max(np.abs(defect_q)))
        ),
        "support_count": count,
        "fill_ratio": fill,
        "max_density": max_density,
        "iterations": report.iterations,
        "converged": converged,
    }
    out = args.out
    os.makedirs(out, exist_ok=True)
    _write_atomic_text(os.path.join(out, "potentials.csv"), potentials_csv_text(pot))
    _write_atomic_with(
        os.path.join(out, "coupling.csv"), lambda tmp: write_coupling_csv(tmp, coupling)
    )
    _write_atomic_text(os.path.join(out, "summary.json"), _json_text(summary))
    return EXIT_OK if converged else EXIT_NOT_CONVERGED


def cmd_ci(args) -> int:
    from .errors import InputError

    P_n = _load_measure(args.p)
    Q_n = _load_measure(args.q)
    if P_n.size != Q_n.size:
        raise InputError(
            f"the CI needs equal sample sizes; got {P_n.size} and {Q_n.size}"
        )
    n = P_n.size
    problem = QotProblem(P_n, Q_n, args.epsilon)
    pot, _ = solve_alternating(problem, tol=args.tol, max_sweeps=args.max_sweeps)
    cost_hat = dual_objective(problem, pot)
    sigma2_hat = cost_variance_plugin(problem, pot)
    ci = cost_ci(cost_hat, sigma2_hat, n, args.level)
    payload = {
        "format_version": 1,
        "n": n,
        "epsilon": problem.epsilon,
        "level": ci.level,
        "cost_hat": cost_hat,
        "sigma2_hat": sigma2_hat,
        "half_width": ci.half_width,
        "lower": ci.lower,
        "upper": ci.upper,
    }
    os.makedirs(args.out, exist_ok=True)
    _write_atomic_text(os.path.join(args.out, "ci.json"), _json_text(payload))
    return EXIT_OK


_RUNNERS = {
    "cost_clt": experiments.run_cost_clt,
    "potential_rate": experiments.run_potential_rate,
    "vc_rate": experiments.run_vc_rate,
    "coupling_clt": experiments.run_coupling_clt,
    "consistency": experiments.run_consistency,
}


def cmd_clt_sim(args) -> int:
    from .errors import InputError

    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise InputError(f"no such config: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.config}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InputError("config must be a JSON object")
    kind = raw.pop("experiment", None)
    if kind not in _RUNNERS:
        raise InputError(
            f"config needs \"experiment\" set to one of {sorted(_RUNNERS)}; got {kind!r}"
        )
    if args.seed is not None:
        raw["master_seed"] = args.seed
    config = experiments.ExperimentConfig.from_dict(raw)
    report = _RUNNERS[kind](config)

    os.makedirs(args.out, exist_ok=True)
    _write_atomic_text(
        os.path.join(args.out, "report.json"), experiments.report_json_text(report)
    )
    _write_atomic_text(
        os.path.join(args.out, "records.csv"), experiments.records_csv_text(report)
    )
    qq = experiments.qq_csv_text(report)
    if qq is not None:
        _write_atomic_text(os.path.join(args.out, "qq.csv"), qq)
    rc = experiments.rate_csv_text(report)
    if rc is not None:
        _write_atomic_text(os.path.join(args.out, "rate.csv"), rc)
    if not report.passed:
        print(
            "clt-sim: assertions failed: "
            + ", ".join(k for k, v in report.assertions.items() if not v),
            file=sys.stderr,
        )
        return EXIT_ASSERTION
    return EXIT_OK


def _diagnostic_rows(problem: QotProblem, tol, max_sweeps, param: str):
    pot, _ = solve_alternating(problem, tol=tol, max_sweeps=max_sweeps)
    pot_convex = to_convex_form(pot, problem.P.points, problem.Q.points)
    coupling = primal_from_dual(problem, pot)
    count, fill, max_density = support_stats(coupling)
    eps = problem.epsilon
    betas = np.linspace(0.0, eps, 9)
    rows = [
        ("cost", param, primal_objective(problem, coupling)),
        ("dual_value", param, dual_objective(problem, pot)),
        ("min_section_mass", param, min_section_mass(problem, pot_convex)),
        ("fill_ratio", param, fill),
        ("support_count", param, count),
        ("max_density", param, max_density),
        (
            "lipschitz_beta",
            param + (";" if param else "") + f"beta=0..{eps}",
            lipschitz_beta_diagnostic(problem, pot_convex, betas),
        ),
    ]
    grad_l, mass_l = gradient_lipschitz_diagnostic(problem, pot_convex)
    rows.append(("gradient_lipschitz", param, grad_l))
    rows.append(("section_mass_lipschitz", param, mass_l))
    rows.append(("cost_sigma2", param, cost_variance_plugin(problem, pot)))
    gap_q, gap_p = covariance_form_gap(problem, pot)
    rows.append(("covariance_form_gap_Q", param, gap_q))
    rows.append(("covariance_form_gap_P", param, gap_p))
    r_f, r_g = marginal_residuals(problem, pot)
    rows.append(
        (
            "residual",
            param,
            max(float(np.max(np.abs(r_f))), float(np.max(np.abs(r_g)))),
        )
    )
    return rows


def cmd_diagnose(args) -> int:
    from .errors import InputError

    rows = []
    if args.p or args.q:
        if not (args.p and args.q):
            raise InputError("--p and --q must be given together")
        problem = QotProblem(_load_measure(args.p), _load_measure(args.q), args.epsilon)
        rows.extend(_diagnostic_rows(problem, args.tol, args.max_sweeps, ""))
    elif args.grid:
        spec = DomainSpec.uniform_box(np.zeros(args.dim), np.ones(args.dim))
        for m_axis in dict.fromkeys([args.grid, max(args.grid // 2, 1)]):
            grid = quadrature_grid(spec, m_axis)
            problem = QotProblem(grid, grid, args.epsilon)
            rows.extend(
                _diagnostic_rows(problem, args.tol, args.max_sweeps, f"m={m_axis}")
            )
    else:
        raise InputError("diagnose needs either --p/--q or --grid")
    os.makedirs(args.out, exist_ok=True)
    _write_atomic_with(
        os.path.join(args.out, "diagnostics.csv"),
        lambda tmp: write_diagnostics_csv(tmp, rows),
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


def _add_solver_flags(sp, need_epsilon: bool):
    sp.add_argument("--epsilon", type=float, required=need_epsilon, help="regularization strength (> 0)")
    sp.add_argument("--tol", type=float, default=None, help="residual tolerance (default 1e-9 * epsilon)")
    sp.add_argument("--max-sweeps", type=int, default=2000, dest="max_sweeps")
    sp.add_argument("--out", default=".", help="output directory")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quadot",
        description="Quadratically regularized optimal transport: solve, infer, simulate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("solve", help="solve one instance from two measure CSVs")
    sp.add_argument("--p", required=True, help="first marginal CSV (x1..xd,w)")
    sp.add_argument("--q", required=True, help="second marginal CSV")
    sp.add_argument("--warm-start", dest="warm_start", default=None, help="potentials.csv to start from")
    _add_solver_flags(sp, need_epsilon=True)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("ci", help="plug-in confidence interval for the cost from two sample CSVs")
    sp.add_argument("--p", required=True)
    sp.add_argument("--q", required=True)
    sp.add_argument("--level", type=float, default=0.95)
    _add_solver_flags(sp, need_epsilon=True)
    sp.set_defaults(func=cmd_ci)

    sp = sub.add_parser("clt-sim", help="run a Monte Carlo experiment from a config JSON")
    sp.add_argument("--config", required=True, help="experiment config JSON")
    sp.add_argument("--seed", type=int, default=None, help="override master_seed")
    sp.add_argument("--threads", type=int, default=None, help="cap the numba thread pool")
    sp.add_argument("--out", default=".", help="output directory")
    sp.set_defaults(func=cmd_clt_sim)

    sp = sub.add_parser("diagnose", help="geometry diagnostics for an instance or a grid population")
    sp.add_argument("--p", default=None)
    sp.add_argument("--q", default=None)
    sp.add_argument("--grid", type=int, default=None, help="uniform-box grid resolution (runs m and m/2)")
    sp.add_argument("--dim", type=int, default=1)
    _add_solver_flags(sp, need_epsilon=True)
    sp.set_defaults(func=cmd_diagnose)

    return parser


def _apply_threads(args) -> None:
    threads = getattr(args, "threads", None)
    if threads is None:
        return
    try:
        import numba

        numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))
    except Exception:
        pass  # kernels are single-threaded; the cap is best-effort


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    _apply_threads(args)
    try:
        return args.func(args)
    except NotConvergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except QuadotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
