"""Command-line interface: scenario runs, comparisons and oracle checks.

Exit codes: 0 success, 1 scenario/validation failure, 2 solver
non-convergence, 3 a check exceeded its tolerance.

Output is deterministic for a fixed scenario and configuration; JSON carries a
``generated_at`` timestamp which consumers should exclude when hashing.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import equilibrium as eq
from . import oracle
from .dispatch import DispatchError, DispatchSolution, solve_dispatch
from .network import validate_network
from .scenario import ParsedScenario, ScenarioError, packaged_scenario_dir, parse_scenario

SCENARIO_DIR_ENV = "EVMARKET_SCENARIO_DIR"

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NO_CONVERGENCE = 2
EXIT_CHECK_FAILED = 3


@dataclass
class RunConfig:
    """Parsed invocation; every tolerance is overridable from the command line."""

    command: str
    scenario: str
    concept: str = "ne"
    population: str | None = None     # None = infer from the scenario
    storage: dict[tuple[int, int], float] = field(default_factory=dict)
    tol: float = 1e-6
    internal_tol: float = 1e-8
    epsilon: float = 1e-5
    max_iter: int = 10_000
    oracle_n: int = 200
    oracle_tol: float | None = None   # None = 3 / oracle_n
    points: int = 5
    step: float = 1e-4
    grad_tol: float = 1e-3
    seed: int = 0
    out_format: str = "table"
    output: str | None = None
    timestamp: bool = True

    def __post_init__(self):
        for name in ("tol", "internal_tol", "epsilon", "step", "grad_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.oracle_tol is not None and self.oracle_tol <= 0:
            raise ValueError("oracle_tol must be positive")


def resolve_scenario(name: str) -> Path:
    """Look for a scenario by path, then in $EVMARKET_SCENARIO_DIR, then in
    the packaged corpus."""
    direct = Path(name)
    if direct.exists():
        return direct
    candidates = []
    env_dir = os.environ.get(SCENARIO_DIR_ENV)
    if env_dir:
        candidates.append(Path(env_dir) / name)
    candidates.append(packaged_scenario_dir() / name)
    for cand in candidates:
        if cand.exists():
            return cand
    raise ScenarioError(f"scenario file not found: {name}")


def _infer_population(scn: ParsedScenario, requested: str | None) -> str:
    pop = scn.population
    if requested is not None:
        if requested == "commuter" and not pop.has_commuters:
            raise ScenarioError("scenario has no commuter population")
        if requested == "ondemand" and not pop.has_ondemand:
            raise ScenarioError("scenario has no on-demand population")
        return requested
    if pop.has_commuters and pop.has_ondemand:
        return "hybrid"
    if pop.has_ondemand:
        return "ondemand"
    return "commuter"


def _emit(config: RunConfig, payload: dict, table: str, csv_text: str) -> None:
    if config.out_format == "json":
        if config.timestamp:
            payload = dict(payload)
            payload["generated_at"] = datetime.now(timezone.utc).isoformat()
        text = json.dumps(payload, indent=2, sort_keys=True)
    elif config.out_format == "csv":
        text = csv_text
    else:
        text = table
    if config.output:
        Path(config.output).write_text(text + "\n")
    else:
        print(text)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def _render_table(headers: list[str], rows: list[list]) -> str:
    cells = [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[k]) for r in cells)) if cells else len(h)
              for k, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[k]) for k, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(row[k].ljust(widths[k]) for k in range(len(headers))))
    return "\n".join(lines)


def _render_csv(headers: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(headers)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue().rstrip("\n")


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------

def _cmd_validate(config: RunConfig, scn: ParsedScenario) -> int:
    report = validate_network(scn.network)
    for w in scn.warnings:
        print(f"warning: {w}")
    print(str(report))
    return EXIT_OK if report.ok else EXIT_INVALID


def _dispatch_rows(sol: DispatchSolution):
    n = sol.n
    rows = [["objective", "", "", "", sol.J]]
    for t in range(2):
        lam = sol.lambda1 if t == 0 else sol.lambda2
        for i in range(n):
            rows.append(["lmp", i + 1, "", t + 1, float(lam[i])])
    for name, arr in (("generation", sol.g), ("load", sol.d), ("injection", sol.p)):
        for t in range(2):
            for i in range(n):
                rows.append([name, i + 1, "", t + 1, float(arr[i, t])])
    for t in range(2):
        for r in range(n * n):
            i, j = divmod(r, n)
            rows.append(["storage_op", i + 1, j + 1, t + 1, float(sol.u[r, t])])
    for t in range(2):
        for k in range(sol.mu.shape[0]):
            rows.append(["line_dual", k + 1, "", t + 1, float(sol.mu[k, t])])
    return rows


def _cmd_dispatch(config: RunConfig, scn: ParsedScenario) -> int:
    net = scn.network
    S = np.zeros(net.n_routes)
    for (i, j), v in config.storage.items():
        if not (1 <= i <= net.n and 1 <= j <= net.n):
            raise ScenarioError(f"--storage route ({i},{j}) out of range 1..{net.n}")
        S[(i - 1) * net.n + (j - 1)] = v
    sol = solve_dispatch(net, S)
    headers = ["record", "origin_bus", "dest_bus", "period", "value"]
    rows = _dispatch_rows(sol)
    payload = {"command": "dispatch", "scenario": scn.name, "solution": sol.to_dict()}
    _emit(config, payload, _render_table(headers, rows), _render_csv(headers, rows))
    return EXIT_OK


def _solve(config: RunConfig, scn: ParsedScenario, concept: str, population: str):
    kwargs = {}
    if concept in ("sw", "ne"):
        kwargs = {"tol": config.internal_tol, "max_iter": config.max_iter}
    if concept == "ne":
        kwargs["epsilon"] = config.epsilon
    return eq.solve_concept(scn.network, scn.population, concept, population, **kwargs)


def _equilibrium_rows(res: eq.EquilibriumResult):
    n = res.n
    rows = [["concept", "", "", res.concept],
            ["J", "", "", res.J],
            ["residual", "", "", res.residual],
            ["threshold_flex", "", "", res.threshold_flex],
            ["total_storage", "", "", res.S.total()],
            ["iterations", "", "", res.telemetry.iterations],
            ["converged", "", "", int(res.telemetry.converged)]]
    for r in range(n * n):
        i, j = divmod(r, n)
        rows.append(["threshold_fix", i + 1, j + 1, float(res.thresholds_fix[i, j])])
    for name, store in (("S_fix", res.S_fix), ("S_flex", res.S_flex)):
        for r in range(n * n):
            i, j = divmod(r, n)
            rows.append([name, i + 1, j + 1, float(store.values[r])])
    for t, lam in ((1, res.lambda1), (2, res.lambda2)):
        for i in range(n):
            rows.append([f"lmp{t}", i + 1, "", float(lam[i])])
    if res.deviation_report is not None:
        rows.append(["deviation_max_gain", "", "", res.deviation_report.max_gain])
    return rows


def _cmd_equilibrium(config: RunConfig, scn: ParsedScenario) -> int:
    population = _infer_population(scn, config.population)
    res = _solve(config, scn, config.concept, population)
    headers = ["record", "origin_bus", "dest_bus", "value"]
    rows = _equilibrium_rows(res)
    payload = {"command": "equilibrium", "scenario": scn.name,
               "population": population, "result": res.to_dict()}
    _emit(config, payload, _render_table(headers, rows), _render_csv(headers, rows))
    if config.concept in ("sw", "ne") and not res.telemetry.converged:
        print(f"non-convergence: residual {res.residual:.3e} after "
              f"{res.telemetry.iterations} iterations", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def _cmd_compare(config: RunConfig, scn: ParsedScenario) -> int:
    population = _infer_population(scn, config.population)
    results = {c: _solve(config, scn, c, population) for c in ("myopic", "sw", "ne")}
    n = scn.network.n

    headers = ["record", "origin_bus", "dest_bus", "myopic", "sw", "ne"]
    rows = []
    for r in range(n * n):
        i, j = divmod(r, n)
        vals = [float(results[c].S.values[r]) for c in ("myopic", "sw", "ne")]
        if any(abs(v) > 1e-12 for v in vals):
            rows.append(["S", i + 1, j + 1, *vals])
    for r in range(n * n):
        i, j = divmod(r, n)
        rows.append(["threshold_fix", i + 1, j + 1,
                     *(float(results[c].thresholds_fix[i, j]) for c in ("myopic", "sw", "ne"))])
    rows.append(["threshold_flex", "", "",
                 *(results[c].threshold_flex for c in ("myopic", "sw", "ne"))])
    rows.append(["total_storage", "", "",
                 *(results[c].S.total() for c in ("myopic", "sw", "ne"))])
    rows.append(["J", "", "", *(results[c].J for c in ("myopic", "sw", "ne"))])
    rows.append(["residual", "", "", *(results[c].residual for c in ("myopic", "sw", "ne"))])

    myop_total = results["myopic"].S.total()
    ne_total = results["ne"].S.total()
    ordering = f"myopic total {myop_total:.6f} >= ne total {ne_total:.6f}: " \
               f"{myop_total >= ne_total - 1e-9}"
    thr_gap = _threshold_gap(results["sw"], results["ne"], scn)
    agreement = f"sw/ne threshold agreement: max |diff| = {thr_gap:.3e}"

    table = _render_table(headers, rows) + "\n" + ordering + "\n" + agreement
    payload = {"command": "compare", "scenario": scn.name, "population": population,
               "results": {c: results[c].to_dict() for c in results},
               "myopic_ge_ne": bool(myop_total >= ne_total - 1e-9),
               "sw_ne_threshold_gap": thr_gap}
    _emit(config, payload, table, _render_csv(headers, rows))

    if any(not results[c].telemetry.converged for c in ("sw", "ne")):
        return EXIT_NO_CONVERGENCE
    if thr_gap > 10 * config.tol:
        print(f"check failed: sw/ne thresholds differ by {thr_gap:.3e}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _threshold_gap(sw: eq.EquilibriumResult, ne: eq.EquilibriumResult,
                   scn: ParsedScenario) -> float:
    """Threshold disagreement on routes with population mass."""
    gap = 0.0
    for (i, j), dist in scn.population.commuter.items():
        if dist.finite_mass > 0:
            gap = max(gap, abs(float(sw.thresholds_fix[i, j] - ne.thresholds_fix[i, j])))
    if scn.population.has_ondemand:
        gap = max(gap, abs(sw.threshold_flex - ne.threshold_flex))
    return gap


def _cmd_gradient_check(config: RunConfig, scn: ParsedScenario) -> int:
    net = scn.network
    rng = np.random.default_rng(config.seed)
    headers = ["point", "origin_bus", "dest_bus", "analytic", "finite_difference",
               "abs_error", "kink_free"]
    rows = []
    worst = 0.0
    accepted = 0
    attempts = 0
    while accepted < config.points and attempts < 50 * config.points:
        attempts += 1
        S = rng.uniform(0.05, 0.6, net.n_routes)
        comp = oracle.compare_gradients(net, S, h=config.step)
        if not comp.kink_free.all():
            continue  # stencil straddles a kink; redraw
        accepted += 1
        worst = max(worst, comp.max_error)
        for r in range(net.n_routes):
            i, j = divmod(r, net.n)
            rows.append([accepted, i + 1, j + 1, float(comp.analytic[r]),
                         float(comp.central[r]),
                         float(abs(comp.analytic[r] - comp.central[r])),
                         int(comp.kink_free[r])])
    table = _render_table(headers, rows)
    verdict = (f"max |analytic - finite difference| = {worst:.3e} over "
               f"{accepted} points (tolerance {config.grad_tol:g})")
    payload = {"command": "gradient-check", "scenario": scn.name,
               "points": accepted, "max_error": worst, "tolerance": config.grad_tol}
    _emit(config, payload, table + "\n" + verdict, _render_csv(headers, rows))
    if accepted < config.points:
        print("could not find enough kink-free sample points", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK if worst <= config.grad_tol else EXIT_CHECK_FAILED


def _cmd_oracle_check(config: RunConfig, scn: ParsedScenario) -> int:
    population = _infer_population(scn, config.population)
    continuum = _solve(config, scn, "ne", population)
    pop = scn.population
    if population == "commuter":
        pop = pop.commuter_only()
    elif population == "ondemand":
        pop = pop.ondemand_only()
    atoms = oracle.discretize_population(pop, config.oracle_n)
    brd = oracle.best_response_dynamics(scn.network, atoms)
    tol = config.oracle_tol if config.oracle_tol is not None else 3.0 / config.oracle_n

    n = scn.network.n
    headers = ["origin_bus", "dest_bus", "S_oracle", "S_continuum", "abs_error"]
    rows = []
    worst = 0.0
    for r in range(n * n):
        i, j = divmod(r, n)
        s_o = float(brd.S.values[r])
        s_c = float(continuum.S.values[r])
        if abs(s_o) > 1e-12 or abs(s_c) > 1e-12:
            rows.append([i + 1, j + 1, s_o, s_c, abs(s_o - s_c)])
    worst = abs(brd.S.total() - continuum.S.total())
    table = _render_table(headers, rows)
    verdict = (f"atoms per class: {config.oracle_n}; rounds: {brd.rounds}; "
               f"|total oracle - continuum| = {worst:.4e} (tolerance {tol:g})")
    payload = {"command": "oracle-check", "scenario": scn.name,
               "population": population, "total_gap": worst, "tolerance": tol,
               "oracle": {"method": "oracle",
                          "atoms_per_class": config.oracle_n,
                          "rounds": brd.rounds,
                          "converged": brd.converged,
                          "S": brd.S.values.tolist()},
               "continuum": {"method": "solver",
                             "S": continuum.S.values.tolist(),
                             "converged": continuum.telemetry.converged}}
    _emit(config, payload, table + "\n" + verdict, _render_csv(headers, rows))
    if not brd.converged or not continuum.telemetry.converged:
        return EXIT_NO_CONVERGENCE
    return EXIT_OK if worst <= tol else EXIT_CHECK_FAILED


_COMMANDS = {
    "validate": _cmd_validate,
    "dispatch": _cmd_dispatch,
    "equilibrium": _cmd_equilibrium,
    "compare": _cmd_compare,
    "gradient-check": _cmd_gradient_check,
    "oracle-check": _cmd_oracle_check,
}


def run(config: RunConfig) -> int:
    """Execute one command; returns the process exit code."""
    try:
        path = resolve_scenario(config.scenario)
        scn = parse_scenario(path, validate=config.command != "validate")
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for w in scn.warnings:
        if config.command != "validate":
            print(f"warning: {w}", file=sys.stderr)
    try:
        return _COMMANDS[config.command](config, scn)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DispatchError, eq.ConvergenceError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE


def _parse_storage(values: list[str]) -> dict[tuple[int, int], float]:
    out: dict[tuple[int, int], float] = {}
    for item in values:
        try:
            route, val = item.split("=")
            i, j = route.split(",")
            out[(int(i), int(j))] = float(val)
        except ValueError:
            raise SystemExit(f"error: bad --storage entry {item!r}; expected i,j=value")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evmarket",
        description="Two-period dispatch and storage-participation equilibria "
                    "for EV mobile storage.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, population=True):
        p.add_argument("scenario", help="scenario file (path, $%s, or packaged name)"
                       % SCENARIO_DIR_ENV)
        p.add_argument("--format", choices=["table", "csv", "json"], default="table",
                       dest="out_format")
        p.add_argument("--output", "-o", default=None, help="write to file instead of stdout")
        p.add_argument("--no-timestamp", action="store_true",
                       help="omit generated_at from JSON output")
        p.add_argument("--tol", type=float, default=1e-6,
                       help="acceptance residual tolerance (default 1e-6)")
        p.add_argument("--internal-tol", type=float, default=1e-8,
                       help="solver fixed-point tolerance (default 1e-8)")
        p.add_argument("--epsilon", type=float, default=1e-5,
                       help="deviation-audit gain tolerance (default 1e-5)")
        p.add_argument("--max-iter", type=int, default=10_000)
        if population:
            p.add_argument("--population", choices=["commuter", "ondemand", "hybrid"],
                           default=None, help="default: infer from the scenario")

    p = sub.add_parser("validate", help="check scenario invariants")
    common(p, population=False)

    p = sub.add_parser("dispatch", help="solve the dispatch at a fixed storage profile")
    common(p, population=False)
    p.add_argument("--storage", "-s", action="append", default=[],
                   help="route capacity as i,j=value (1-based, repeatable)")

    p = sub.add_parser("equilibrium", help="solve one participation concept")
    common(p)
    p.add_argument("--concept", choices=["myopic", "sw", "ne"], default="ne")

    p = sub.add_parser("compare", help="myopic vs social welfare vs Nash side by side")
    common(p)

    p = sub.add_parser("gradient-check", help="storage-value gradient vs finite differences")
    common(p, population=False)
    p.add_argument("--points", type=int, default=5)
    p.add_argument("--step", type=float, default=1e-4, help="difference step (default 1e-4)")
    p.add_argument("--grad-tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("oracle-check", help="atomized best-response vs continuum equilibrium")
    common(p)
    p.add_argument("--oracle-n", type=int, default=200, help="atoms per class (default 200)")
    p.add_argument("--oracle-tol", type=float, default=None,
                   help="total-mass tolerance (default 3/N)")

    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        command=args.command,
        scenario=args.scenario,
        concept=getattr(args, "concept", "ne"),
        population=getattr(args, "population", None),
        storage=_parse_storage(getattr(args, "storage", [])),
        tol=args.tol,
        internal_tol=args.internal_tol,
        epsilon=args.epsilon,
        max_iter=args.max_iter,
        oracle_n=getattr(args, "oracle_n", 200),
        oracle_tol=getattr(args, "oracle_tol", None),
        points=getattr(args, "points", 5),
        step=getattr(args, "step", 1e-4),
        grad_tol=getattr(args, "grad_tol", 1e-3),
        seed=getattr(args, "seed", 0),
        out_format=args.out_format,
        output=args.output,
        timestamp=not args.no_timestamp,
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
