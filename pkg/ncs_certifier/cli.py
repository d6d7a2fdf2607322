"""Command line interface for the certifier."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

from . import __version__
from .lmi import ASSEMBLERS, AssemblyError
from .lyapunov import VARIANTS, FunctionalSpec, VerificationError, verify_runs
from .model import DimensionError, NetworkModel, vertex_models
from .protocols import RoundRobinProtocol, TodProtocol
from .scenario import Scenario, ScenarioError, list_bundled, load_scenario
from .sdp import BACKENDS, CertificateWitness, SolverError, SolverOptions, default_backend, solve_feasibility, verify_witness
from .sdpa import SdpaFormatError, round_trip_check
from .search import CSV_COLUMNS, PUBLISHED_TABLES, SearchError, SearchSpec, SolverHealthError, max_tau, table_run
from .simulator import (
    FixedTiming,
    GridSweepTiming,
    PiecewiseConstantSignal,
    SimulationError,
    TimingError,
    UniformRandomTiming,
    generate_timing,
    simulate,
    trajectory_to_rows,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_HEALTH = 3
DEFAULT_SEED = 0


def output_path(path: Path) -> Path:
    """Relative paths land in ``NCS_CERTIFIER_OUTPUT_DIR`` when it is set."""

    base = os.environ.get("NCS_CERTIFIER_OUTPUT_DIR")
    path = Path(path).expanduser()
    if base and not path.is_absolute():
        path = Path(base).expanduser() / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def header_line(scenario: Scenario | None, **params) -> str:
    digest = scenario.digest[:12] if scenario is not None else "-"
    rendered = " ".join(f"{key}={value}" for key, value in params.items())
    return f"ncs-certifier {__version__} scenario={digest} params={rendered}"


def write_csv(path: Path, header: str, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = output_path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        handle.write(f"# {header}\n")
        writer = csv.writer(handle)
        writer.writerow(columns)
        writer.writerows(rows)
    logger.info("wrote %s", path)
    return path


def parse_floats(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def parse_timing(text: str, seed: int):
    kind, _, rest = text.partition(":")
    try:
        if kind == "fixed":
            h, eta = parse_floats(rest)
            return FixedTiming(h=h, eta=eta)
        if kind == "random":
            return UniformRandomTiming(seed=int(rest) if rest else seed)
        if kind == "grid":
            return GridSweepTiming(levels=int(rest) if rest else 3)
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise argparse.ArgumentTypeError(f"malformed timing {text!r}: {exc}") from exc
    raise argparse.ArgumentTypeError(f"unknown timing {text!r}; use fixed:h,eta, random[:seed] or grid[:levels]")


def format_search(result, scenario: Scenario, theorem: str) -> str:
    lines = [f"Maximum tau_M for {scenario.name} ({theorem})", "=" * 60]
    for row in result.rows:
        value = "-" if row.tau_max is None else f"{row.tau_max:.4f}"
        lines.append(
            f" eta_m={row.eta_m:<8g} tau_max={value:<8} {row.status:<12} "
            f"probes={len(row.trace):<3} vars={row.decision_variables} {row.seconds:.1f}s"
        )
    lines.extend(f"note: {note}" for note in result.notes)
    return "\n".join(lines)


def _solver(args) -> SolverOptions:
    return SolverOptions(backend=args.backend, seed=args.seed, verbose=args.verbose > 1)


def cmd_search(args) -> int:
    scenario = load_scenario(args.scenario)
    disturbance = scenario.analysis.disturbance if args.disturbance is None else args.disturbance
    alpha = scenario.analysis.alpha if args.alpha is None else args.alpha
    spec = SearchSpec(
        scenario=scenario,
        theorem=args.theorem,
        eta_m=tuple(args.eta_m or [scenario.network.eta_m]),
        alpha=alpha,
        tau_lo=args.tau_lo,
        tau_hi=args.tau_hi,
        tol=args.tol,
        disturbance=disturbance,
        strict=args.strict,
        solver=_solver(args),
    )
    result = max_tau(spec, workers=args.workers)
    print(format_search(result, scenario, args.theorem))
    header = header_line(scenario, theorem=args.theorem, alpha=alpha, disturbance=disturbance, tol=args.tol, seed=args.seed)
    if args.out:
        write_csv(args.out, header, CSV_COLUMNS, result.csv_rows())
    if args.witness_out:
        best = max((r for r in result.rows if r.witness is not None), key=lambda r: r.tau_max)
        data = {"header": header, "scenario": scenario.name, **best.witness.to_dict(best.problem)}
        path = output_path(args.witness_out)
        path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
        logger.info("wrote witness at tau_M=%.6g to %s", best.tau_max, path)
    return EXIT_OK if all(r.tau_max is not None for r in result.rows) else EXIT_FAIL


def cmd_table(args) -> int:
    table = table_run(args.id, theorems=args.theorems, solver=_solver(args), workers=args.workers, tol=args.tol)
    print(table.to_text())
    if args.out:
        scenario = load_scenario(PUBLISHED_TABLES[args.id]["scenario"])
        header = header_line(scenario, table=args.id, tol=args.tol, seed=args.seed)
        write_csv(args.out, header, CSV_COLUMNS, table.result.csv_rows())
    return EXIT_OK if all(table.checks().values()) else EXIT_FAIL


def _build_protocol(name: str, node_dims: Sequence[int], weights=None):
    if name == "rr":
        return RoundRobinProtocol.natural(len(node_dims))
    if weights is not None:
        return TodProtocol(tuple(weights))
    return TodProtocol.identity(node_dims)


def _load_witness(path: Path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read witness: {exc}", source=str(path)) from exc
    if "matrices" not in data or not data.get("params"):
        raise ScenarioError("witness file lacks matrices or params; write it with search --witness-out", source=str(path))
    return data


def _pick_model(scenario: Scenario, vertex: int):
    models = vertex_models(scenario.closed_loop())
    if not 1 <= vertex <= len(models):
        raise ValueError(f"vertex {vertex} out of range 1..{len(models)}")
    return models[vertex - 1]


def _x0(text: str | None, n: int) -> np.ndarray:
    if text is None:
        return np.ones(n)
    return np.asarray(parse_floats(text), dtype=float)


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    cl = _pick_model(scenario, args.vertex)
    net = scenario.network if args.tau_m is None else scenario.network.with_span(args.tau_m)
    weights = None
    if args.witness:
        matrices = _load_witness(args.witness)["matrices"]
        weights = [np.asarray(matrices[f"Q{i + 1}"], dtype=float) for i in range(cl.nodes)]
    protocol = _build_protocol(args.protocol or scenario.protocol, cl.node_dims, weights)
    policy = parse_timing(args.timing, args.seed)
    timing = generate_timing(net, policy, horizon=args.horizon)
    delta = scenario.analysis.delta if args.delta is None else args.delta
    if cl.q and delta > 0:
        signal = PiecewiseConstantSignal.random_bounded(cl.q, delta, net.tau_m, args.horizon + net.tau_m, args.seed)
    else:
        signal = PiecewiseConstantSignal.zero(cl.q)
    tr = simulate(cl, net, protocol, timing, signal, _x0(args.x0, scenario.plant.n), args.horizon)
    grid = np.arange(tr.t0, tr.t_end, args.step)
    columns, rows = trajectory_to_rows(tr, grid)
    x_end = tr.segments[-1].x_end
    print(f"Simulated {scenario.name}: {len(tr.segments)} segments on [{tr.t0:.6g}, {tr.t_end:.6g}]")
    print(f"|x(t_end)| / |x(0)| = {np.linalg.norm(x_end) / max(np.linalg.norm(tr.x0), 1e-300):.6e}")
    if args.out:
        header = header_line(
            scenario, protocol=protocol.name, timing=args.timing, horizon=args.horizon, delta=delta, seed=args.seed
        )
        write_csv(args.out, header, columns, rows)
    return EXIT_OK


def _network_for(scenario: Scenario, eta_m: float, tau_m: float, nodes: int) -> NetworkModel:
    mad = scenario.network.mad if eta_m <= scenario.network.mad < tau_m else eta_m
    return NetworkModel(eta_m=eta_m, mad=mad, tau_m=tau_m, nodes=nodes)


def cmd_verify(args) -> int:
    scenario = load_scenario(args.scenario)
    data = _load_witness(args.witness)
    witness = CertificateWitness.from_dict(data)
    params = witness.params
    if not witness.feasible:
        print(f"witness status is {witness.status.value}; nothing to verify")
        return EXIT_FAIL
    full = scenario.closed_loop()
    net = _network_for(scenario, params.eta_m, params.tau_m, params.nodes)
    problem = ASSEMBLERS[params.theorem](full, net, alpha=params.alpha, disturbance=params.disturbance)
    margins = verify_witness(problem, witness.x)
    if min(v for _, v in margins) < problem.epsilon:
        raise SolverHealthError(f"stored witness fails re-verification against {scenario.name}")
    variant = args.variant or ("tod-n" if params.theorem == "t1" else "n2" if params.nodes == 2 else "rr-n")
    spec = FunctionalSpec.build(
        variant, data["matrices"], alpha=params.alpha, eta_m=params.eta_m, tau_m=params.tau_m, nodes=params.nodes
    )
    cl = _pick_model(scenario, args.vertex)
    protocol_name = "rr" if variant == "rr-n" else "tod" if variant == "tod-n" else (args.protocol or scenario.protocol)
    protocol = _build_protocol(protocol_name, cl.node_dims, spec.Q)
    delta = scenario.analysis.delta if args.delta is None else args.delta
    reports, passed = verify_runs(
        cl,
        net,
        spec,
        protocol,
        runs=args.runs,
        seed=args.seed,
        horizon=args.horizon,
        delta=delta,
        x0=_x0(args.x0, scenario.plant.n),
        grid_points=args.grid_points,
        iss=args.iss,
        workers=args.workers,
    )
    header = header_line(
        scenario, variant=variant, runs=args.runs, horizon=args.horizon, delta=delta, seed=args.seed, iss=args.iss
    )
    lines = [header, f"overall: {'PASS' if passed else 'FAIL'}", ""]
    for run, report in enumerate(reports):
        lines.append(f"[run {run} seed {args.seed + run}]")
        lines.append(report.to_text())
        lines.append("")
    text = "\n".join(lines)
    print(f"{scenario.name} {variant}: {sum(r.passed for r in reports)}/{len(reports)} runs PASS")
    if args.report:
        path = output_path(args.report)
        path.write_text(text, encoding="utf-8")
        logger.info("wrote report %s", path)
    else:
        print(text)
    return EXIT_OK if passed else EXIT_FAIL


def cmd_export(args) -> int:
    scenario = load_scenario(args.scenario)
    eta_m = scenario.network.eta_m if args.eta_m is None else args.eta_m
    tau_m = scenario.network.tau_m if args.tau_m is None else args.tau_m
    alpha = scenario.analysis.alpha if args.alpha is None else args.alpha
    net = _network_for(scenario, eta_m, tau_m, scenario.network.nodes)
    problem = ASSEMBLERS[args.theorem](scenario.closed_loop(), net, alpha=alpha, disturbance=scenario.analysis.disturbance)
    if args.witness:
        witness = CertificateWitness.from_dict(_load_witness(args.witness))
    else:
        witness = solve_feasibility(problem, _solver(args))
    header = header_line(scenario, theorem=args.theorem, eta_m=eta_m, tau_m=tau_m, alpha=alpha)
    rows = round_trip_check(problem, witness.x, output_path(args.out), header=header)
    worst = max(abs(old - new) for _, old, new in rows)
    print(
        f"Exported {len(problem.constraints)} constraints over {problem.layout.size} scalars; "
        f"witness {witness.status.value}, worst round-trip margin change {worst:.3e}"
    )
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for solver detail")
    parser.add_argument("--seed", type=int, default=None, help=f"Random seed (default {DEFAULT_SEED})")
    parser.add_argument(
        "--workers",
        type=int,
        default=int(os.environ["NCS_CERTIFIER_WORKERS"]) if os.environ.get("NCS_CERTIFIER_WORKERS") else None,
        help="Worker pool size (default: NCS_CERTIFIER_WORKERS env or logical cores)",
    )
    parser.add_argument(
        "--backend",
        choices=BACKENDS,
        default=default_backend(),
        help="Solver backend (default: NCS_CERTIFIER_BACKEND env or cvxpy)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ncs-certifier",
        description="Certify input-to-state stability of networked control systems under TOD and Round-Robin scheduling.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    search = sub.add_parser("search", help="Bisect the largest certified tau_M")
    _add_common(search)
    search.add_argument(
        "--scenario", required=True, help=f"Scenario file or bundled name ({', '.join(list_bundled())})"
    )
    search.add_argument("--theorem", choices=sorted(ASSEMBLERS), default="t1")
    search.add_argument("--eta-m", type=parse_floats, default=None, help="Comma-separated eta_m values")
    search.add_argument("--alpha", type=float, default=None)
    search.add_argument("--disturbance", dest="disturbance", action="store_true", default=None)
    search.add_argument("--no-disturbance", dest="disturbance", action="store_false")
    search.add_argument("--tau-lo", type=float, default=None)
    search.add_argument("--tau-hi", type=float, default=None)
    search.add_argument("--tol", type=float, default=5e-4)
    search.add_argument("--strict", action="store_true", help="Treat a solver iteration limit as a health error")
    search.add_argument("--out", type=Path, help="CSV output path")
    search.add_argument("--witness-out", type=Path, help="Write the certificate at tau_max as JSON")
    search.set_defaults(func=cmd_search)

    table = sub.add_parser("table", help="Recompute a published table of maximum spans")
    _add_common(table)
    table.add_argument("--id", required=True, choices=sorted(PUBLISHED_TABLES))
    table.add_argument("--theorems", type=lambda s: tuple(s.split(",")), default=("t1", "t2"))
    table.add_argument("--tol", type=float, default=5e-4)
    table.add_argument("--out", type=Path, help="CSV output path")
    table.set_defaults(func=cmd_table)

    sim = sub.add_parser("simulate", help="Simulate the closed loop and write the trajectory")
    _add_common(sim)
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--protocol", choices=("tod", "rr"), default=None)
    sim.add_argument("--timing", default="random", help="fixed:h,eta | random[:seed] | grid[:levels]")
    sim.add_argument("--horizon", type=float, default=1.0)
    sim.add_argument("--tau-m", type=float, default=None, help="Override the scenario span")
    sim.add_argument("--delta", type=float, default=None, help="Disturbance bound (default from scenario)")
    sim.add_argument("--x0", default=None, help="Comma-separated initial state (default all ones)")
    sim.add_argument("--vertex", type=int, default=1, help="Polytope vertex to simulate (1-based)")
    sim.add_argument("--witness", type=Path, help="Take TOD weights Q_i from a witness file")
    sim.add_argument("--step", type=float, default=1e-3, help="Output grid step")
    sim.add_argument("--out", type=Path, help="CSV output path")
    sim.set_defaults(func=cmd_simulate)

    verify = sub.add_parser("verify", help="Check the Lyapunov functional of a witness along simulated runs")
    _add_common(verify)
    verify.add_argument("--scenario", required=True)
    verify.add_argument("--witness", required=True, type=Path)
    verify.add_argument("--variant", choices=VARIANTS, default=None)
    verify.add_argument("--protocol", choices=("tod", "rr"), default=None, help="Protocol for the n2 variant")
    verify.add_argument("--runs", type=int, default=10)
    verify.add_argument("--horizon", type=float, default=1.0)
    verify.add_argument("--delta", type=float, default=None)
    verify.add_argument("--x0", default=None)
    verify.add_argument("--vertex", type=int, default=1)
    verify.add_argument("--grid-points", type=int, default=100)
    verify.add_argument("--iss", action="store_true", help="Also check the ISS bound (needs alpha > 0)")
    verify.add_argument("--report", type=Path, help="Report output path")
    verify.set_defaults(func=cmd_verify)

    export = sub.add_parser("export", help="Write the LMI problem in SDPA sparse format")
    _add_common(export)
    export.add_argument("--scenario", required=True)
    export.add_argument("--theorem", choices=sorted(ASSEMBLERS), default="t1")
    export.add_argument("--eta-m", type=float, default=None)
    export.add_argument("--tau-m", type=float, default=None)
    export.add_argument("--alpha", type=float, default=None)
    export.add_argument("--witness", type=Path, help="Evaluate the round trip at this witness instead of solving")
    export.add_argument("--out", type=Path, required=True)
    export.set_defaults(func=cmd_export)
    return parser


def configure_logging(verbose: int) -> None:
    level = logging.WARNING if verbose <= 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    if args.seed is None:
        args.seed = DEFAULT_SEED
        logger.info("no --seed given, using %d", DEFAULT_SEED)
    try:
        return args.func(args)
    except (SearchError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (SolverHealthError, SolverError, SimulationError, SdpaFormatError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_HEALTH
    except (ScenarioError, DimensionError, AssemblyError, TimingError, VerificationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except argparse.ArgumentTypeError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
