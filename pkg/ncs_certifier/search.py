"""Bisection of the largest certified span tau_M and of the largest decay rate."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from .lmi import ASSEMBLERS, LmiProblem
from .model import ClosedLoopModel, NetworkModel
from .scenario import Scenario, load_scenario
from .sdp import CertificateWitness, SolverOptions, Status, solve_feasibility

logger = logging.getLogger(__name__)

DEFAULT_TOL = 5e-4
MAX_EXPANSIONS = 4
ALPHA_BRACKET = (1e-6, 0.5)
CSV_COLUMNS = ("eta_m", "theorem", "tau_max", "status", "paper_value", "iterations", "seconds")


class SearchError(RuntimeError):
    """Raised when a bracket cannot be established."""


class SolverHealthError(RuntimeError):
    """Raised when probe results contradict each other or the solver stalls in strict mode."""


THEOREM_LABELS = {"t1": "t1: TOD, any N", "t2": "t2: RR, or TOD with N=2"}

PUBLISHED_TABLES: Dict[str, Dict] = {
    "ex1-n2": {
        "scenario": "pendulum-n2",
        "title": "Uncertain inverted pendulum, N=2, four vertices",
        "eta_m": (0.0, 0.005, 0.01, 0.02, 0.04),
        "rows": {
            "t1": (0.014, 0.018, 0.021, 0.029, 0.044),
            "t2": (0.025, 0.028, 0.031, 0.036, 0.047),
        },
        "decision_variables": {"t1": 84, "t2": 72},
        "reference": {
            "switched-system model (RR)": ((0.023, 0.026, 0.029, 0.035, 0.046), 146),
        },
        "non_small_delay": (0.04,),
    },
    "ex1-n4": {
        "scenario": "pendulum-n4",
        "title": "Uncertain inverted pendulum, N=4, four vertices",
        "eta_m": (0.0, 0.01),
        "rows": {
            "t1": (0.003, 0.012),
            "t2": (0.006, 0.015),
        },
        "decision_variables": {},
        "reference": {},
        "non_small_delay": (),
    },
    "ex2": {
        "scenario": "batch-reactor",
        "title": "Batch reactor, dynamic output feedback, N=2",
        "eta_m": (0.0, 0.004, 0.01, 0.02, 0.03, 0.04),
        "rows": {
            "t1": (0.019, 0.022, 0.027, 0.034, 0.042, 0.050),
            "t2": (0.035, 0.037, 0.041, 0.047, 0.053, 0.059),
        },
        "decision_variables": {},
        "reference": {
            "hybrid emulation (MAD=0.004)": ((0.0108, 0.0133, None, None, None, None), None),
            "discrete-time model (MAD=0.03)": ((0.069, 0.069, 0.069, 0.069, 0.069, None), None),
            "switched-system model (RR)": ((0.042, 0.044, 0.048, 0.053, 0.058, 0.063), None),
        },
        "non_small_delay": (0.03, 0.04),
    },
}


@dataclass(frozen=True)
class SearchSpec:
    """One search: a scenario, a theorem and the delay lower bounds to scan.

    ``tau_lo``/``tau_hi`` default to ``eta_m + 1e-3`` and ``eta_m + 0.1`` per row.
    """

    scenario: Scenario
    theorem: str = "t1"
    eta_m: Tuple[float, ...] = (0.0,)
    alpha: float = 0.0
    tau_lo: float | None = None
    tau_hi: float | None = None
    tol: float = DEFAULT_TOL
    disturbance: bool = False
    expansions: int = MAX_EXPANSIONS
    strict: bool = False
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.theorem not in ASSEMBLERS:
            raise ValueError(f"unknown theorem {self.theorem!r}; choose one of {', '.join(ASSEMBLERS)}")
        if self.tol <= 0:
            raise ValueError("bisection tolerance must be positive")
        if self.tau_lo is not None and self.tau_hi is not None and self.tau_lo >= self.tau_hi:
            raise ValueError(f"empty bracket [{self.tau_lo}, {self.tau_hi}]")
        if not self.eta_m:
            raise ValueError("need at least one eta_m value")
        if any(e < 0 for e in self.eta_m):
            raise ValueError("eta_m values must be nonnegative")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.expansions < 0:
            raise ValueError("expansions must be nonnegative")

    def bracket(self, eta_m: float) -> Tuple[float, float]:
        lo = self.tau_lo if self.tau_lo is not None else eta_m + 1e-3
        hi = self.tau_hi if self.tau_hi is not None else eta_m + 0.1
        if lo <= eta_m:
            raise ValueError(f"bracket start {lo} must exceed eta_m={eta_m}")
        return lo, hi


@dataclass(frozen=True)
class Probe:
    tau: float
    status: Status
    min_margin: float
    iterations: int
    seconds: float


@dataclass
class SearchRow:
    eta_m: float
    theorem: str
    tau_max: float | None
    trace: List[Probe]
    witness: CertificateWitness | None = None
    problem: LmiProblem | None = None
    lower_bound_only: bool = False
    paper_value: float | None = None

    @property
    def status(self) -> str:
        if self.tau_max is None:
            return "none"
        return "lower-bound" if self.lower_bound_only else "certified"

    @property
    def iterations(self) -> int:
        return sum(p.iterations for p in self.trace)

    @property
    def seconds(self) -> float:
        return sum(p.seconds for p in self.trace)

    @property
    def decision_variables(self) -> int | None:
        return self.problem.layout.size if self.problem is not None else None

    def csv_row(self) -> list:
        return [
            self.eta_m,
            self.theorem,
            "" if self.tau_max is None else round(self.tau_max, 6),
            self.status,
            "" if self.paper_value is None else self.paper_value,
            self.iterations,
            round(self.seconds, 3),
        ]


@dataclass
class SearchResult:
    rows: List[SearchRow]
    notes: List[str] = field(default_factory=list)

    def row(self, theorem: str, eta_m: float) -> SearchRow:
        for row in self.rows:
            if row.theorem == theorem and abs(row.eta_m - eta_m) < 1e-12:
                return row
        raise KeyError(f"no row for {theorem} at eta_m={eta_m}")

    def csv_rows(self) -> List[list]:
        return [row.csv_row() for row in self.rows]


def probe(
    cl: ClosedLoopModel,
    theorem: str,
    eta_m: float,
    tau: float,
    alpha: float = 0.0,
    disturbance: bool = False,
    opts: SolverOptions | None = None,
) -> Tuple[LmiProblem, CertificateWitness]:
    """Assemble the conditions at one span and decide them."""

    net = NetworkModel(eta_m=eta_m, mad=eta_m, tau_m=tau, nodes=cl.nodes)
    problem = ASSEMBLERS[theorem](cl, net, alpha=alpha, disturbance=disturbance)
    return problem, solve_feasibility(problem, opts)


def _check_trace(trace: Sequence[Probe], label: str) -> None:
    feasible = [p.tau for p in trace if p.status is Status.FEASIBLE]
    infeasible = [p.tau for p in trace if p.status is Status.INFEASIBLE]
    if feasible and infeasible and max(feasible) >= min(infeasible):
        raise SolverHealthError(
            f"{label}: span {max(feasible):.6g} is feasible above the infeasible span {min(infeasible):.6g}"
        )


class _Row:
    """Sequential probing of one row, keeping the trace and the best witness."""

    def __init__(self, spec: SearchSpec, cl: ClosedLoopModel, eta_m: float):
        self.spec = spec
        self.cl = cl
        self.eta_m = eta_m
        self.trace: List[Probe] = []
        self.best: Tuple[float, LmiProblem, CertificateWitness] | None = None
        self.stalled = False
        self.label = f"{spec.theorem} eta_m={eta_m:g}"

    def feasible(self, tau: float) -> bool:
        problem, witness = probe(
            self.cl, self.spec.theorem, self.eta_m, tau, self.spec.alpha, self.spec.disturbance, self.spec.solver
        )
        self.trace.append(Probe(tau, witness.status, witness.min_margin, witness.iterations, witness.seconds))
        logger.info("%s tau_M=%.6g: %s", self.label, tau, witness.status.value)
        if witness.status is Status.ITERATION_LIMIT:
            if self.spec.strict:
                raise SolverHealthError(f"{self.label}: solver hit its iteration limit at tau_M={tau:.6g}")
            self.stalled = True
        if witness.feasible:
            if self.best is None or tau > self.best[0]:
                self.best = (tau, problem, witness)
            return True
        return False


def _search_row(spec: SearchSpec, cl: ClosedLoopModel, eta_m: float) -> SearchRow:
    row = _Row(spec, cl, eta_m)
    lo, hi = spec.bracket(eta_m)
    expansions = 0
    while not row.feasible(lo):
        if expansions == spec.expansions:
            raise SearchError(f"{row.label}: no certificate at any tested span (down to {lo:.6g})")
        hi, lo = lo, eta_m + 0.5 * (lo - eta_m)
        expansions += 1
    expansions = 0
    while row.feasible(hi):
        if expansions == spec.expansions:
            raise SearchError(f"{row.label}: span {hi:.6g} is still feasible and the bracket cannot grow further")
        lo, hi = hi, eta_m + 2.0 * (hi - eta_m)
        expansions += 1
    while hi - lo > spec.tol:
        mid = 0.5 * (lo + hi)
        if row.feasible(mid):
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    tau_max = mid if row.feasible(mid) else lo
    _check_trace(row.trace, row.label)
    _, problem, witness = row.best
    logger.info("%s: tau_max=%.4f after %d probes", row.label, tau_max, len(row.trace))
    return SearchRow(
        eta_m=eta_m,
        theorem=spec.theorem,
        tau_max=tau_max,
        trace=row.trace,
        witness=witness,
        problem=problem,
        lower_bound_only=row.stalled,
    )


def default_workers() -> int:
    value = os.environ.get("NCS_CERTIFIER_WORKERS")
    return max(int(value), 1) if value else (os.cpu_count() or 1)


def _monotone_note(rows: Sequence[SearchRow]) -> List[str]:
    notes = []
    by_theorem: Dict[str, List[SearchRow]] = {}
    for row in rows:
        if row.tau_max is not None:
            by_theorem.setdefault(row.theorem, []).append(row)
    for theorem, items in by_theorem.items():
        items.sort(key=lambda r: r.eta_m)
        for a, b in zip(items, items[1:]):
            if b.tau_max < a.tau_max:
                notes.append(
                    f"{theorem}: tau_max decreases from {a.tau_max:.4f} at eta_m={a.eta_m:g} "
                    f"to {b.tau_max:.4f} at eta_m={b.eta_m:g}"
                )
    return notes


def max_tau(spec: SearchSpec, workers: int | None = None) -> SearchResult:
    """Largest certified ``tau_M`` for every ``eta_m`` of ``spec``; rows run in parallel."""

    cl = spec.scenario.closed_loop()
    with ThreadPoolExecutor(max_workers=workers or default_workers()) as pool:
        rows = list(pool.map(lambda eta: _search_row(spec, cl, eta), spec.eta_m))
    rows.sort(key=lambda r: r.eta_m)
    return SearchResult(rows=rows, notes=_monotone_note(rows))


def max_alpha(
    cl: ClosedLoopModel,
    theorem: str,
    eta_m: float,
    tau_m: float,
    disturbance: bool = False,
    bracket: Tuple[float, float] = ALPHA_BRACKET,
    tol: float = 1e-4,
    opts: SolverOptions | None = None,
) -> Tuple[float, LmiProblem, CertificateWitness]:
    """Largest decay rate certified at a fixed span."""

    lo, hi = bracket
    problem, witness = probe(cl, theorem, eta_m, tau_m, lo, disturbance, opts)
    if not witness.feasible:
        raise SearchError(f"{theorem} is not feasible at tau_M={tau_m:g} even for alpha={lo:g}")
    best = (lo, problem, witness)
    top_problem, top_witness = probe(cl, theorem, eta_m, tau_m, hi, disturbance, opts)
    if top_witness.feasible:
        return hi, top_problem, top_witness
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        problem, witness = probe(cl, theorem, eta_m, tau_m, mid, disturbance, opts)
        logger.info("%s tau_M=%g alpha=%.6g: %s", theorem, tau_m, mid, witness.status.value)
        if witness.feasible:
            lo, best = mid, (mid, problem, witness)
        else:
            hi = mid
    return best


@dataclass
class TableResult:
    table_id: str
    result: SearchResult
    nodes: int = 2

    @property
    def layout(self) -> Dict:
        return PUBLISHED_TABLES[self.table_id]

    def checks(self) -> Dict[str, bool]:
        """Properties the published tables share: ordering between theorems and large delays."""

        rows = [r for r in self.result.rows if r.tau_max is not None]
        checks = {"monotone in eta_m": not _monotone_note(rows)}
        t1 = {r.eta_m: r.tau_max for r in rows if r.theorem == "t1"}
        t2 = {r.eta_m: r.tau_max for r in rows if r.theorem == "t2"}
        if self.nodes == 2 and t1 and t2:
            checks["t2 >= t1"] = all(t2[e] >= t1[e] for e in t1 if e in t2)
        for eta in self.layout["non_small_delay"]:
            for table in (t1, t2):
                if eta in table:
                    checks.setdefault("eta_m > tau_max/2", True)
                    checks["eta_m > tau_max/2"] &= eta > table[eta] / 2
        return checks

    def to_text(self) -> str:
        layout = self.layout
        etas = layout["eta_m"]
        width = 10
        lines = [f"{self.table_id}: {layout['title']}", "max. value of tau_M = MATI + MAD", "=" * 72]
        header = f"{'method':<34}" + "".join(f"{e:>{width}g}" for e in etas) + f"{'vars':>{width}}"
        lines.append(header)
        lines.append("-" * len(header))
        for name, (values, count) in layout["reference"].items():
            cells = "".join(f"{'-' if v is None else format(v, 'g'):>{width}}" for v in values)
            lines.append(f"{name + ' [ref]':<34}{cells}{'' if count is None else count:>{width}}")
        for theorem in ("t1", "t2"):
            rows = {r.eta_m: r for r in self.result.rows if r.theorem == theorem}
            if not rows:
                continue
            computed, published = [], []
            count = None
            for eta, value in zip(etas, layout["rows"][theorem]):
                row = rows.get(eta)
                if row is None or row.tau_max is None:
                    computed.append("-")
                else:
                    computed.append(f"{row.tau_max:.3f}" + ("*" if row.lower_bound_only else ""))
                    count = row.decision_variables
                published.append(f"{value:.3f}")
            lines.append(f"{THEOREM_LABELS[theorem]:<34}" + "".join(f"{c:>{width}}" for c in computed) + f"{'' if count is None else count:>{width}}")
            published_count = layout["decision_variables"].get(theorem, "")
            lines.append(f"{'  published':<34}" + "".join(f"{c:>{width}}" for c in published) + f"{published_count:>{width}}")
        lines.append("")
        for name, ok in self.checks().items():
            lines.append(f"check {name}: {'PASS' if ok else 'FAIL'}")
        lines.extend(f"note: {note}" for note in self.result.notes)
        if any(r.lower_bound_only for r in self.result.rows):
            lines.append("* solver hit its iteration limit during the search; value is a lower bound")
        return "\n".join(lines)


def table_run(
    table_id: str,
    theorems: Sequence[str] = ("t1", "t2"),
    solver: SolverOptions | None = None,
    workers: int | None = None,
    scenario: Scenario | None = None,
    tol: float = DEFAULT_TOL,
) -> TableResult:
    """Recompute one published table; every (theorem, eta_m) cell is a parallel row."""

    if table_id not in PUBLISHED_TABLES:
        raise ValueError(f"unknown table id {table_id!r}; choose one of {', '.join(PUBLISHED_TABLES)}")
    layout = PUBLISHED_TABLES[table_id]
    scenario = scenario or load_scenario(layout["scenario"])
    solver = solver or SolverOptions()
    cl = scenario.closed_loop()
    specs = {t: SearchSpec(scenario=scenario, theorem=t, eta_m=layout["eta_m"], tol=tol, solver=solver) for t in theorems}
    jobs = [(t, eta) for t in theorems for eta in layout["eta_m"]]
    with ThreadPoolExecutor(max_workers=workers or default_workers()) as pool:
        rows = list(pool.map(lambda job: _search_row(specs[job[0]], cl, job[1]), jobs))
    for row in rows:
        row.paper_value = dict(zip(layout["eta_m"], layout["rows"][row.theorem]))[row.eta_m]
    rows.sort(key=lambda r: (r.theorem, r.eta_m))
    return TableResult(table_id=table_id, nodes=cl.nodes, result=SearchResult(rows=rows, notes=_monotone_note(rows)))
