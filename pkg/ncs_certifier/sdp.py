"""Feasibility of assembled LMI problems by eigenvalue-margin maximization.

Both backends solve ``max t  s.t.  M_k(x) >= t I`` over the sign-normalized
constraints. Homogeneous problems are normalized on the hyperplane where the
summed trace of the positive variables equals its value at the identity start;
other problems are kept inside a box. The returned status is always decided
from margins recomputed outside the backend.

Infeasible needs a dual certificate: PSD matrices ``Z_k`` with
``sum_k tr Z_k = 1``, whose pairing with every constraint gives the upper bound
``t <= sum_k <Z_k, M_k(x)>`` on the margin. The cvxpy backend takes ``Z_k`` from
the conic duals; the ascent backend aggregates lowest-eigenvector subgradients
at its best point. A run without such a bound below zero is IterationLimit.
"""
from __future__ import annotations

import enum
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Tuple

import cvxpy as cp
import numpy as np
from scipy.linalg import eigvalsh_tridiagonal, hessenberg, null_space
from scipy.optimize import minimize, nnls

from .lmi import LmiProblem, ProblemParams, evaluate_constraints, jump_weight_margins

logger = logging.getLogger(__name__)

BACKENDS = ("cvxpy", "ascent")
# largest relative tangent residual of a dual certificate
CERTIFICATE_RTOL = 1e-6


class SolverError(RuntimeError):
    """Raised for malformed problem data or when no backend can run."""


class Status(str, enum.Enum):
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    ITERATION_LIMIT = "IterationLimit"


def default_backend() -> str:
    backend = os.environ.get("NCS_CERTIFIER_BACKEND", "cvxpy").strip().lower()
    return backend if backend in BACKENDS else "cvxpy"


@dataclass(frozen=True)
class SolverOptions:
    backend: str = field(default_factory=default_backend)
    max_iter: int = 20000
    tol: float = 1e-9
    seed: int = 0
    cvxpy_solver: str = "CLARABEL"
    box: float = 1e6
    verbose: bool = False

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown solver backend {self.backend!r}; choose one of {', '.join(BACKENDS)}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass(frozen=True, eq=False)
class CertificateWitness:
    x: np.ndarray
    margins: Tuple[Tuple[str, float], ...]
    status: Status
    iterations: int
    seconds: float
    backend: str = "cvxpy"
    objective: float = float("nan")
    epsilon: float = 0.0
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    params: ProblemParams | None = None

    @property
    def feasible(self) -> bool:
        return self.status is Status.FEASIBLE

    @property
    def min_margin(self) -> float:
        return min(value for _, value in self.margins)

    def to_dict(self, problem: LmiProblem | None = None) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "status": self.status.value,
            "backend": self.backend,
            "iterations": self.iterations,
            "seconds": self.seconds,
            "objective": self.objective,
            "epsilon": self.epsilon,
            "x": [float(v) for v in self.x],
            "margins": [[label, float(value)] for label, value in self.margins],
            "diagnostics": {k: v for k, v in self.diagnostics.items() if isinstance(v, (str, int, float, bool))},
            "params": None,
        }
        if self.params is not None:
            params = asdict(self.params)
            params["node_dims"] = list(params["node_dims"])
            data["params"] = params
        if problem is not None:
            matrices = problem.witness_matrices(self.x)
            data["matrices"] = {
                name: (value.tolist() if isinstance(value, np.ndarray) else float(value))
                for name, value in matrices.items()
            }
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CertificateWitness":
        try:
            params = data.get("params")
            if params is not None:
                params = ProblemParams(**{**params, "node_dims": tuple(params["node_dims"])})
            return cls(
                x=np.asarray(data["x"], dtype=float),
                margins=tuple((str(label), float(value)) for label, value in data["margins"]),
                status=Status(data["status"]),
                iterations=int(data.get("iterations", 0)),
                seconds=float(data.get("seconds", 0.0)),
                backend=str(data.get("backend", "cvxpy")),
                objective=float(data.get("objective", float("nan"))),
                epsilon=float(data.get("epsilon", 0.0)),
                diagnostics=dict(data.get("diagnostics", {})),
                params=params,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed witness data: {exc}") from exc


def _tridiagonal_min_eigenvalue(matrix: np.ndarray) -> float:
    if matrix.shape[0] == 1:
        return float(matrix[0, 0])
    reduced = hessenberg(matrix)
    diagonal = np.diag(reduced).copy()
    off_diagonal = np.diag(reduced, -1).copy()
    return float(eigvalsh_tridiagonal(diagonal, off_diagonal, select="i", select_range=(0, 0))[0])


def verify_witness(p: LmiProblem, x) -> List[Tuple[str, float]]:
    """Margins through Householder tridiagonalization, independent of :func:`evaluate_constraints`."""

    x = np.asarray(x, dtype=float)
    return [(c.label, _tridiagonal_min_eigenvalue(c.oriented(x))) for c in p.constraints]


def _check_finite(p: LmiProblem) -> None:
    for c in p.constraints:
        if not (np.all(np.isfinite(c.constant)) and np.all(np.isfinite(c.coefficients))):
            raise SolverError(f"constraint {c.label} has non-finite entries")


def _normalization(p: LmiProblem) -> Tuple[np.ndarray, float]:
    a = p.layout.trace_vector()
    x0 = p.layout.identity_point()
    return a, float(a @ x0)


def _initial_point(p: LmiProblem) -> np.ndarray:
    x0 = p.layout.identity_point()
    if p.homogeneous:
        return x0
    return np.clip(x0, -1.0, 1.0)


def _oriented_stack(p: LmiProblem):
    return [c.oriented_parts() for c in p.constraints]


def _margin_and_subgradient(parts, x: np.ndarray) -> Tuple[float, np.ndarray]:
    worst = np.inf
    gradient = None
    for constant, coefficients in parts:
        matrix = constant + np.tensordot(x, coefficients, axes=1)
        values, vectors = np.linalg.eigh(matrix)
        if values[0] < worst:
            worst = values[0]
            v = vectors[:, 0]
            gradient = np.einsum("jab,a,b->j", coefficients, v, v)
    return float(worst), gradient


def _soft_min(parts, x: np.ndarray, mu: float) -> Tuple[float, np.ndarray]:
    """``-softmin_mu`` of all eigenvalues and its gradient (minimized by L-BFGS)."""

    spectra = []
    for constant, coefficients in parts:
        values, vectors = np.linalg.eigh(constant + np.tensordot(x, coefficients, axes=1))
        spectra.append((values, vectors, coefficients))
    lowest = min(values[0] for values, _, _ in spectra)
    total = sum(np.exp(-(values - lowest) / mu).sum() for values, _, _ in spectra)
    value = -(lowest - mu * np.log(total))
    gradient = np.zeros_like(x)
    for values, vectors, coefficients in spectra:
        weights = np.exp(-(values - lowest) / mu) / total
        W = (vectors * weights) @ vectors.T
        gradient -= np.tensordot(coefficients, W, axes=([1, 2], [0, 1]))
    return float(value), gradient


def _solve_ascent(p: LmiProblem, opts: SolverOptions):
    parts = _oriented_stack(p)
    rng = np.random.default_rng(opts.seed)
    homogeneous = p.homogeneous
    a, level = _normalization(p)
    aa = float(a @ a)

    def project(x):
        if homogeneous:
            return x - (a @ x - level) / aa * a
        return np.clip(x, -opts.box, opts.box)

    def tangent(g):
        return g - (a @ g) / aa * a if homogeneous else g

    x = project(_initial_point(p))
    f, g = _margin_and_subgradient(parts, x)
    best_x, best_f = x.copy(), f
    delta = 0.5 * (abs(f) + 1.0)
    stall = 0
    converged = False
    iterations = 0
    for iterations in range(1, opts.max_iter + 1):
        direction = tangent(g)
        norm2 = float(direction @ direction)
        if norm2 == 0.0:
            direction = tangent(rng.standard_normal(x.size))
            norm2 = float(direction @ direction)
        step = (best_f + delta - f) / norm2
        x = project(x + step * direction)
        f, g = _margin_and_subgradient(parts, x)
        if f > best_f + 0.5 * delta:
            best_x, best_f = x.copy(), f
            delta *= 1.5
            stall = 0
        else:
            if f > best_f:
                best_x, best_f = x.copy(), f
            stall += 1
            if stall >= 50:
                delta *= 0.5
                stall = 0
                x = best_x.copy()
                f, g = _margin_and_subgradient(parts, x)
        if opts.verbose and iterations % 100 == 0:
            logger.debug("ascent iter=%d objective=%.6e step=%.3e delta=%.3e", iterations, best_f, step, delta)
        if delta < opts.tol * (1.0 + abs(best_f)):
            converged = True
            break

    mu = max(1e-6, 1e-3 * (abs(best_f) + opts.tol))
    if homogeneous:
        basis = null_space(a[None, :])

        def objective(z):
            value, gradient = _soft_min(parts, best_x + basis @ z, mu)
            return value, basis.T @ gradient

        result = minimize(objective, np.zeros(basis.shape[1]), jac=True, method="L-BFGS-B", options={"maxiter": 500})
        refined = best_x + basis @ result.x
    else:
        bounds = [(-opts.box, opts.box)] * best_x.size
        result = minimize(lambda z: _soft_min(parts, z, mu), best_x, jac=True, method="L-BFGS-B", bounds=bounds,
                          options={"maxiter": 500})
        refined = result.x
    refined_f, _ = _margin_and_subgradient(parts, refined)
    if refined_f > best_f:
        best_x, best_f = refined, refined_f
    diagnostics = {
        "stationarity": float(np.linalg.norm(result.jac)),
        "converged": converged,
        "refinement_iterations": int(result.nit),
    }
    duals = _ascent_duals(parts, best_x, best_f, a if homogeneous else None)
    return best_x, best_f, iterations + int(result.nit), converged, diagnostics, duals


def _ascent_duals(parts, x: np.ndarray, best_f: float, a: np.ndarray | None) -> List[np.ndarray] | None:
    """Convex combination of ``v v^T`` over near-lowest eigenvectors whose tangent subgradient vanishes."""

    window = 0.05 * (1.0 + abs(best_f))
    candidates = []
    for k, (constant, coefficients) in enumerate(parts):
        values, vectors = np.linalg.eigh(constant + np.tensordot(x, coefficients, axes=1))
        for value, v in zip(values, vectors.T):
            if value <= best_f + window:
                candidates.append((k, v, np.einsum("jab,a,b->j", coefficients, v, v)))
    if not candidates:
        return None
    G = np.column_stack([g for _, _, g in candidates])
    if a is not None:
        G = G - np.outer(a, a @ G) / float(a @ a)
    weight = max(1.0, float(np.abs(G).max()))
    system = np.vstack([G, weight * np.ones((1, G.shape[1]))])
    rhs = np.concatenate([np.zeros(G.shape[0]), [weight]])
    w, _ = nnls(system, rhs)
    if w.sum() <= 0.0:
        return None
    w = w / w.sum()
    duals = [np.zeros_like(constant) for constant, _ in parts]
    for weight_i, (k, v, _) in zip(w, candidates):
        duals[k] += weight_i * np.outer(v, v)
    return duals


def _dual_bound(p: LmiProblem, duals, opts: SolverOptions) -> Tuple[float, float]:
    """Upper bound on the best margin implied by ``duals`` and its relative tangent residual.

    Homogeneous problems fold the part of ``g`` along the trace normal into the
    normalization level; the rest is the residual. Box-bounded problems charge
    ``box * |g|_1`` instead and have no residual.
    """

    parts = _oriented_stack(p)
    m = p.layout.size
    g = np.zeros(m)
    c = 0.0
    s = 0.0
    for (constant, coefficients), Z in zip(parts, duals):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        Z = 0.5 * (Z + Z.T)
        values, vectors = np.linalg.eigh(Z)
        Z = (vectors * np.clip(values, 0.0, None)) @ vectors.T
        g += np.tensordot(coefficients, Z, axes=([1, 2], [0, 1]))
        c += float(np.sum(constant * Z))
        s += float(np.trace(Z))
    if s <= 0.0:
        return np.inf, np.inf
    if p.homogeneous:
        a, level = _normalization(p)
        nu = float(g @ a) / float(a @ a)
        residual = float(np.linalg.norm(g - nu * a)) / max(1.0, float(np.linalg.norm(g)))
        return (c + nu * level) / s, residual
    return (c + opts.box * float(np.abs(g).sum())) / s, 0.0


def _solve_cvxpy(p: LmiProblem, opts: SolverOptions):
    m = p.layout.size
    x = cp.Variable(m)
    t = cp.Variable()
    constraints = []
    for constant, coefficients in _oriented_stack(p):
        d = constant.shape[0]
        flat = coefficients.reshape(m, d * d)
        matrix = cp.reshape(constant.reshape(-1) + flat.T @ x, (d, d), order="C")
        if d == 1:
            constraints.append(matrix[0, 0] >= t)
        else:
            constraints.append(0.5 * (matrix + matrix.T) >> t * np.eye(d))
    lmis = list(constraints)
    if p.homogeneous:
        a, level = _normalization(p)
        constraints.append(a @ x == level)
    else:
        constraints.append(cp.norm(x, "inf") <= opts.box)
    program = cp.Problem(cp.Maximize(t), constraints)

    attempts = [opts.cvxpy_solver] + [name for name in ("CLARABEL", "SCS") if name != opts.cvxpy_solver]
    last_error: Exception | None = None
    for name in attempts:
        try:
            program.solve(solver=name, verbose=opts.verbose)
        except (cp.error.SolverError, ValueError) as exc:
            logger.warning("cvxpy solver %s failed: %s", name, exc)
            last_error = exc
            continue
        stats = program.solver_stats
        iterations = int(stats.num_iters) if stats is not None and stats.num_iters is not None else 0
        diagnostics = {"solver": name, "solver_status": str(program.status)}
        if x.value is None:
            return None, float("nan"), iterations, False, diagnostics, None
        converged = program.status == cp.OPTIMAL
        duals = None
        if converged and all(c.dual_value is not None for c in lmis):
            duals = [np.atleast_2d(np.asarray(c.dual_value, dtype=float)) for c in lmis]
        return np.asarray(x.value, dtype=float), float(t.value), iterations, converged, diagnostics, duals
    raise SolverError(f"no cvxpy solver could run the margin maximization: {last_error}")


def _classify(margins, independent, epsilon: float, bound: float, residual: float, slack: float = 0.0) -> Status:
    if min(v for _, v in margins) >= epsilon and min(v for _, v in independent) >= epsilon:
        return Status.FEASIBLE
    if bound < -slack and residual <= CERTIFICATE_RTOL:
        return Status.INFEASIBLE
    return Status.ITERATION_LIMIT


def solve_feasibility(p: LmiProblem, opts: SolverOptions | None = None) -> CertificateWitness:
    """Decide feasibility of ``p`` and return the best point found with its margins."""

    opts = opts or SolverOptions()
    _check_finite(p)
    started = time.perf_counter()
    if opts.backend == "ascent":
        x, objective, iterations, converged, diagnostics, duals = _solve_ascent(p, opts)
    else:
        x, objective, iterations, converged, diagnostics, duals = _solve_cvxpy(p, opts)
    if x is None:
        x = _initial_point(p)
    margins = evaluate_constraints(p, x)
    independent = verify_witness(p, x)
    bound, residual = _dual_bound(p, duals, opts) if duals is not None else (np.inf, np.inf)
    diagnostics = {**diagnostics, "dual_bound": float(bound), "certificate_residual": float(residual)}
    status = _classify(margins, independent, p.epsilon, bound, residual, opts.tol)
    if status is Status.FEASIBLE and p.theorem == "t1" and p.params.alpha > 0.0:
        weights = jump_weight_margins(p, x)
        label, worst = min(weights, key=lambda item: item[1])
        diagnostics["jump_weight_margin"] = worst
        if worst <= 0.0:
            raise SolverError(
                f"t1 witness at alpha={p.params.alpha:g} breaks its jump weight bound {label} (margin {worst:.3e})"
            )
    seconds = time.perf_counter() - started
    logger.debug(
        "%s %s tau_m=%.6g eta_m=%.6g: %s (objective=%.3e, min margin=%.3e, %d iterations, %.2fs)",
        opts.backend,
        p.params.theorem,
        p.params.tau_m,
        p.params.eta_m,
        status.value,
        objective,
        min(v for _, v in margins),
        iterations,
        seconds,
    )
    return CertificateWitness(
        x=x,
        margins=tuple(margins),
        status=status,
        iterations=iterations,
        seconds=seconds,
        backend=opts.backend,
        objective=objective,
        epsilon=p.epsilon,
        diagnostics=diagnostics,
        params=p.params,
    )
