"""Affine matrix inequalities certifying ISS under TOD and Round-Robin scheduling.

Two constraint families are assembled from a :class:`~ncs_certifier.model.ClosedLoopModel`:

* ``assemble_theorem1`` - TOD with general ``N``: the jump blocks ``Omega_i``, the
  reciprocally-convex block ``Phi`` and one flow block per node.
* ``assemble_theorem2`` - Round-Robin (and TOD for ``N=2``): same flow blocks with
  ``U_i = Q_i/(N-1)`` and ``G_i`` eliminated, no ``Omega_i``.

Every constraint is stored as a constant block plus one coefficient block per
scalar decision parameter, so evaluation is a single tensor contraction.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from scipy.linalg import block_diag

from .model import ClosedLoopModel, NetworkModel, vertex_models

logger = logging.getLogger(__name__)

BASE_EPSILON = 1e-7


class AssemblyError(ValueError):
    """Raised when a problem cannot be assembled from the given data."""


class Sign(str, enum.Enum):
    PSD = "psd"  # M >= 0
    PD = "pd"  # M > 0
    ND = "nd"  # M < 0

    @property
    def strict(self) -> bool:
        return self is not Sign.PSD

    @property
    def factor(self) -> float:
        return -1.0 if self is Sign.ND else 1.0


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str  # "sym", "full" or "scalar"
    dim: int
    offset: int
    positive: bool

    @property
    def size(self) -> int:
        if self.kind == "sym":
            return self.dim * (self.dim + 1) // 2
        if self.kind == "full":
            return self.dim * self.dim
        return 1

    @property
    def indices(self) -> range:
        return range(self.offset, self.offset + self.size)


class DecisionLayout:
    """Ordered registry of the decision matrices and their scalar parameters.

    Symmetric variables are parameterized by their upper triangle (row-major),
    full variables by all entries, scalars by one entry.
    """

    def __init__(self, entries: Sequence[Tuple[str, str, int, bool]]):
        variables = []
        offset = 0
        for name, kind, dim, positive in entries:
            if kind not in {"sym", "full", "scalar"}:
                raise AssemblyError(f"unknown variable kind {kind!r} for {name}")
            variable = Variable(name=name, kind=kind, dim=dim if kind != "scalar" else 1, offset=offset, positive=positive)
            variables.append(variable)
            offset += variable.size
        self.variables: Tuple[Variable, ...] = tuple(variables)
        self.size = offset
        self._by_name = {v.name: v for v in self.variables}
        if len(self._by_name) != len(self.variables):
            raise AssemblyError("duplicate variable names in decision layout")

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, DecisionLayout):
            return NotImplemented
        return self.variables == other.variables

    def __hash__(self) -> int:
        return hash(self.variables)

    @property
    def names(self) -> List[str]:
        return [v.name for v in self.variables]

    def __getitem__(self, name: str) -> Variable:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def index_range(self, name: str) -> range:
        return self._by_name[name].indices

    def unpack(self, x) -> Dict[str, np.ndarray | float]:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.size,):
            raise AssemblyError(f"decision vector has shape {x.shape}, layout needs ({self.size},)")
        values: Dict[str, np.ndarray | float] = {}
        for v in self.variables:
            chunk = x[v.offset:v.offset + v.size]
            if v.kind == "scalar":
                values[v.name] = float(chunk[0])
            elif v.kind == "full":
                values[v.name] = chunk.reshape(v.dim, v.dim).copy()
            else:
                matrix = np.zeros((v.dim, v.dim))
                rows, cols = np.triu_indices(v.dim)
                matrix[rows, cols] = chunk
                matrix[cols, rows] = chunk
                values[v.name] = matrix
        return values

    def pack(self, values: Dict[str, np.ndarray | float]) -> np.ndarray:
        x = np.zeros(self.size)
        for v in self.variables:
            value = values[v.name]
            if v.kind == "scalar":
                x[v.offset] = float(value)
            elif v.kind == "full":
                x[v.offset:v.offset + v.size] = np.asarray(value, dtype=float).reshape(-1)
            else:
                matrix = np.asarray(value, dtype=float)
                rows, cols = np.triu_indices(v.dim)
                x[v.offset:v.offset + v.size] = 0.5 * (matrix + matrix.T)[rows, cols]
        return x

    def trace_vector(self) -> np.ndarray:
        """Linear functional giving the summed trace of the positive variables."""

        a = np.zeros(self.size)
        for v in self.variables:
            if not v.positive:
                continue
            if v.kind == "scalar":
                a[v.offset] = 1.0
            else:
                rows, cols = np.triu_indices(v.dim)
                diagonal = np.flatnonzero(rows == cols)
                a[v.offset + diagonal] = 1.0
        return a

    def identity_point(self) -> np.ndarray:
        values: Dict[str, np.ndarray | float] = {}
        for v in self.variables:
            if v.kind == "scalar":
                values[v.name] = 1.0 if v.positive else 0.0
            elif v.positive:
                values[v.name] = np.eye(v.dim)
            else:
                values[v.name] = np.zeros((v.dim, v.dim))
        return self.pack(values)


@dataclass(frozen=True, eq=False)
class LmiConstraint:
    """``M(x) = constant + sum_j x_j coefficients[j]`` with a sign requirement."""

    label: str
    sign: Sign
    constant: np.ndarray
    coefficients: np.ndarray  # shape (layout.size, d, d)
    group: str = "vertex"

    @property
    def dim(self) -> int:
        return self.constant.shape[0]

    @property
    def epsilon(self) -> float:
        return BASE_EPSILON * (1.0 + float(np.linalg.norm(self.constant, np.inf)))

    def evaluate(self, x) -> np.ndarray:
        return self.constant + np.tensordot(np.asarray(x, dtype=float), self.coefficients, axes=1)

    def oriented(self, x) -> np.ndarray:
        """The matrix that must be positive (semi)definite."""

        return self.sign.factor * self.evaluate(x)

    def oriented_parts(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.sign.factor * self.constant, self.sign.factor * self.coefficients


@dataclass(frozen=True)
class ProblemParams:
    theorem: str
    alpha: float
    eta_m: float
    tau_m: float
    nodes: int
    node_dims: Tuple[int, ...]
    q: int
    disturbance: bool
    vertices: int = 1


@dataclass(frozen=True, eq=False)
class LmiProblem:
    layout: DecisionLayout
    constraints: Tuple[LmiConstraint, ...]
    params: ProblemParams

    @property
    def theorem(self) -> str:
        return self.params.theorem

    @property
    def homogeneous(self) -> bool:
        return all(not np.any(c.constant) for c in self.constraints)

    @property
    def epsilon(self) -> float:
        return max(c.epsilon for c in self.constraints)

    def constraint(self, label: str) -> LmiConstraint:
        for c in self.constraints:
            if c.label == label:
                return c
        raise KeyError(label)

    def witness_matrices(self, x) -> Dict[str, np.ndarray | float]:
        """Named decision matrices, with the eliminated ``U_i``/``G_i`` filled in."""

        values = self.layout.unpack(x)
        Q, U, G, b = _node_weights(values, self.params)
        for i in range(self.params.nodes):
            values[f"U{i + 1}"] = U[i]
            values[f"G{i + 1}"] = G[i]
        values["b"] = b
        return values


def _symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + np.swapaxes(matrix, -1, -2))


def affine_from_builder(
    layout: DecisionLayout,
    builder: Callable[[Dict[str, np.ndarray | float]], np.ndarray],
) -> Tuple[np.ndarray, np.ndarray]:
    """Constant and coefficient blocks of an affine matrix-valued builder."""

    zero = np.zeros(layout.size)
    constant = np.asarray(builder(layout.unpack(zero)), dtype=float)
    coefficients = np.empty((layout.size,) + constant.shape)
    basis = np.zeros(layout.size)
    for j in range(layout.size):
        basis[j] = 1.0
        coefficients[j] = builder(layout.unpack(basis)) - constant
        basis[j] = 0.0
    return _symmetrize(constant), _symmetrize(coefficients)


def make_constraint(layout, label, sign, builder, group="vertex") -> LmiConstraint:
    constant, coefficients = affine_from_builder(layout, builder)
    return LmiConstraint(label=label, sign=Sign(sign), constant=constant, coefficients=coefficients, group=group)


def rr_gain_factor(nodes: int, alpha: float, eta_m: float, tau_m: float) -> float:
    """``G_i / Q_i`` for the Round-Robin functional."""

    return (nodes - 1) * math.exp(2.0 * alpha * (tau_m + (nodes - 2) * (tau_m - eta_m)))


def _node_weights(values, params: ProblemParams):
    N = params.nodes
    Q = [values[f"Q{i + 1}"] for i in range(N)]
    if params.theorem == "t2":
        factor = rr_gain_factor(N, params.alpha, params.eta_m, params.tau_m)
        U = [q_i / (N - 1) for q_i in Q]
        G = [factor * q_i for q_i in Q]
    else:
        U = [values[f"U{i + 1}"] for i in range(N)]
        G = [values[f"G{i + 1}"] for i in range(N)]
    b = values["b"] if "b" in values else 0.0
    return Q, U, G, b


def build_layout(n_cl: int, node_dims: Sequence[int], theorem: str, disturbance: bool) -> DecisionLayout:
    entries = [(name, "sym", n_cl, True) for name in ("P", "S0", "S1", "R0", "R1")]
    entries.append(("S12", "full", n_cl, False))
    entries += [(f"Q{i + 1}", "sym", d, True) for i, d in enumerate(node_dims)]
    if theorem == "t1":
        entries += [(f"U{i + 1}", "sym", d, True) for i, d in enumerate(node_dims)]
        entries += [(f"G{i + 1}", "sym", d, True) for i, d in enumerate(node_dims)]
    if disturbance:
        entries.append(("b", "scalar", 1, True))
    return DecisionLayout(entries)


def _phi_matrix(values) -> np.ndarray:
    R1, S12 = values["R1"], values["S12"]
    return np.block([[R1, S12], [S12.T, R1]])


def _omega_matrix(values, params: ProblemParams, i: int) -> np.ndarray:
    Q, U, G, _ = _node_weights(values, params)
    h = params.tau_m - params.eta_m
    top = -(1.0 - 2.0 * params.alpha * h) / (params.nodes - 1) * Q[i] + U[i]
    bottom = Q[i] - G[i] * math.exp(-2.0 * params.alpha * params.tau_m)
    return np.block([[top, Q[i]], [Q[i].T, bottom]])


def _flow_matrix(cl: ClosedLoopModel, values, params: ProblemParams, i: int) -> np.ndarray:
    """Schur-complemented flow block for active node ``i``.

    The extended vector is ``col{x(t), x(t-eta_m), x(t-tau(t)), x(t-tau_M), e_j (j != i), w}``.
    """

    n = cl.n_cl
    alpha, eta, tau = params.alpha, params.eta_m, params.tau_m
    h = tau - eta
    P, S0, S1, R0, R1 = (values[name] for name in ("P", "S0", "S1", "R0", "R1"))
    Q, U, G, b = _node_weights(values, params)
    others = [j for j in range(params.nodes) if j != i]
    q = cl.q if params.disturbance else 0

    H = eta ** 2 * R0 + h ** 2 * R1
    for c_l, g_l in zip(cl.C, G):
        H = H + h * c_l.T @ g_l @ c_l

    e_width = sum(cl.node_dims[j] for j in others)
    d = 4 * n + e_width + q
    eye = np.eye(n)

    xi_blocks = [cl.A, np.zeros((n, n)), cl.A1, np.zeros((n, n))] + [cl.B[j] for j in others]
    if q:
        xi_blocks.append(cl.D)
    Xi = np.hstack(xi_blocks)

    F1 = np.zeros((n, d))
    F1[:, :n] = eye
    F2 = np.zeros((n, d))
    F2[:, :n] = eye
    F2[:, n:2 * n] = -eye
    F = np.zeros((2 * n, d))
    F[:n, n:2 * n] = eye
    F[:n, 2 * n:3 * n] = -eye
    F[n:, 2 * n:3 * n] = eye
    F[n:, 3 * n:4 * n] = -eye

    diagonal = [
        S0 + 2.0 * alpha * P,
        -(S0 - S1) * math.exp(-2.0 * alpha * eta),
        np.zeros((n, n)),
        -S1 * math.exp(-2.0 * alpha * tau),
    ]
    diagonal += [-U[j] / h + 2.0 * alpha * Q[j] for j in others]
    if q:
        diagonal.append(-b * np.eye(q))
    Upsilon = block_diag(*diagonal)

    Sigma = F1.T @ P @ Xi + Xi.T @ P @ F1 + Upsilon - F2.T @ R0 @ F2 * math.exp(-2.0 * alpha * eta)
    top = Sigma - F.T @ _phi_matrix(values) @ F * math.exp(-2.0 * alpha * tau)
    return np.block([[top, Xi.T @ H], [H @ Xi, -H]])


def _validate(cl: ClosedLoopModel, net: NetworkModel, alpha: float) -> None:
    if cl.nodes < 2:
        raise AssemblyError("unsupported: the TOD jump comparison divides by N-1, so N >= 2 is required")
    if net.nodes != cl.nodes:
        raise AssemblyError(f"network declares {net.nodes} nodes but the closed loop has {cl.nodes}")
    if net.tau_m <= net.eta_m:
        raise AssemblyError(f"invalid network: tau_M={net.tau_m} must exceed eta_m={net.eta_m}")
    if alpha < 0 or not math.isfinite(alpha):
        raise AssemblyError(f"alpha must be a finite nonnegative scalar, got {alpha}")


def _positivity(layout: DecisionLayout) -> List[LmiConstraint]:
    constraints = []
    for v in layout.variables:
        if not v.positive:
            continue
        if v.kind == "scalar":
            builder = lambda values, name=v.name: np.array([[values[name]]])
        else:
            builder = lambda values, name=v.name: values[name]
        constraints.append(make_constraint(layout, f"{v.name}>0", Sign.PD, builder, group="positivity"))
    return constraints


def _assemble(cl: ClosedLoopModel, net: NetworkModel, alpha: float, disturbance: bool, theorem: str) -> LmiProblem:
    _validate(cl, net, alpha)
    models = vertex_models(cl)
    problems = []
    for model in models:
        params = ProblemParams(
            theorem=theorem,
            alpha=float(alpha),
            eta_m=float(net.eta_m),
            tau_m=float(net.tau_m),
            nodes=model.nodes,
            node_dims=model.node_dims,
            q=model.q,
            disturbance=bool(disturbance),
        )
        layout = build_layout(model.n_cl, model.node_dims, theorem, disturbance)
        constraints: List[LmiConstraint] = []
        if theorem == "t1":
            for i in range(model.nodes):
                constraints.append(
                    make_constraint(layout, f"omega_{i + 1}", Sign.ND, lambda v, i=i: _omega_matrix(v, params, i))
                )
        constraints.append(make_constraint(layout, "phi", Sign.PSD, _phi_matrix))
        for i in range(model.nodes):
            constraints.append(
                make_constraint(layout, f"flow_{i + 1}", Sign.ND, lambda v, i=i, m=model: _flow_matrix(m, v, params, i))
            )
        constraints += _positivity(layout)
        problems.append(LmiProblem(layout=layout, constraints=tuple(constraints), params=params))
    problem = expand_polytopic(problems)
    logger.debug(
        "assembled %s: %d scalars, %d constraints, %d vertices",
        theorem,
        problem.layout.size,
        len(problem.constraints),
        len(problems),
    )
    return problem


def assemble_theorem1(cl: ClosedLoopModel, net: NetworkModel, alpha: float = 0.0, disturbance: bool = False) -> LmiProblem:
    """TOD conditions for general ``N``: ``Omega_i < 0``, ``Phi >= 0`` and the flow blocks."""

    return _assemble(cl, net, alpha, disturbance, "t1")


def assemble_theorem2(cl: ClosedLoopModel, net: NetworkModel, alpha: float = 0.0, disturbance: bool = False) -> LmiProblem:
    """Round-Robin conditions (TOD too for ``N=2``) with ``U_i``/``G_i`` substituted."""

    return _assemble(cl, net, alpha, disturbance, "t2")


ASSEMBLERS = {"t1": assemble_theorem1, "t2": assemble_theorem2}


def expand_polytopic(problems: Sequence[LmiProblem]) -> LmiProblem:
    """Stack per-vertex problems over one shared decision vector."""

    if not problems:
        raise AssemblyError("no vertex problems to expand")
    if len(problems) == 1:
        return problems[0]
    layout = problems[0].layout
    for j, problem in enumerate(problems[1:], start=2):
        if problem.layout != layout:
            raise AssemblyError(f"vertex {j} has a different decision layout than vertex 1")
    constraints: List[LmiConstraint] = []
    for j, problem in enumerate(problems, start=1):
        for c in problem.constraints:
            if c.group == "vertex":
                constraints.append(
                    LmiConstraint(
                        label=f"v{j}:{c.label}",
                        sign=c.sign,
                        constant=c.constant,
                        coefficients=c.coefficients,
                        group=c.group,
                    )
                )
    constraints += [c for c in problems[0].constraints if c.group != "vertex"]
    params = replace(problems[0].params, vertices=len(problems))
    return LmiProblem(layout=layout, constraints=tuple(constraints), params=params)


def evaluate_constraints(p: LmiProblem, x) -> List[Tuple[str, float]]:
    """Smallest eigenvalue of every oriented constraint matrix; positive means satisfied."""

    x = np.asarray(x, dtype=float)
    if x.shape != (p.layout.size,):
        raise AssemblyError(f"decision vector has shape {x.shape}, layout needs ({p.layout.size},)")
    return [(c.label, float(np.linalg.eigvalsh(c.oriented(x))[0])) for c in p.constraints]


def jump_weight_margins(p: LmiProblem, x) -> List[Tuple[str, float]]:
    """Margins of ``2 alpha (tau_M - eta_m) < 1`` and ``U_i <= (1 - 2 alpha (tau_M - eta_m))/(N - 1) Q_i``.

    Only meaningful for ``t1``, where ``Omega_i < 0`` implies both.
    """

    if p.theorem != "t1":
        raise AssemblyError(f"jump weight margins apply to t1 only, got {p.theorem}")
    params = p.params
    rate = 1.0 - 2.0 * params.alpha * (params.tau_m - params.eta_m)
    values = p.layout.unpack(x)
    margins = [("rate", rate)]
    for i in range(params.nodes):
        gap = rate / (params.nodes - 1) * values[f"Q{i + 1}"] - values[f"U{i + 1}"]
        margins.append((f"U{i + 1}", float(np.linalg.eigvalsh(_symmetrize(gap))[0])))
    return margins
