"""Plant, controller and network descriptions and the closed-loop hybrid model."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class DimensionError(ValueError):
    """Raised when matrix blocks do not fit together."""


def _as_matrix(value, name: str, *, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    matrix = np.array(value, dtype=float)
    if matrix.ndim == 1 and rows is not None and matrix.size == 0:
        matrix = matrix.reshape(rows, 0)
    if matrix.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D matrix, got shape {matrix.shape}")
    if rows is not None and matrix.shape[0] != rows:
        raise DimensionError(f"{name} has {matrix.shape[0]} rows, expected {rows}")
    if cols is not None and matrix.shape[1] != cols:
        raise DimensionError(f"{name} has {matrix.shape[1]} columns, expected {cols}")
    if not np.all(np.isfinite(matrix)):
        raise DimensionError(f"{name} contains non-finite entries")
    return matrix


@dataclass(frozen=True, eq=False)
class PlantVertex:
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray


@dataclass(frozen=True, eq=False)
class PlantModel:
    """Continuous LTI plant ``x' = A x + B u + D w`` with partitioned outputs.

    ``outputs`` holds one ``C_i`` per sensor node. ``vertices`` is empty for a
    certain plant and otherwise lists the polytope vertices (A, B, D).
    """

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    outputs: Tuple[np.ndarray, ...]
    vertices: Tuple[PlantVertex, ...] = ()

    def __post_init__(self):
        n = np.array(self.A, dtype=float).shape[0]
        object.__setattr__(self, "A", _as_matrix(self.A, "A", rows=n, cols=n))
        object.__setattr__(self, "B", _as_matrix(self.B, "B", rows=n))
        object.__setattr__(self, "D", _as_matrix(self.D, "D", rows=n))
        if not self.outputs:
            raise DimensionError("plant needs at least one output block C_i")
        outputs = tuple(_as_matrix(c, f"C_{i + 1}", cols=n) for i, c in enumerate(self.outputs))
        object.__setattr__(self, "outputs", outputs)
        checked = []
        for j, vertex in enumerate(self.vertices):
            checked.append(
                PlantVertex(
                    A=_as_matrix(vertex.A, f"vertex {j + 1} A", rows=n, cols=n),
                    B=_as_matrix(vertex.B, f"vertex {j + 1} B", rows=n, cols=self.m),
                    D=_as_matrix(vertex.D, f"vertex {j + 1} D", rows=n, cols=self.q),
                )
            )
        object.__setattr__(self, "vertices", tuple(checked))

    @classmethod
    def from_descriptor(
        cls,
        E,
        A_f,
        B_0,
        D,
        outputs: Sequence,
        vertices: Sequence[Tuple] = (),
    ) -> "PlantModel":
        """Build the plant from ``E x' = A_f x + B_0 u + D w`` by applying ``E^-1``."""

        E = np.array(E, dtype=float)
        if E.ndim != 2 or E.shape[0] != E.shape[1]:
            raise DimensionError(f"descriptor matrix E must be square, got shape {E.shape}")
        n = E.shape[0]

        def solve(matrix, name):
            return np.linalg.solve(E, _as_matrix(matrix, name, rows=n))

        converted = [
            PlantVertex(A=solve(a, "vertex A"), B=solve(b, "vertex B"), D=solve(d, "vertex D"))
            for a, b, d in vertices
        ]
        return cls(
            A=solve(A_f, "A"),
            B=solve(B_0, "B"),
            D=solve(D, "D"),
            outputs=tuple(outputs),
            vertices=tuple(converted),
        )

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def q(self) -> int:
        return self.D.shape[1]

    @property
    def node_dims(self) -> Tuple[int, ...]:
        return tuple(c.shape[0] for c in self.outputs)

    @property
    def n_y(self) -> int:
        return sum(self.node_dims)

    @property
    def C(self) -> np.ndarray:
        return np.vstack(self.outputs)

    def vertex_triples(self) -> List[PlantVertex]:
        if self.vertices:
            return list(self.vertices)
        return [PlantVertex(A=self.A, B=self.B, D=self.D)]


@dataclass(frozen=True, eq=False)
class StaticController:
    """``u = K y_hat`` with ``K = [K_1 ... K_N]``, ``K_i`` of size m x n_i."""

    gains: Tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "gains", tuple(_as_matrix(k, f"K_{i + 1}") for i, k in enumerate(self.gains))
        )

    @property
    def K(self) -> np.ndarray:
        return np.hstack(self.gains)


@dataclass(frozen=True, eq=False)
class DynamicController:
    """``x_c' = A_c x_c + B_c y_hat``, ``u = C_c x_c + D_c y_hat``."""

    A_c: np.ndarray
    B_c: np.ndarray
    C_c: np.ndarray
    D_c: np.ndarray

    def __post_init__(self):
        n_c = np.array(self.A_c, dtype=float).shape[0]
        object.__setattr__(self, "A_c", _as_matrix(self.A_c, "A_c", rows=n_c, cols=n_c))
        object.__setattr__(self, "B_c", _as_matrix(self.B_c, "B_c", rows=n_c))
        object.__setattr__(self, "C_c", _as_matrix(self.C_c, "C_c", cols=n_c))
        object.__setattr__(self, "D_c", _as_matrix(self.D_c, "D_c"))

    @property
    def n_c(self) -> int:
        return self.A_c.shape[0]


ControllerModel = StaticController | DynamicController


@dataclass(frozen=True)
class NetworkModel:
    """Delay and span bounds: ``0 <= eta_m <= MAD < tau_M`` and ``N`` sensor nodes."""

    eta_m: float
    mad: float
    tau_m: float
    nodes: int

    def __post_init__(self):
        if self.nodes < 1:
            raise ValueError("network needs at least one sensor node")
        if not 0.0 <= self.eta_m <= self.mad:
            raise ValueError(f"delay bounds must satisfy 0 <= eta_m <= MAD (got {self.eta_m}, {self.mad})")
        if self.tau_m <= self.mad:
            raise ValueError(f"tau_M must exceed MAD (got tau_M={self.tau_m}, MAD={self.mad})")

    @property
    def mati(self) -> float:
        return self.tau_m - self.mad

    def with_span(self, tau_m: float) -> "NetworkModel":
        """Same delay bounds with another span; MAD falls back to eta_m if it no longer fits."""

        mad = self.mad if self.mad < tau_m else self.eta_m
        return NetworkModel(eta_m=self.eta_m, mad=mad, tau_m=tau_m, nodes=self.nodes)


@dataclass(frozen=True, eq=False)
class ClosedLoopModel:
    """Hybrid closed loop ``x' = A x + A1 x(s_k) + sum_{i != i*} B_i e_i + D w``.

    ``B`` and ``C`` hold the compact per-node blocks (n_cl x n_i and n_i x n_cl);
    the padded n_y forms of dynamic feedback are available through
    :meth:`padded_B` and :meth:`padded_C`.
    """

    A: np.ndarray
    A1: np.ndarray
    B: Tuple[np.ndarray, ...]
    C: Tuple[np.ndarray, ...]
    D: np.ndarray
    dynamic: bool = False
    vertices: Tuple["ClosedLoopModel", ...] = field(default=())

    @property
    def n_cl(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.D.shape[1]

    @property
    def nodes(self) -> int:
        return len(self.C)

    @property
    def node_dims(self) -> Tuple[int, ...]:
        return tuple(c.shape[0] for c in self.C)

    @property
    def n_y(self) -> int:
        return sum(self.node_dims)

    def node_slice(self, i: int) -> slice:
        start = sum(self.node_dims[:i])
        return slice(start, start + self.node_dims[i])

    def padded_B(self, i: int) -> np.ndarray:
        padded = np.zeros((self.n_cl, self.n_y))
        padded[:, self.node_slice(i)] = self.B[i]
        return padded

    def padded_C(self, i: int) -> np.ndarray:
        padded = np.zeros((self.n_y, self.n_cl))
        padded[self.node_slice(i), :] = self.C[i]
        return padded

    def pad_error(self, i: int, e_i) -> np.ndarray:
        padded = np.zeros(self.n_y)
        padded[self.node_slice(i)] = e_i
        return padded

    def nominal(self) -> "ClosedLoopModel":
        """This model without its polytope."""

        return ClosedLoopModel(A=self.A, A1=self.A1, B=self.B, C=self.C, D=self.D, dynamic=self.dynamic)


def _check_static(plant: PlantModel, ctrl: StaticController) -> None:
    if len(ctrl.gains) != len(plant.outputs):
        raise DimensionError(f"controller has {len(ctrl.gains)} gain blocks for {len(plant.outputs)} output nodes")
    for i, (gain, c_i) in enumerate(zip(ctrl.gains, plant.outputs)):
        if gain.shape != (plant.m, c_i.shape[0]):
            raise DimensionError(
                f"K_{i + 1} has shape {gain.shape}, expected ({plant.m}, {c_i.shape[0]}) to match B and C_{i + 1}"
            )
    if ctrl.K.shape[1] != plant.n_y:
        raise DimensionError(f"K has {ctrl.K.shape[1]} columns, expected n_y={plant.n_y}")


def _static_loop(A, B, D, plant: PlantModel, ctrl: StaticController) -> ClosedLoopModel:
    return ClosedLoopModel(
        A=A.copy(),
        A1=B @ ctrl.K @ plant.C,
        B=tuple(B @ k_i for k_i in ctrl.gains),
        C=plant.outputs,
        D=D.copy(),
    )


def build_static_closed_loop(plant: PlantModel, ctrl: StaticController) -> ClosedLoopModel:
    """``A1 = B K C`` and ``B_i = B K_i``, per vertex when the plant is polytopic."""

    if not isinstance(ctrl, StaticController):
        raise TypeError("build_static_closed_loop needs a StaticController")
    _check_static(plant, ctrl)
    nominal = _static_loop(plant.A, plant.B, plant.D, plant, ctrl)
    vertices = tuple(_static_loop(v.A, v.B, v.D, plant, ctrl) for v in plant.vertices)
    logger.debug("static closed loop: n=%d, N=%d, vertices=%d", nominal.n_cl, nominal.nodes, len(vertices))
    return ClosedLoopModel(
        A=nominal.A, A1=nominal.A1, B=nominal.B, C=nominal.C, D=nominal.D, vertices=vertices
    )


def _check_dynamic(plant: PlantModel, ctrl: DynamicController) -> None:
    n_c = ctrl.n_c
    if n_c == 0:
        raise DimensionError("dynamic controller needs n_c > 0")
    expected = {
        "B_c": (ctrl.B_c, (n_c, plant.n_y)),
        "C_c": (ctrl.C_c, (plant.m, n_c)),
        "D_c": (ctrl.D_c, (plant.m, plant.n_y)),
    }
    for name, (matrix, shape) in expected.items():
        if matrix.shape != shape:
            raise DimensionError(f"{name} has shape {matrix.shape}, expected {shape}")


def _dynamic_loop(A, B, D, plant: PlantModel, ctrl: DynamicController) -> ClosedLoopModel:
    n, n_c, q = plant.n, ctrl.n_c, D.shape[1]
    C = plant.C
    A_bar = np.block([[A, B @ ctrl.C_c], [np.zeros((n_c, n)), ctrl.A_c]])
    A1_bar = np.block([[B @ ctrl.D_c @ C, np.zeros((n, n_c))], [ctrl.B_c @ C, np.zeros((n_c, n_c))]])
    feed = np.vstack([B @ ctrl.D_c, ctrl.B_c])
    D_bar = np.vstack([D, np.zeros((n_c, q))])
    blocks, selectors = [], []
    start = 0
    for c_i in plant.outputs:
        width = c_i.shape[0]
        blocks.append(feed[:, start:start + width].copy())
        selectors.append(np.hstack([c_i, np.zeros((width, n_c))]))
        start += width
    return ClosedLoopModel(A=A_bar, A1=A1_bar, B=tuple(blocks), C=tuple(selectors), D=D_bar, dynamic=True)


def build_dynamic_closed_loop(plant: PlantModel, ctrl: DynamicController) -> ClosedLoopModel:
    """Augmented ``[x; x_c]`` loop with the zero paddings of the bar matrices."""

    if not isinstance(ctrl, DynamicController):
        raise TypeError("build_dynamic_closed_loop needs a DynamicController")
    _check_dynamic(plant, ctrl)
    nominal = _dynamic_loop(plant.A, plant.B, plant.D, plant, ctrl)
    vertices = tuple(_dynamic_loop(v.A, v.B, v.D, plant, ctrl) for v in plant.vertices)
    if len(plant.outputs) > 2:
        logger.info("dynamic feedback with N>2 uses the zero-padded output selector reading")
    return ClosedLoopModel(
        A=nominal.A,
        A1=nominal.A1,
        B=nominal.B,
        C=nominal.C,
        D=nominal.D,
        dynamic=True,
        vertices=vertices,
    )


def build_closed_loop(plant: PlantModel, ctrl: ControllerModel) -> ClosedLoopModel:
    if isinstance(ctrl, DynamicController):
        return build_dynamic_closed_loop(plant, ctrl)
    return build_static_closed_loop(plant, ctrl)


def vertex_models(cl: ClosedLoopModel) -> List[ClosedLoopModel]:
    """One model per polytope vertex, or ``[cl]`` for a certain plant."""

    if cl.vertices:
        return list(cl.vertices)
    return [cl]


def closed_loop_eigenvalues(cl: ClosedLoopModel) -> np.ndarray:
    return np.linalg.eigvals(cl.A + cl.A1)
