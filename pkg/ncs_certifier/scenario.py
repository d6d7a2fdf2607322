"""Loading scenario files from disk or from the bundled examples."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List

import numpy as np

from .model import (
    ClosedLoopModel,
    ControllerModel,
    DimensionError,
    DynamicController,
    NetworkModel,
    PlantModel,
    PlantVertex,
    StaticController,
    build_closed_loop,
)

logger = logging.getLogger(__name__)

BUNDLED = ("pendulum-n2", "pendulum-n4", "batch-reactor")
PROTOCOLS = ("tod", "rr")


class ScenarioError(ValueError):
    """Raised for unreadable or inconsistent scenario files."""

    def __init__(self, message: str, source: str = "<scenario>", line: int | None = None, field: str | None = None):
        self.source = source
        self.line = line
        self.field = field
        where = source if line is None else f"{source}:{line}"
        prefix = f"{where}: " if field is None else f"{where}: {field}: "
        super().__init__(prefix + message)


@dataclass
class AnalysisDefaults:
    alpha: float = 0.0
    disturbance: bool = False
    delta: float = 0.0


@dataclass
class Scenario:
    """A validated plant, controller and network with analysis defaults."""

    name: str
    plant: PlantModel
    controller: ControllerModel
    network: NetworkModel
    protocol: str = "tod"
    analysis: AnalysisDefaults = field(default_factory=AnalysisDefaults)
    raw: Dict[str, Any] = field(default_factory=dict, repr=False)
    source: str = "<scenario>"

    def closed_loop(self) -> ClosedLoopModel:
        return build_closed_loop(self.plant, self.controller)

    @property
    def digest(self) -> str:
        return hashlib.sha256(dumps(self.raw).encode("utf-8")).hexdigest()


def _is_matrix(value) -> bool:
    return (
        isinstance(value, list)
        and bool(value)
        and all(
            isinstance(row, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in row)
            for row in value
        )
    )


def _dump(value, indent: int) -> str:
    pad = "  " * indent
    inner = pad + "  "
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f"{inner}{json.dumps(key)}: {_dump(item, indent + 1)}" for key, item in value.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if _is_matrix(value):
        return "[\n" + ",\n".join(inner + json.dumps(row) for row in value) + "\n" + pad + "]"
    if isinstance(value, list) and any(isinstance(item, (dict, list)) for item in value):
        return "[\n" + ",\n".join(inner + _dump(item, indent + 1) for item in value) + "\n" + pad + "]"
    return json.dumps(value)


def dumps(data: Dict[str, Any]) -> str:
    """Canonical text: two-space indent, one matrix row per line, shortest float repr."""

    return _dump(data, 0) + "\n"


def _line_of(text: str, key: str) -> int | None:
    needle = json.dumps(key) + ":"
    for number, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return number
    return None


class _Context:
    def __init__(self, source: str, text: str):
        self.source = source
        self.text = text

    def error(self, message: str, key: str) -> ScenarioError:
        line = None
        for part in reversed(key.split(".")):
            line = _line_of(self.text, part.split("[", 1)[0])
            if line is not None:
                break
        return ScenarioError(message, source=self.source, line=line, field=key)

    def require(self, data: Dict[str, Any], key: str, path: str):
        if not isinstance(data, dict) or key not in data:
            raise self.error("missing required field", f"{path}.{key}" if path else key)
        return data[key]

    def matrix(self, value, key: str) -> np.ndarray:
        try:
            matrix = np.array(value, dtype=float)
        except (TypeError, ValueError) as exc:
            raise self.error(f"not a numeric matrix ({exc})", key) from exc
        if matrix.ndim != 2:
            raise self.error(f"expected a list of rows, got shape {matrix.shape}", key)
        return matrix

    def number(self, value, key: str) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(f"expected a number, got {value!r}", key)
        return float(value)


def _plant(ctx: _Context, data: Dict[str, Any]) -> PlantModel:
    outputs = [ctx.matrix(c, f"plant.outputs[{i}]") for i, c in enumerate(ctx.require(data, "outputs", "plant"))]
    descriptor = "E" in data
    a_key, b_key = ("A_f", "B_0") if descriptor else ("A", "B")
    A = ctx.matrix(ctx.require(data, a_key, "plant"), f"plant.{a_key}")
    B = ctx.matrix(ctx.require(data, b_key, "plant"), f"plant.{b_key}")
    D = ctx.matrix(data["D"], "plant.D") if "D" in data else np.zeros((A.shape[0], 0))
    vertices = []
    for j, vertex in enumerate(data.get("vertices", [])):
        path = f"plant.vertices[{j}]"
        vertices.append(
            (
                ctx.matrix(ctx.require(vertex, a_key, path), f"{path}.{a_key}"),
                ctx.matrix(vertex.get(b_key, B), f"{path}.{b_key}"),
                ctx.matrix(vertex["D"], f"{path}.D") if "D" in vertex else D,
            )
        )
    try:
        if descriptor:
            return PlantModel.from_descriptor(ctx.matrix(data["E"], "plant.E"), A, B, D, outputs, vertices)
        return PlantModel(
            A=A, B=B, D=D, outputs=tuple(outputs), vertices=tuple(PlantVertex(*v) for v in vertices)
        )
    except (DimensionError, np.linalg.LinAlgError) as exc:
        raise ctx.error(str(exc), "plant") from exc


def _controller(ctx: _Context, data: Dict[str, Any]) -> ControllerModel:
    kind = ctx.require(data, "type", "controller")
    try:
        if kind == "static":
            gains = ctx.require(data, "gains", "controller")
            return StaticController(tuple(ctx.matrix(k, f"controller.gains[{i}]") for i, k in enumerate(gains)))
        if kind == "dynamic":
            return DynamicController(
                *(ctx.matrix(ctx.require(data, key, "controller"), f"controller.{key}") for key in ("A_c", "B_c", "C_c", "D_c"))
            )
    except DimensionError as exc:
        raise ctx.error(str(exc), "controller") from exc
    raise ctx.error(f"unknown controller type {kind!r}; expected 'static' or 'dynamic'", "controller.type")


def _network(ctx: _Context, data: Dict[str, Any]) -> NetworkModel:
    values = {key: ctx.number(ctx.require(data, key, "network"), f"network.{key}") for key in ("eta_m", "mad", "tau_m")}
    nodes = ctx.require(data, "nodes", "network")
    if isinstance(nodes, bool) or not isinstance(nodes, int):
        raise ctx.error(f"expected an integer node count, got {nodes!r}", "network.nodes")
    try:
        return NetworkModel(nodes=nodes, **values)
    except ValueError as exc:
        raise ctx.error(str(exc), "network") from exc


def parse_scenario(data: Dict[str, Any], source: str = "<scenario>", text: str = "") -> Scenario:
    """Validate a decoded scenario document and build its models."""

    ctx = _Context(source, text)
    if not isinstance(data, dict):
        raise ScenarioError("top level must be an object", source=source)
    name = str(data.get("name", Path(source).stem))
    plant = _plant(ctx, ctx.require(data, "plant", ""))
    controller = _controller(ctx, ctx.require(data, "controller", ""))
    network = _network(ctx, ctx.require(data, "network", ""))
    if network.nodes != len(plant.outputs):
        raise ctx.error(f"network declares {network.nodes} nodes, the plant has {len(plant.outputs)} output blocks", "network.nodes")
    protocol = data.get("protocol", "tod")
    if protocol not in PROTOCOLS:
        raise ctx.error(f"unknown protocol {protocol!r}; expected one of {', '.join(PROTOCOLS)}", "protocol")
    analysis_data = data.get("analysis", {})
    analysis = AnalysisDefaults(
        alpha=ctx.number(analysis_data.get("alpha", 0.0), "analysis.alpha"),
        disturbance=bool(analysis_data.get("disturbance", False)),
        delta=ctx.number(analysis_data.get("delta", 0.0), "analysis.delta"),
    )
    if analysis.alpha < 0 or analysis.delta < 0:
        raise ctx.error("alpha and delta must be nonnegative", "analysis")
    scenario = Scenario(
        name=name,
        plant=plant,
        controller=controller,
        network=network,
        protocol=protocol,
        analysis=analysis,
        raw=data,
        source=source,
    )
    try:
        scenario.closed_loop()
    except (DimensionError, TypeError) as exc:
        raise ctx.error(str(exc), "controller") from exc
    logger.debug("loaded scenario %s from %s (n=%d, N=%d)", name, source, plant.n, network.nodes)
    return scenario


def list_bundled() -> List[str]:
    return list(BUNDLED)


def bundled_path(name: str):
    return resources.files(__package__).joinpath("scenarios", f"{name}.json")


def read_text(target) -> tuple[str, str]:
    """Text and display name of a scenario given by path or bundled name."""

    if isinstance(target, str) and target in BUNDLED:
        path = bundled_path(target)
        return path.read_text(encoding="utf-8"), target
    path = Path(target).expanduser()
    if not path.is_file():
        raise ScenarioError(
            f"no such file (bundled scenarios: {', '.join(list_bundled())})", source=str(path)
        )
    return path.read_text(encoding="utf-8"), str(path)


def load_scenario(target) -> Scenario:
    """Load and validate a scenario file, or one of the bundled examples by name."""

    text, source = read_text(target)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, source=source, line=exc.lineno) from exc
    return parse_scenario(data, source=source, text=text)
