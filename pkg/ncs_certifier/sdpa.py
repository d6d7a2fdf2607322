"""SDPA sparse-format export and re-import of assembled LMI problems.

The exported SDPA primal reads ``X = sum_j x_j F_j - F_0 >= 0`` with one block
per constraint, so ``F_0`` is the negated oriented constant block and ``F_j``
the oriented coefficient blocks. All 1x1 constraints share one diagonal block
(negative size in the block-structure line). Labels and signs travel in ``*``
comment lines at the top of the file; SDPA readers skip them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .lmi import LmiProblem, Sign, evaluate_constraints

logger = logging.getLogger(__name__)

VALUE_FORMAT = "%.17g"


class SdpaFormatError(ValueError):
    """Raised when an SDPA file cannot be parsed."""


@dataclass(frozen=True)
class SdpaBlockInfo:
    label: str
    sign: Sign
    block: int  # 1-based block number
    position: int  # 1-based diagonal position inside a diagonal block, 0 otherwise


@dataclass(frozen=True, eq=False)
class SdpaProblem:
    """Dense view of an SDPA file: ``matrices[j][b]`` is block ``b`` of ``F_j``."""

    c: np.ndarray
    block_sizes: Tuple[int, ...]
    matrices: Tuple[Tuple[np.ndarray, ...], ...]
    constraints: Tuple[SdpaBlockInfo, ...]

    @property
    def m(self) -> int:
        return len(self.c)

    def oriented_block(self, block: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        result = -self.matrices[0][block - 1]
        for j in range(1, self.m + 1):
            if x[j - 1]:
                result = result + x[j - 1] * self.matrices[j][block - 1]
        return result

    def margins(self, x) -> List[Tuple[str, float]]:
        """Per-constraint smallest eigenvalues, in the order of the comment table."""

        x = np.asarray(x, dtype=float)
        if x.shape != (self.m,):
            raise SdpaFormatError(f"decision vector has shape {x.shape}, file declares {self.m} variables")
        cache: Dict[int, np.ndarray] = {}
        result = []
        for info in self.constraints:
            if info.block not in cache:
                cache[info.block] = self.oriented_block(info.block, x)
            block = cache[info.block]
            if info.position:
                value = float(block[info.position - 1, info.position - 1])
            else:
                value = float(np.linalg.eigvalsh(block)[0])
            result.append((info.label, value))
        return result


def _layout_blocks(problem: LmiProblem) -> Tuple[List[int], List[SdpaBlockInfo]]:
    sizes: List[int] = []
    infos: List[Tuple[int, SdpaBlockInfo]] = []
    scalar = [k for k, c in enumerate(problem.constraints) if c.dim == 1]
    for k, constraint in enumerate(problem.constraints):
        if constraint.dim == 1:
            continue
        sizes.append(constraint.dim)
        infos.append((k, SdpaBlockInfo(constraint.label, constraint.sign, len(sizes), 0)))
    if scalar:
        sizes.append(-len(scalar))
        for position, k in enumerate(scalar, start=1):
            c = problem.constraints[k]
            infos.append((k, SdpaBlockInfo(c.label, c.sign, len(sizes), position)))
    infos.sort(key=lambda item: item[0])
    return sizes, [info for _, info in infos]


def write_sdpa(problem: LmiProblem, path, objective: Sequence[float] | None = None, header: str = "") -> Path:
    """Write ``problem`` in SDPA sparse format and return the path written."""

    path = Path(path)
    sizes, infos = _layout_blocks(problem)
    m = problem.layout.size
    c = np.zeros(m) if objective is None else np.asarray(objective, dtype=float)
    lines = []
    if header:
        lines.append(f"* {header}")
    params = problem.params
    lines.append(
        f"* theorem={params.theorem} alpha={params.alpha!r} eta_m={params.eta_m!r} "
        f"tau_m={params.tau_m!r} nodes={params.nodes} disturbance={params.disturbance}"
    )
    for info in infos:
        lines.append(f"* constraint {info.label} {info.sign.value} block={info.block} pos={info.position}")
    lines.append(str(m))
    lines.append(str(len(sizes)))
    lines.append(" ".join(str(s) for s in sizes))
    lines.append(" ".join(VALUE_FORMAT % value for value in c))

    by_block: Dict[int, List[Tuple[int, np.ndarray, np.ndarray]]] = {}
    for info, constraint in zip(infos, problem.constraints):
        constant, coefficients = constraint.oriented_parts()
        by_block.setdefault(info.block, []).append((info.position, -constant, coefficients))

    for j in range(m + 1):
        for block in range(1, len(sizes) + 1):
            for position, neg_constant, coefficients in by_block[block]:
                matrix = neg_constant if j == 0 else coefficients[j - 1]
                if position:
                    value = matrix[0, 0]
                    if value != 0.0:
                        lines.append(f"{j} {block} {position} {position} {VALUE_FORMAT % value}")
                    continue
                rows, cols = np.nonzero(np.triu(matrix))
                for r, s in zip(rows, cols):
                    lines.append(f"{j} {block} {r + 1} {s + 1} {VALUE_FORMAT % matrix[r, s]}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("wrote SDPA file %s (%d variables, %d blocks)", path, m, len(sizes))
    return path


def _parse_comment(line: str) -> SdpaBlockInfo | None:
    parts = line[1:].split()
    if len(parts) != 5 or parts[0] != "constraint":
        return None
    try:
        return SdpaBlockInfo(
            label=parts[1],
            sign=Sign(parts[2]),
            block=int(parts[3].removeprefix("block=")),
            position=int(parts[4].removeprefix("pos=")),
        )
    except ValueError as exc:
        raise SdpaFormatError(f"malformed constraint comment: {line!r}") from exc


def read_sdpa(path) -> SdpaProblem:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    infos: List[SdpaBlockInfo] = []
    offset = 0
    while offset < len(lines) and (not lines[offset].strip() or lines[offset][0] in "*\""):
        info = _parse_comment(lines[offset]) if lines[offset].startswith("*") else None
        if info is not None:
            infos.append(info)
        offset += 1
    try:
        m = int(lines[offset].split()[0])
        nblocks = int(lines[offset + 1].split()[0])
        sizes = [int(token) for token in lines[offset + 2].replace(",", " ").replace("{", " ").replace("}", " ").split()]
        c = np.array([float(token) for token in lines[offset + 3].replace(",", " ").split()], dtype=float)
    except (IndexError, ValueError) as exc:
        raise SdpaFormatError(f"{path}: malformed SDPA header near line {offset + 1}") from exc
    if len(sizes) != nblocks:
        raise SdpaFormatError(f"{path}: block structure lists {len(sizes)} sizes for {nblocks} blocks")
    if len(c) != m:
        raise SdpaFormatError(f"{path}: objective has {len(c)} entries for {m} variables")

    matrices = [[np.zeros((abs(s), abs(s))) for s in sizes] for _ in range(m + 1)]
    for number, line in enumerate(lines[offset + 4:], start=offset + 5):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 5:
            raise SdpaFormatError(f"{path}:{number}: expected 5 fields, got {len(tokens)}")
        j, block, r, s = (int(token) for token in tokens[:4])
        value = float(tokens[4])
        if not 0 <= j <= m or not 1 <= block <= nblocks:
            raise SdpaFormatError(f"{path}:{number}: entry refers to matrix {j}, block {block}")
        matrix = matrices[j][block - 1]
        matrix[r - 1, s - 1] = value
        matrix[s - 1, r - 1] = value

    if not infos:
        infos = [
            SdpaBlockInfo(f"block{b}", Sign.PSD, b, 0) for b, size in enumerate(sizes, start=1) if size > 0
        ]
    return SdpaProblem(
        c=c,
        block_sizes=tuple(sizes),
        matrices=tuple(tuple(blocks) for blocks in matrices),
        constraints=tuple(infos),
    )


def round_trip_check(problem: LmiProblem, x, path, tol: float = 1e-9, header: str = "") -> List[Tuple[str, float, float]]:
    """Write, re-read and compare margins at ``x``; returns (label, before, after) rows.

    Raises :class:`SdpaFormatError` when any margin moved by more than ``tol``.
    """

    write_sdpa(problem, path, header=header)
    reread = read_sdpa(path)
    before = evaluate_constraints(problem, x)
    after = reread.margins(x)
    rows = []
    for (label, old), (label_after, new) in zip(before, after):
        if label != label_after:
            raise SdpaFormatError(f"constraint order changed on re-read: {label} became {label_after}")
        rows.append((label, old, new))
    worst = max((abs(old - new) for _, old, new in rows), default=0.0)
    if worst > tol * (1.0 + max((abs(old) for _, old, _ in rows), default=0.0)):
        raise SdpaFormatError(f"SDPA round trip changed a margin by {worst:.3e}")
    return rows
