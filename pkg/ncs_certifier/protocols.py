"""Sensor scheduling: Try-Once-Discard and Round-Robin channel access."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np


def weighted_errors(errors: Sequence, weights: Sequence) -> np.ndarray:
    """``e_i^T Q_i e_i`` for every node."""

    if len(errors) != len(weights):
        raise ValueError(f"{len(errors)} error blocks for {len(weights)} weights")
    values = []
    for i, (e_i, q_i) in enumerate(zip(errors, weights)):
        e_i = np.atleast_1d(np.asarray(e_i, dtype=float))
        q_i = np.atleast_2d(np.asarray(q_i, dtype=float))
        if q_i.shape != (e_i.size, e_i.size):
            raise ValueError(f"node {i + 1}: weight has shape {q_i.shape} for an error block of size {e_i.size}")
        values.append(float(e_i @ q_i @ e_i))
    return np.array(values)


def tod_select(errors: Sequence, weights: Sequence) -> int:
    """Node with the largest weighted error; the smallest such index wins ties.

    Indices are 0-based.
    """

    return int(np.argmax(weighted_errors(errors, weights)))


def rr_select(k: int, order: Sequence[int]) -> int:
    """``order[k mod N]`` for a permutation ``order`` of ``0..N-1``."""

    if sorted(order) != list(range(len(order))):
        raise ValueError(f"round-robin order {tuple(order)} is not a permutation of 0..{len(order) - 1}")
    return int(order[k % len(order)])


@dataclass(frozen=True, eq=False)
class TodProtocol:
    weights: Tuple[np.ndarray, ...]

    name = "tod"

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(np.atleast_2d(np.asarray(q, dtype=float)) for q in self.weights))

    @classmethod
    def identity(cls, node_dims: Sequence[int]) -> "TodProtocol":
        return cls(tuple(np.eye(d) for d in node_dims))

    def select(self, k: int, errors: Sequence) -> int:
        return tod_select(errors, self.weights)


@dataclass(frozen=True)
class RoundRobinProtocol:
    order: Tuple[int, ...]

    name = "rr"

    def __post_init__(self):
        rr_select(0, self.order)

    @classmethod
    def natural(cls, nodes: int) -> "RoundRobinProtocol":
        return cls(tuple(range(nodes)))

    def select(self, k: int, errors: Sequence) -> int:
        return rr_select(k, self.order)


Protocol = TodProtocol | RoundRobinProtocol
