"""Event-driven simulation of the sampled closed loop with scheduled sensor updates.

Between updating instants ``t_k = s_k + eta_k`` the state obeys the affine
dynamics ``x' = A x + A1 x(s_k) + sum_{i != i*_k} B_i e_i(t_k) + D w``; the
forcing is constant on every piece of a segment (the disturbance is piecewise
constant), so each piece is propagated exactly with the exponential of the
augmented matrix ``[[A, f], [0, 0]]``.

Node indices are 0-based throughout.
"""
from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import List, Tuple

import numpy as np
from scipy.linalg import expm

from .model import ClosedLoopModel, NetworkModel
from .protocols import Protocol

logger = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e150
BOUND_TOL = 1e-12


class TimingError(ValueError):
    """Raised when a timing policy or realization violates the network bounds."""


class SimulationError(RuntimeError):
    """Raised when a simulation or a state evaluation cannot be carried out."""


class DivergenceError(SimulationError):
    def __init__(self, time: float, message: str):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class FixedTiming:
    h: float
    eta: float

    tag = "fixed"


@dataclass(frozen=True)
class UniformRandomTiming:
    seed: int = 0

    tag = "random"


@dataclass(frozen=True)
class GridSweepTiming:
    """Cycles through ``levels`` delays and ``levels`` interval fractions, extremes included."""

    levels: int = 3

    tag = "grid"


TimingPolicy = FixedTiming | UniformRandomTiming | GridSweepTiming


@dataclass(frozen=True, eq=False)
class TimingRealization:
    s: np.ndarray
    eta: np.ndarray
    policy: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "s", np.asarray(self.s, dtype=float))
        object.__setattr__(self, "eta", np.asarray(self.eta, dtype=float))
        if self.s.shape != self.eta.shape or self.s.ndim != 1 or self.s.size < 2:
            raise TimingError("timing needs matching 1-D arrays of at least two sampling instants and delays")

    @property
    def t(self) -> np.ndarray:
        return self.s + self.eta

    def __len__(self) -> int:
        return self.s.size

    def validate(self, net: NetworkModel) -> None:
        t = self.t
        if self.s[0] != 0.0:
            raise TimingError(f"first sampling instant must be 0, got {self.s[0]}")
        if np.any(np.diff(self.s) <= 0):
            k = int(np.argmax(np.diff(self.s) <= 0))
            raise TimingError(f"sampling instants are not strictly increasing at k={k}")
        if np.any(self.eta < net.eta_m - BOUND_TOL) or np.any(self.eta > net.mad + BOUND_TOL):
            k = int(np.argmax((self.eta < net.eta_m - BOUND_TOL) | (self.eta > net.mad + BOUND_TOL)))
            raise TimingError(f"delay eta_{k}={self.eta[k]} outside [{net.eta_m}, {net.mad}]")
        gaps = np.diff(t)
        if np.any(gaps <= 0):
            k = int(np.argmax(gaps <= 0))
            raise TimingError(f"updating instants are not strictly increasing at k={k} (arrivals out of order)")
        spans = gaps + self.eta[:-1]
        if np.any(spans > net.tau_m + BOUND_TOL):
            k = int(np.argmax(spans > net.tau_m + BOUND_TOL))
            raise TimingError(f"t_{k + 1} - t_{k} + eta_{k} = {spans[k]:.6g} exceeds tau_M={net.tau_m}")


def _check_policy(net: NetworkModel, policy: TimingPolicy) -> None:
    if isinstance(policy, FixedTiming):
        if policy.h <= 0:
            raise TimingError(f"fixed sampling interval must be positive, got h={policy.h}")
        if not net.eta_m - BOUND_TOL <= policy.eta <= net.mad + BOUND_TOL:
            raise TimingError(f"fixed delay {policy.eta} outside [{net.eta_m}, {net.mad}]")
        if policy.h + policy.eta > net.tau_m + BOUND_TOL:
            raise TimingError(f"infeasible fixed timing: h + eta = {policy.h + policy.eta:.6g} > tau_M = {net.tau_m}")
    elif isinstance(policy, GridSweepTiming):
        if policy.levels < 1:
            raise TimingError("grid sweep needs at least one level")
    elif not isinstance(policy, UniformRandomTiming):
        raise TimingError(f"unknown timing policy {policy!r}")


def generate_timing(
    net: NetworkModel,
    policy: TimingPolicy,
    horizon: float | None = None,
    steps: int | None = None,
) -> TimingRealization:
    """Sampling instants and delays obeying the network bounds.

    Generation stops after ``steps`` intervals, or once an updating instant
    reaches ``horizon``.
    """

    if horizon is None and steps is None:
        raise TimingError("generate_timing needs a horizon or a number of steps")
    _check_policy(net, policy)
    rng = np.random.default_rng(policy.seed) if isinstance(policy, UniformRandomTiming) else None
    delta_min = 0.01 * (net.tau_m - net.mad)
    grid_eta = np.linspace(net.eta_m, net.mad, policy.levels) if isinstance(policy, GridSweepTiming) else None
    grid_fraction = np.linspace(0.0, 1.0, policy.levels) if isinstance(policy, GridSweepTiming) else None

    def next_eta(k: int) -> float:
        if isinstance(policy, FixedTiming):
            return policy.eta
        if rng is not None:
            return float(rng.uniform(net.eta_m, net.mad))
        return float(grid_eta[k % policy.levels])

    s = [0.0]
    eta = [next_eta(0)]
    t_last = eta[0]
    k = 0
    while (steps is not None and k < steps) or (steps is None and t_last < horizon):
        eta_next = next_eta(k + 1)
        if isinstance(policy, FixedTiming):
            gap = policy.h + eta_next - eta[-1]
        else:
            lo = max(delta_min, eta_next - eta[-1] + delta_min)
            hi = net.tau_m - eta[-1]
            if rng is not None:
                gap = float(rng.uniform(lo, hi))
            else:
                gap = lo + grid_fraction[(k // policy.levels) % policy.levels] * (hi - lo)
        t_last = t_last + gap
        s.append(t_last - eta_next)
        eta.append(eta_next)
        k += 1
    realization = TimingRealization(s=np.array(s), eta=np.array(eta), policy=policy.tag)
    realization.validate(net)
    logger.debug("generated %s timing with %d instants up to t=%.6g", policy.tag, len(s), t_last)
    return realization


@dataclass(frozen=True, eq=False)
class PiecewiseConstantSignal:
    """``w(t) = values[j]`` with ``j`` the number of change times ``<= t``."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.shape[0] != times.size + 1:
            raise ValueError(f"{times.size} change times need {times.size + 1} values, got {values.shape[0]}")
        if np.any(np.diff(times) <= 0):
            raise ValueError("signal change times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def zero(cls, q: int) -> "PiecewiseConstantSignal":
        return cls(times=np.zeros(0), values=np.zeros((1, q)))

    @classmethod
    def constant(cls, value) -> "PiecewiseConstantSignal":
        return cls(times=np.zeros(0), values=np.atleast_1d(np.asarray(value, dtype=float))[None, :])

    @classmethod
    def random_bounded(cls, q: int, delta: float, dwell: float, horizon: float, seed: int = 0) -> "PiecewiseConstantSignal":
        """Values redrawn every ``dwell`` with Euclidean norm at most ``delta``."""

        if dwell <= 0:
            raise ValueError("dwell time must be positive")
        rng = np.random.default_rng(seed)
        times = np.arange(dwell, horizon, dwell)
        draws = rng.uniform(-1.0, 1.0, size=(times.size + 1, q)) / np.sqrt(max(q, 1))
        return cls(times=times, values=delta * draws)

    @property
    def q(self) -> int:
        return self.values.shape[1]

    @property
    def sup_norm(self) -> float:
        if self.values.size == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    def __call__(self, t: float) -> np.ndarray:
        return self.values[int(np.searchsorted(self.times, t, side="right"))]

    def change_times(self, start: float, stop: float) -> np.ndarray:
        """Change times strictly inside ``(start, stop)``."""

        return self.times[(self.times > start) & (self.times < stop)]


@dataclass(frozen=True, eq=False)
class Piece:
    start: float
    x_start: np.ndarray
    forcing: np.ndarray


@dataclass(frozen=True, eq=False)
class Segment:
    """The interval ``[t_start, t_end)`` between two updating instants."""

    index: int
    t_start: float
    t_end: float
    s: float
    eta: float
    active: int
    x_sample: np.ndarray
    errors: Tuple[np.ndarray, ...]
    pieces: Tuple[Piece, ...]
    x_end: np.ndarray

    @property
    def x_start(self) -> np.ndarray:
        return self.pieces[0].x_start

    def piece_at(self, t: float) -> Piece:
        starts = [p.start for p in self.pieces]
        return self.pieces[max(bisect.bisect_right(starts, t) - 1, 0)]


@dataclass(frozen=True, eq=False)
class Trajectory:
    model: ClosedLoopModel
    x0: np.ndarray
    segments: Tuple[Segment, ...]
    timing: TimingRealization
    signal: PiecewiseConstantSignal
    protocol: str
    history: float

    @property
    def t0(self) -> float:
        return self.segments[0].t_start

    @property
    def t_end(self) -> float:
        return self.segments[-1].t_end

    @property
    def history_start(self) -> float:
        """Start of the constant initial history, ``-tau_M`` or earlier when ``t0 < 0``."""

        return min(-self.history, self.t0 - self.history)

    @property
    def boundaries(self) -> np.ndarray:
        return np.array([seg.t_start for seg in self.segments] + [self.t_end])

    @cached_property
    def breakpoints(self) -> np.ndarray:
        """Every instant where the right-hand side may jump: piece starts and the final instant."""

        return np.array([p.start for seg in self.segments for p in seg.pieces] + [self.t_end])

    def segment_index(self, t: float) -> int:
        """Segment containing ``t``; the final instant belongs to the last segment."""

        if t < self.t0 or t > self.t_end:
            raise SimulationError(f"t={t} outside the simulated range [{self.t0}, {self.t_end}]")
        starts = [seg.t_start for seg in self.segments]
        return min(bisect.bisect_right(starts, t) - 1, len(self.segments) - 1)


def _augmented(A: np.ndarray, forcing: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = A
    M[:n, n] = forcing
    return M


def _propagate(A: np.ndarray, piece: Piece, deltas) -> np.ndarray:
    """States at ``piece.start + deltas`` (shape (len(deltas), n))."""

    deltas = np.atleast_1d(np.asarray(deltas, dtype=float))
    n = A.shape[0]
    lifted = np.append(piece.x_start, 1.0)
    M = _augmented(A, piece.forcing)
    exponentials = expm(deltas[:, None, None] * M[None, :, :])
    states = exponentials[:, :n, :] @ lifted
    states[deltas == 0.0] = piece.x_start
    return states


def _forcing(cl: ClosedLoopModel, x_sample, errors, active: int, w) -> np.ndarray:
    f = cl.A1 @ x_sample
    for i, (B_i, e_i) in enumerate(zip(cl.B, errors)):
        if i != active:
            f = f + B_i @ e_i
    if cl.q:
        f = f + cl.D @ w
    return f


def _check_finite(x: np.ndarray, t: float, k: int) -> None:
    if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
        raise DivergenceError(t, f"state diverged at t={t:.6g} (segment {k})")


def evaluate_state(tr: Trajectory, t: float, segment: int | None = None) -> Tuple[np.ndarray, np.ndarray]:
    """Exact ``(x(t), x'(t))``.

    ``segment`` pins the segment used, which gives the left limit at its closing
    instant. Before ``t0`` the state is the constant initial history.
    """

    if segment is None:
        if t < tr.t0:
            if t < tr.history_start - BOUND_TOL:
                raise SimulationError(f"t={t} precedes the recorded history starting at {tr.history_start}")
            return tr.x0.copy(), np.zeros_like(tr.x0)
        segment = tr.segment_index(t)
    seg = tr.segments[segment]
    if t < seg.t_start - BOUND_TOL or t > seg.t_end + BOUND_TOL:
        raise SimulationError(f"t={t} outside segment {segment} [{seg.t_start}, {seg.t_end}]")
    piece = seg.piece_at(t)
    A = tr.model.A
    x = _propagate(A, piece, t - piece.start)[0]
    return x, A @ x + piece.forcing


def evaluate_states(tr: Trajectory, times) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`evaluate_state` over many times (right-continuous at boundaries)."""

    times = np.asarray(times, dtype=float)
    n = tr.x0.size
    X = np.empty((times.size, n))
    Xdot = np.zeros((times.size, n))
    if times.size == 0:
        return X, Xdot
    if np.any(times < tr.history_start - BOUND_TOL) or np.any(times > tr.t_end + BOUND_TOL):
        raise SimulationError(f"evaluation times outside [{tr.history_start}, {tr.t_end}]")
    before = times < tr.t0
    X[before] = tr.x0
    starts = np.array([seg.t_start for seg in tr.segments])
    seg_index = np.clip(np.searchsorted(starts, times, side="right") - 1, 0, len(tr.segments) - 1)
    A = tr.model.A
    for k in np.unique(seg_index[~before]):
        seg = tr.segments[k]
        mask = (~before) & (seg_index == k)
        piece_starts = np.array([p.start for p in seg.pieces])
        piece_index = np.clip(np.searchsorted(piece_starts, times[mask], side="right") - 1, 0, len(seg.pieces) - 1)
        rows = np.flatnonzero(mask)
        for p in np.unique(piece_index):
            piece = seg.pieces[p]
            chosen = rows[piece_index == p]
            states = _propagate(A, piece, times[chosen] - piece.start)
            X[chosen] = states
            Xdot[chosen] = states @ A.T + piece.forcing
    return X, Xdot


def _state_before(segments: List[Segment], x0: np.ndarray, A: np.ndarray, t: float) -> np.ndarray:
    """State at a sampling instant that lies inside the already simulated history."""

    if not segments or t < segments[0].t_start:
        return x0.copy()
    starts = [seg.t_start for seg in segments]
    k = bisect.bisect_right(starts, t) - 1
    seg = segments[k]
    if t > seg.t_end + BOUND_TOL:
        raise SimulationError(f"sampling instant {t} lies beyond the simulated history")
    piece = seg.piece_at(t)
    return _propagate(A, piece, t - piece.start)[0]


def simulate(
    cl: ClosedLoopModel,
    net: NetworkModel,
    protocol: Protocol,
    timing: TimingRealization,
    signal: PiecewiseConstantSignal | None,
    x0,
    horizon: float,
) -> Trajectory:
    """Simulate from ``t0 = eta_0`` until the first updating instant at or beyond ``horizon``.

    ``x0`` is the constant initial history; a plant-sized vector is padded with
    zero controller states.
    """

    timing.validate(net)
    t = timing.t
    if t[-1] < horizon:
        raise TimingError(f"timing ends at t={t[-1]:.6g}, before the horizon {horizon}")
    if net.nodes != cl.nodes:
        raise SimulationError(f"network has {net.nodes} nodes but the closed loop has {cl.nodes}")
    signal = signal or PiecewiseConstantSignal.zero(cl.q)
    if cl.q and signal.q != cl.q:
        raise SimulationError(f"disturbance signal has dimension {signal.q}, the loop expects {cl.q}")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size < cl.n_cl:
        x0 = np.concatenate([x0, np.zeros(cl.n_cl - x0.size)])
    if x0.size != cl.n_cl:
        raise SimulationError(f"initial state has {x0.size} entries, the loop state has {cl.n_cl}")

    A = cl.A
    segments: List[Segment] = []
    errors = tuple(-c_i @ x0 for c_i in cl.C)
    x_start = x0.copy()
    k = 0
    while True:
        active = protocol.select(k, errors)
        t_start, t_end = float(t[k]), float(t[k + 1])
        x_sample = _state_before(segments, x0, A, float(timing.s[k]))
        cuts = [t_start] + list(signal.change_times(t_start, t_end))
        pieces = []
        x_piece = x_start
        for j, start in enumerate(cuts):
            stop = cuts[j + 1] if j + 1 < len(cuts) else t_end
            piece = Piece(start=start, x_start=x_piece, forcing=_forcing(cl, x_sample, errors, active, signal(start)))
            pieces.append(piece)
            x_piece = _propagate(A, piece, stop - start)[0]
            _check_finite(x_piece, stop, k)
        segments.append(
            Segment(
                index=k,
                t_start=t_start,
                t_end=t_end,
                s=float(timing.s[k]),
                eta=float(timing.eta[k]),
                active=active,
                x_sample=x_sample,
                errors=errors,
                pieces=tuple(pieces),
                x_end=x_piece,
            )
        )
        if t_end >= horizon or k + 2 >= len(t):
            break
        x_next_sample = _state_before(segments, x0, A, float(timing.s[k + 1]))
        jump = [c_i @ (x_sample - x_next_sample) for c_i in cl.C]
        errors = tuple(jump[i] if i == active else errors[i] + jump[i] for i in range(cl.nodes))
        x_start = x_piece
        k += 1

    logger.debug("simulated %d segments with %s up to t=%.6g", len(segments), type(protocol).__name__, segments[-1].t_end)
    return Trajectory(
        model=cl,
        x0=x0,
        segments=tuple(segments),
        timing=timing,
        signal=signal,
        protocol=getattr(protocol, "name", type(protocol).__name__),
        history=net.tau_m,
    )


def trajectory_to_rows(tr: Trajectory, grid) -> Tuple[List[str], List[list]]:
    """Header and rows ``t, x_*, e_*, active (1-based), segment`` sampled exactly on ``grid``."""

    grid = np.asarray(grid, dtype=float)
    grid = grid[(grid >= tr.t0) & (grid <= tr.t_end)]
    X, _ = evaluate_states(tr, grid)
    n = tr.model.n_cl
    ny = tr.model.n_y
    header = ["t"] + [f"x{j + 1}" for j in range(n)] + [f"e{j + 1}" for j in range(ny)] + ["active", "segment"]
    rows = []
    for t_value, x in zip(grid, X):
        seg = tr.segments[tr.segment_index(float(t_value))]
        e = np.concatenate(seg.errors) if seg.errors else np.zeros(0)
        rows.append([float(t_value)] + [float(v) for v in x] + [float(v) for v in e] + [seg.active + 1, seg.index])
    return header, rows
