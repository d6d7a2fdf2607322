"""Numerical checks of the Lyapunov-Krasovskii functionals along simulated trajectories.

Three functionals are supported:

* ``tod-n`` - TOD with general ``N``: ``V_e = V + sum_i e_i^T Q_i e_i``.
* ``n2`` - TOD or Round-Robin with ``N = 2``: the error term of the idle node is
  weighted by ``(t_{k+1} - t)/(tau_M - eta_m)`` and ``G_i = Q_i e^{2 alpha tau_M}``.
* ``rr-n`` - Round-Robin with ``N >= 2``, defined from ``t_{N-1}`` on.

``V = V~ + V_G`` where ``V~`` holds ``x^T P x`` and the four exponentially
weighted history integrals. Double integrals are reduced to single integrals
with piecewise-linear weights and every integral is computed by Gauss-Legendre
quadrature on the sub-intervals where the trajectory is analytic.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import quad

from .lmi import rr_gain_factor
from .model import ClosedLoopModel, NetworkModel
from .protocols import Protocol
from .simulator import (
    PiecewiseConstantSignal,
    Trajectory,
    UniformRandomTiming,
    evaluate_state,
    evaluate_states,
    generate_timing,
    simulate,
)

logger = logging.getLogger(__name__)

VARIANTS = ("tod-n", "n2", "rr-n")
DEFAULT_ORDER = 16
DIFF_STEP = 1e-7
BOUNDARY_GAP = 1e-6
FLOW_TOL = 1e-5
JUMP_TOL = 1e-8
QUAD_TOL = 1e-8
PSI_RTOL = 1e-7


class VerificationError(ValueError):
    """Raised when a functional cannot be evaluated or a check is not applicable."""


@dataclass(frozen=True, eq=False)
class FunctionalSpec:
    variant: str
    P: np.ndarray
    S0: np.ndarray
    S1: np.ndarray
    R0: np.ndarray
    R1: np.ndarray
    Q: Tuple[np.ndarray, ...]
    G: Tuple[np.ndarray, ...]
    U: Tuple[np.ndarray, ...]
    alpha: float
    eta_m: float
    tau_m: float
    b: float = 0.0
    order: int = DEFAULT_ORDER

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise VerificationError(f"unknown functional variant {self.variant!r}; choose one of {', '.join(VARIANTS)}")
        if self.variant == "n2" and self.nodes != 2:
            raise VerificationError(f"the n2 functional is defined for two nodes only, got N={self.nodes}")
        if self.variant == "rr-n" and self.nodes < 2:
            raise VerificationError("the rr-n functional needs at least two nodes")
        if self.tau_m <= self.eta_m:
            raise VerificationError(f"tau_M={self.tau_m} must exceed eta_m={self.eta_m}")
        if len(self.G) != self.nodes or len(self.U) != self.nodes:
            raise VerificationError("Q, G and U need one block per node")

    @property
    def nodes(self) -> int:
        return len(self.Q)

    @property
    def span(self) -> float:
        return self.tau_m - self.eta_m

    @classmethod
    def build(
        cls,
        variant: str,
        matrices: Dict[str, np.ndarray | float],
        alpha: float,
        eta_m: float,
        tau_m: float,
        nodes: int,
        order: int = DEFAULT_ORDER,
    ) -> "FunctionalSpec":
        """Functional from named matrices, forcing the variant's ``G_i``."""

        def mat(name):
            return np.atleast_2d(np.asarray(matrices[name], dtype=float))

        Q = tuple(mat(f"Q{i + 1}") for i in range(nodes))
        if variant == "n2":
            G = tuple(q * math.exp(2.0 * alpha * tau_m) for q in Q)
        elif variant == "rr-n":
            factor = rr_gain_factor(nodes, alpha, eta_m, tau_m)
            G = tuple(factor * q for q in Q)
        else:
            G = tuple(mat(f"G{i + 1}") for i in range(nodes))
        if all(f"U{i + 1}" in matrices for i in range(nodes)):
            U = tuple(mat(f"U{i + 1}") for i in range(nodes))
        else:
            U = tuple(q / max(nodes - 1, 1) for q in Q)
        return cls(
            variant=variant,
            P=mat("P"),
            S0=mat("S0"),
            S1=mat("S1"),
            R0=mat("R0"),
            R1=mat("R1"),
            Q=Q,
            G=G,
            U=U,
            alpha=float(alpha),
            eta_m=float(eta_m),
            tau_m=float(tau_m),
            b=float(matrices.get("b", 0.0)),
            order=order,
        )


@dataclass(frozen=True)
class FunctionalValue:
    t: float
    segment: int
    quadratic: float
    s0: float
    s1: float
    r0: float
    r1: float
    v_g: float
    error: float
    refinement: float = 0.0

    @property
    def v(self) -> float:
        """``V~ + V_G``, the part bounded by the ISS estimate."""

        return self.quadratic + self.s0 + self.s1 + self.r0 + self.r1 + self.v_g

    @property
    def total(self) -> float:
        return self.v + self.error


@lru_cache(maxsize=16)
def _gauss(order: int) -> Tuple[np.ndarray, np.ndarray]:
    return leggauss(order)


def _nodes(lo: float, hi: float, breaks: np.ndarray, order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss nodes and weights on ``[lo, hi]`` split at the breakpoints inside it."""

    if hi <= lo:
        return np.zeros(0), np.zeros(0)
    inner = breaks[(breaks > lo) & (breaks < hi)]
    edges = np.concatenate([[lo], inner, [hi]])
    x, w = _gauss(order)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _quad_form(X: np.ndarray, M: np.ndarray) -> np.ndarray:
    return np.einsum("ij,jk,ik->i", X, M, X)


def _output_weight(spec: FunctionalSpec, model: ClosedLoopModel) -> np.ndarray:
    return sum(c.T @ g @ c for c, g in zip(model.C, spec.G))


def _v_g_start(spec: FunctionalSpec, tr: Trajectory, k: int) -> float:
    if spec.variant == "rr-n" and k == spec.nodes - 1:
        return tr.segments[0].s
    return tr.segments[k].s


def _integrals(spec: FunctionalSpec, tr: Trajectory, t: float, k: int, order: int) -> Tuple[float, ...]:
    eta, tau, alpha = spec.eta_m, spec.tau_m, spec.alpha
    breaks = np.concatenate([[tr.t0], tr.breakpoints])
    near_nodes, near_w = _nodes(t - eta, t, breaks, order)
    far_nodes, far_w = _nodes(t - tau, t - eta, breaks, order)
    g_nodes, g_w = _nodes(_v_g_start(spec, tr, k), t, breaks, order)
    sizes = np.cumsum([near_nodes.size, far_nodes.size])
    X, Xd = evaluate_states(tr, np.concatenate([near_nodes, far_nodes, g_nodes]))
    X_near, X_far = X[:sizes[0]], X[sizes[0]:sizes[1]]
    Xd_near, Xd_far, Xd_g = Xd[:sizes[0]], Xd[sizes[0]:sizes[1]], Xd[sizes[1]:]

    decay_near = near_w * np.exp(2.0 * alpha * (near_nodes - t))
    decay_far = far_w * np.exp(2.0 * alpha * (far_nodes - t))
    decay_g = g_w * np.exp(2.0 * alpha * (g_nodes - t))

    s0 = float(decay_near @ _quad_form(X_near, spec.S0))
    s1 = float(decay_far @ _quad_form(X_far, spec.S1))
    r0 = eta * float(decay_near @ ((near_nodes - t + eta) * _quad_form(Xd_near, spec.R0)))
    r1 = spec.span * float(
        decay_far @ ((far_nodes - t + tau) * _quad_form(Xd_far, spec.R1))
        + decay_near @ (spec.span * _quad_form(Xd_near, spec.R1))
    )
    v_g = spec.span * float(decay_g @ _quad_form(Xd_g, _output_weight(spec, tr.model)))
    return s0, s1, r0, r1, v_g


def _error_term(spec: FunctionalSpec, tr: Trajectory, t: float, k: int) -> float:
    seg = tr.segments[k]
    weighted = [float(e @ q @ e) for e, q in zip(seg.errors, spec.Q)]
    if spec.variant == "tod-n":
        return sum(weighted)
    remaining = (seg.t_end - t) / spec.span
    if spec.variant == "n2":
        return remaining * weighted[1 - seg.active]
    total = 0.0
    for j in range(1, spec.nodes):
        node = tr.segments[k - j].active
        total += remaining / j * weighted[node]
    return total


def eval_functional(
    spec: FunctionalSpec,
    tr: Trajectory,
    t: float,
    segment: int | None = None,
    refine: bool = True,
) -> FunctionalValue:
    """``V_e(t)`` and its terms; ``segment`` selects the pre-jump value at a segment's closing instant."""

    if t < tr.t0:
        raise VerificationError(f"t={t} precedes the first updating instant t0={tr.t0}")
    k = tr.segment_index(t) if segment is None else segment
    if spec.variant == "rr-n" and k < spec.nodes - 1:
        raise VerificationError(f"the rr-n functional starts at t_{spec.nodes - 1}; t={t} lies in segment {k}")
    if tr.model.nodes != spec.nodes:
        raise VerificationError(f"functional has {spec.nodes} node weights, trajectory has {tr.model.nodes} nodes")
    x, _ = evaluate_state(tr, t, segment=k)
    quadratic = float(x @ spec.P @ x)
    terms = _integrals(spec, tr, t, k, spec.order)
    refinement = 0.0
    if refine:
        fine = _integrals(spec, tr, t, k, 2 * spec.order)
        coarse_total = quadratic + sum(terms)
        refinement = abs(sum(fine) - sum(terms)) / max(abs(coarse_total), np.finfo(float).tiny)
    error = _error_term(spec, tr, t, k)
    s0, s1, r0, r1, v_g = terms
    return FunctionalValue(
        t=float(t),
        segment=k,
        quadratic=quadratic,
        s0=s0,
        s1=s1,
        r0=r0,
        r1=r1,
        v_g=v_g,
        error=error,
        refinement=refinement,
    )


@dataclass(frozen=True)
class FlowCheck:
    times: np.ndarray
    residuals: np.ndarray
    values: np.ndarray
    skipped: int

    @property
    def worst(self) -> float:
        return float(np.max(self.residuals)) if self.residuals.size else -np.inf


@dataclass(frozen=True)
class JumpCheck:
    times: np.ndarray
    theta: np.ndarray
    residuals: np.ndarray
    psi: np.ndarray
    values: np.ndarray
    refinements: np.ndarray
    psi_reference: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def psi_deviation(self) -> float:
        """Largest gap between the Gauss and the adaptive values of ``Psi``, relative to the largest ``|Psi|``."""

        if not self.psi.size:
            return 0.0
        scale = max(float(np.max(np.abs(self.psi_reference))), np.finfo(float).tiny)
        return float(np.max(np.abs(self.psi - self.psi_reference))) / scale

    @property
    def worst(self) -> float:
        return float(np.max(self.residuals)) if self.residuals.size else -np.inf


@dataclass(frozen=True)
class IssCheck:
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    anchor: float
    violations: int
    worst_ratio: float
    error_violations: int = 0


def _near_kink(tr: Trajectory, t: float, spec: FunctionalSpec) -> bool:
    instants = np.array([t, t - spec.eta_m, t - spec.tau_m])
    breaks = np.concatenate([[tr.t0], tr.breakpoints])
    index = np.searchsorted(breaks, instants)
    for instant, i in zip(instants, index):
        for j in (i - 1, i):
            if 0 <= j < breaks.size and abs(breaks[j] - instant) < BOUNDARY_GAP:
                return True
    return False


def _flow_extra(spec: FunctionalSpec, tr: Trajectory, t: float, k: int) -> float:
    seg = tr.segments[k]
    extra = 0.0
    if spec.variant == "tod-n":
        for i, (e, u, q) in enumerate(zip(seg.errors, spec.U, spec.Q)):
            if i == seg.active:
                extra += 2.0 * spec.alpha * float(e @ q @ e)
            else:
                extra += float(e @ u @ e) / spec.span
    if spec.b and tr.model.q:
        w = tr.signal(t)
        extra += spec.b * float(w @ w)
    return extra


def check_flow(spec: FunctionalSpec, tr: Trajectory, grid) -> FlowCheck:
    """Residuals of the dissipation inequality at grid points inside segments.

    Points within ``1e-6`` of an instant where the right-hand side jumps, at
    ``t``, ``t - eta_m`` or ``t - tau_M``, are skipped.
    """

    times, residuals, values = [], [], []
    skipped = 0
    h = DIFF_STEP
    for t in np.asarray(grid, dtype=float):
        if t - 2 * h < tr.t0 or t + 2 * h > tr.t_end:
            skipped += 1
            continue
        k = tr.segment_index(t)
        if spec.variant == "rr-n" and k < spec.nodes - 1:
            skipped += 1
            continue
        if _near_kink(tr, t, spec):
            skipped += 1
            continue

        def value(at):
            return eval_functional(spec, tr, at, segment=k, refine=False).total

        coarse = (value(t + h) - value(t - h)) / (2 * h)
        fine = (value(t + h / 2) - value(t - h / 2)) / h
        derivative = (4.0 * fine - coarse) / 3.0
        current = eval_functional(spec, tr, t, segment=k, refine=False).total
        residuals.append(derivative + 2.0 * spec.alpha * current - _flow_extra(spec, tr, t, k))
        times.append(t)
        values.append(current)
    return FlowCheck(np.array(times), np.array(residuals), np.array(values), skipped)


def _weighted_output_integral(spec, tr, lo, hi, t_ref, node, order) -> float:
    breaks = np.concatenate([[tr.t0], tr.breakpoints])
    nodes, weights = _nodes(lo, hi, breaks, order)
    if nodes.size == 0:
        return 0.0
    _, Xd = evaluate_states(tr, nodes)
    c = tr.model.C[node]
    Y = Xd @ c.T
    decay = weights * np.exp(2.0 * spec.alpha * (nodes - t_ref))
    return float(decay @ _quad_form(Y, spec.Q[node]))


def _adaptive_output_integral(spec, tr, lo, hi, t_ref, node, order=None) -> float:
    """Same integral as :func:`_weighted_output_integral` by adaptive quadrature on pointwise states."""

    if hi <= lo:
        return 0.0
    breaks = np.concatenate([[tr.t0], tr.breakpoints])
    inner = breaks[(breaks > lo) & (breaks < hi)]
    c, q = tr.model.C[node], spec.Q[node]

    def integrand(t):
        _, xd = evaluate_state(tr, t)
        y = c @ xd
        return math.exp(2.0 * spec.alpha * (t - t_ref)) * float(y @ q @ y)

    value, _ = quad(
        integrand,
        lo,
        hi,
        points=inner if inner.size else None,
        limit=50 + 2 * inner.size,
        epsabs=1e-14,
        epsrel=1e-11,
    )
    return float(value)


def _psi(spec: FunctionalSpec, tr: Trajectory, k: int, integral=_weighted_output_integral) -> float:
    """Accumulated jump slack after boundary ``t_{k+1}`` of the round-robin functional."""

    N = spec.nodes
    seg = tr.segments
    t_next = seg[k + 1].t_start
    total = 0.0
    for j in range(N - 2):
        total += (N - 2 - j) * integral(
            spec, tr, seg[k - j - 1].s, seg[k + 1].s, t_next, seg[k - j].active, spec.order
        )
    total += (N - 1) * integral(spec, tr, seg[k].s, seg[k + 1].s, t_next, seg[k + 1].active, spec.order)
    return -spec.span * math.exp(2.0 * spec.alpha * (spec.tau_m + (N - 2) * spec.span)) * total


def _disturbance_budget(spec: FunctionalSpec, delta: float, elapsed: float) -> float:
    if spec.b == 0.0 or delta == 0.0:
        return 0.0
    if spec.alpha == 0.0:
        return spec.b * delta ** 2 * elapsed
    return spec.b * delta ** 2 * (1.0 - math.exp(-2.0 * spec.alpha * elapsed)) / (2.0 * spec.alpha)


def check_jumps(spec: FunctionalSpec, tr: Trajectory) -> JumpCheck:
    """Jump residuals at every interior updating instant.

    ``tod-n`` checks the strengthened non-increase, ``n2`` checks ``Theta <= 0``
    and ``rr-n`` checks the cumulative bound anchored at ``t_{N-1}``.
    """

    N = spec.nodes
    K = len(tr.segments)
    if spec.variant == "rr-n" and K < N + 1:
        raise VerificationError(f"the rr-n jump bound needs at least {N + 1} segments, trajectory has {K}")
    first = N - 1 if spec.variant == "rr-n" else 0
    anchor = eval_functional(spec, tr, tr.segments[first].t_start, segment=first) if spec.variant == "rr-n" else None
    delta = tr.signal.sup_norm if tr.model.q else 0.0
    times, theta, residuals, psi, psi_reference, values, refinements = [], [], [], [], [], [], []
    for k in range(first, K - 1):
        t_next = tr.segments[k + 1].t_start
        left = eval_functional(spec, tr, t_next, segment=k)
        right = eval_functional(spec, tr, t_next, segment=k + 1)
        jump = right.total - left.total
        seg = tr.segments[k]
        if spec.variant == "tod-n":
            slack = 0.0
            for i, (e, u, q) in enumerate(zip(seg.errors, spec.U, spec.Q)):
                if i == seg.active:
                    slack += 2.0 * spec.alpha * spec.span * float(e @ q @ e)
                else:
                    slack += float(e @ u @ e)
            residuals.append(jump + slack)
        elif spec.variant == "n2":
            residuals.append(jump)
        else:
            psi_k = _psi(spec, tr, k)
            psi.append(psi_k)
            psi_reference.append(_psi(spec, tr, k, integral=_adaptive_output_integral))
            elapsed = t_next - anchor.t
            bound = math.exp(-2.0 * spec.alpha * elapsed) * anchor.total + psi_k + _disturbance_budget(spec, delta, elapsed)
            residuals.append(right.total - bound)
        times.append(t_next)
        theta.append(jump)
        values.extend([left.total, right.total])
        refinements.extend([left.refinement, right.refinement])
    return JumpCheck(
        times=np.array(times),
        theta=np.array(theta),
        residuals=np.array(residuals),
        psi=np.array(psi),
        values=np.array(values),
        refinements=np.array(refinements),
        psi_reference=np.array(psi_reference),
    )


def check_iss_bound(spec: FunctionalSpec, tr: Trajectory, witness=None, grid=None, delta: float | None = None) -> IssCheck:
    """Pointwise ``V(t) <= e^{-2 alpha (t - anchor)} V_e(anchor) + b/(2 alpha) Delta^2``.

    The anchor is ``t0``, or ``t_{N-1}`` for the round-robin functional. ``V_e(anchor)``
    carries every weighted error, except for ``n2`` where it is the functional's own
    value with the idle node's error scaled by ``(t_1 - t_0)/(tau_M - eta_m)``.
    ``tod-n`` additionally bounds the weighted errors.
    """

    if spec.alpha <= 0.0:
        raise VerificationError(
            "the ISS bound divides by 2*alpha; re-certify the witness at a positive decay rate first (max_alpha)"
        )
    if witness is not None and not witness.feasible:
        raise VerificationError(f"witness status is {witness.status.value}, the ISS bound needs a feasible certificate")
    first = spec.nodes - 1 if spec.variant == "rr-n" else 0
    if first >= len(tr.segments):
        raise VerificationError(f"trajectory has {len(tr.segments)} segments, the anchor t_{first} is not reached")
    anchor_seg = tr.segments[first]
    anchor_t = anchor_seg.t_start
    anchor_value = eval_functional(spec, tr, anchor_t, segment=first, refine=False)
    if spec.variant == "n2":
        v_e_anchor = anchor_value.total
    else:
        v_e_anchor = anchor_value.v + sum(float(e @ q @ e) for e, q in zip(anchor_seg.errors, spec.Q))
    if delta is None:
        delta = tr.signal.sup_norm if tr.model.q else 0.0
    offset = spec.b * delta ** 2 / (2.0 * spec.alpha)
    if grid is None:
        grid = np.arange(anchor_t, tr.t_end, 1e-2)
    grid = np.asarray(grid, dtype=float)
    grid = grid[(grid >= anchor_t) & (grid <= tr.t_end)]
    c_tilde = math.exp(2.0 * spec.alpha * spec.span)
    scale = v_e_anchor + offset
    lhs, rhs = [], []
    error_violations = 0
    for t in grid:
        value = eval_functional(spec, tr, t, refine=False)
        decay = math.exp(-2.0 * spec.alpha * (t - anchor_t))
        lhs.append(value.v)
        rhs.append(decay * v_e_anchor + offset)
        if spec.variant == "tod-n":
            seg = tr.segments[value.segment]
            weighted = sum(float(e @ q @ e) for e, q in zip(seg.errors, spec.Q))
            if weighted > c_tilde * decay * v_e_anchor + offset + JUMP_TOL * scale:
                error_violations += 1
    lhs, rhs = np.array(lhs), np.array(rhs)
    excess = lhs - rhs
    violations = int(np.sum(excess > JUMP_TOL * scale))
    ratio = lhs / np.maximum(rhs, np.finfo(float).tiny)
    return IssCheck(
        times=grid,
        lhs=lhs,
        rhs=rhs,
        anchor=anchor_t,
        violations=violations,
        worst_ratio=float(np.max(ratio)) if ratio.size else 0.0,
        error_violations=error_violations,
    )


@dataclass
class VerificationReport:
    variant: str
    flow: FlowCheck | None = None
    jumps: JumpCheck | None = None
    iss: IssCheck | None = None
    flow_tol: float = FLOW_TOL
    jump_tol: float = JUMP_TOL
    quad_tol: float = QUAD_TOL
    psi_rtol: float = PSI_RTOL
    notes: List[str] = field(default_factory=list)

    @property
    def scale(self) -> float:
        values = [np.max(np.abs(c.values)) for c in (self.flow, self.jumps) if c is not None and c.values.size]
        return float(max(values)) if values else 1.0

    @property
    def refinement_deltas(self) -> np.ndarray:
        return self.jumps.refinements if self.jumps is not None else np.zeros(0)

    def checks(self) -> Dict[str, Tuple[bool, float]]:
        scale = self.scale
        result: Dict[str, Tuple[bool, float]] = {}
        if self.flow is not None:
            result["flow"] = (self.flow.worst <= self.flow_tol * scale, self.flow.worst)
        if self.jumps is not None:
            result["jumps"] = (self.jumps.worst <= self.jump_tol * scale, self.jumps.worst)
            if self.jumps.psi.size:
                deviation = self.jumps.psi_deviation
                nonpositive = bool(np.all(self.jumps.psi <= 0.0))
                result["psi"] = (nonpositive and deviation <= self.psi_rtol, deviation)
            worst_delta = float(np.max(self.refinement_deltas)) if self.refinement_deltas.size else 0.0
            result["quadrature"] = (worst_delta < self.quad_tol, worst_delta)
        if self.iss is not None:
            result["iss"] = (self.iss.violations == 0 and self.iss.error_violations == 0, self.iss.worst_ratio)
        return result

    @property
    def passed(self) -> bool:
        return all(ok for ok, _ in self.checks().values())

    def to_text(self) -> str:
        lines = [f"variant: {self.variant}", f"scale (max V_e): {self.scale:.6e}"]
        for name, (ok, worst) in self.checks().items():
            lines.append(f"{name}: {'PASS' if ok else 'FAIL'} worst={worst:.6e}")
        if self.flow is not None:
            lines.append(f"flow points: {self.flow.times.size} (skipped {self.flow.skipped})")
        if self.jumps is not None:
            lines.append(f"jump instants: {self.jumps.times.size}")
        if self.iss is not None:
            lines.append(f"iss grid points: {self.iss.times.size}, violations: {self.iss.violations}")
        lines.extend(f"note: {note}" for note in self.notes)
        return "\n".join(lines)


def omega_negative(spec: FunctionalSpec) -> bool:
    """Whether the TOD jump blocks are negative definite for these weights."""

    N = spec.nodes
    for q, u, g in zip(spec.Q, spec.U, spec.G):
        top = -(1.0 - 2.0 * spec.alpha * spec.span) / max(N - 1, 1) * q + u
        block = np.block([[top, q], [q, q - g * math.exp(-2.0 * spec.alpha * spec.tau_m)]])
        if np.linalg.eigvalsh(0.5 * (block + block.T))[-1] >= 0.0:
            return False
    return True


def verify_trajectory(spec: FunctionalSpec, tr: Trajectory, grid_points: int = 100, iss: bool = False) -> VerificationReport:
    report = VerificationReport(variant=spec.variant)
    if spec.variant == "tod-n" and not omega_negative(spec):
        report.notes.append("jump blocks Omega_i are not negative definite for these weights")
    start = tr.segments[spec.nodes - 1].t_start if spec.variant == "rr-n" else tr.t0
    grid = np.linspace(start, tr.t_end, grid_points + 2)[1:-1]
    report.flow = check_flow(spec, tr, grid)
    report.jumps = check_jumps(spec, tr)
    if iss:
        report.iss = check_iss_bound(spec, tr)
    return report


def _default_workers() -> int:
    value = os.environ.get("NCS_CERTIFIER_WORKERS")
    return int(value) if value else (os.cpu_count() or 1)


def verify_runs(
    cl: ClosedLoopModel,
    net: NetworkModel,
    spec: FunctionalSpec,
    protocol: Protocol,
    runs: int,
    seed: int = 0,
    horizon: float = 1.0,
    delta: float = 0.0,
    x0: Sequence[float] | None = None,
    grid_points: int = 100,
    iss: bool = False,
    workers: int | None = None,
) -> Tuple[List[VerificationReport], bool]:
    """Simulate ``runs`` seeded random timing realizations and check each one."""

    x0 = np.ones(cl.n_cl) if x0 is None else np.asarray(x0, dtype=float)

    def one(run: int) -> VerificationReport:
        run_seed = seed + run
        timing = generate_timing(net, UniformRandomTiming(run_seed), horizon=horizon)
        if cl.q and delta > 0.0:
            signal = PiecewiseConstantSignal.random_bounded(cl.q, delta, net.tau_m, horizon + net.tau_m, run_seed)
        else:
            signal = PiecewiseConstantSignal.zero(cl.q)
        tr = simulate(cl, net, protocol, timing, signal, x0, horizon)
        report = verify_trajectory(spec, tr, grid_points=grid_points, iss=iss)
        logger.info("run %d (seed %d): %s", run, run_seed, "PASS" if report.passed else "FAIL")
        return report

    with ThreadPoolExecutor(max_workers=workers or _default_workers()) as pool:
        reports = list(pool.map(one, range(runs)))
    return reports, all(r.passed for r in reports)
