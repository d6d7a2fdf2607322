import unittest
from dataclasses import replace

import numpy as np
import pytest

from ncs_certifier.lmi import (
    AssemblyError,
    DecisionLayout,
    LmiProblem,
    ProblemParams,
    Sign,
    _positivity,
    assemble_theorem1,
    assemble_theorem2,
    jump_weight_margins,
    make_constraint,
)
from ncs_certifier.model import NetworkModel
from ncs_certifier.scenario import load_scenario
from ncs_certifier.sdp import (
    CertificateWitness,
    SolverError,
    SolverOptions,
    Status,
    default_backend,
    solve_feasibility,
    verify_witness,
)
from ncs_certifier.sdp import CERTIFICATE_RTOL, _classify, _dual_bound

TOY_PARAMS = ProblemParams(theorem="t1", alpha=0.0, eta_m=0.0, tau_m=0.01, nodes=2, node_dims=(1, 1), q=0, disturbance=False)


def lyapunov_problem(A) -> LmiProblem:
    """``X > 0`` and ``A^T X + X A < 0``: feasible exactly when ``A`` is Hurwitz."""

    A = np.asarray(A, dtype=float)
    layout = DecisionLayout([("X", "sym", A.shape[0], True)])
    lyap = make_constraint(layout, "lyap", Sign.ND, lambda v: A.T @ v["X"] + v["X"] @ A)
    return LmiProblem(layout=layout, constraints=(lyap,) + tuple(_positivity(layout)), params=TOY_PARAMS)


def scalar_problem(offset: float) -> LmiProblem:
    """``p > 0`` and ``offset - p >= 0``, bounded by the box."""

    layout = DecisionLayout([("p", "scalar", 1, True)])
    upper = make_constraint(layout, "upper", Sign.PSD, lambda v: np.array([[offset - v["p"]]]))
    return LmiProblem(layout=layout, constraints=(upper,) + tuple(_positivity(layout)), params=TOY_PARAMS)


STABLE = [[-1.0, 2.0], [0.0, -3.0]]
# anti-Hurwitz: the best normalized margin is -8/3
UNSTABLE = [[1.0, 0.0], [0.0, 2.0]]


@pytest.mark.parametrize("backend", ["cvxpy", "ascent"])
def test_lyapunov_toy_feasible(backend):
    witness = solve_feasibility(lyapunov_problem(STABLE), SolverOptions(backend=backend))
    assert witness.status is Status.FEASIBLE
    assert witness.min_margin >= witness.epsilon
    assert witness.backend == backend


@pytest.mark.parametrize("backend", ["cvxpy", "ascent"])
def test_lyapunov_toy_infeasible(backend):
    witness = solve_feasibility(lyapunov_problem(UNSTABLE), SolverOptions(backend=backend))
    assert witness.status is Status.INFEASIBLE
    assert witness.objective < 0
    assert witness.diagnostics["dual_bound"] < 0
    assert witness.diagnostics["certificate_residual"] <= CERTIFICATE_RTOL


def test_non_homogeneous_toy_uses_box():
    problem = scalar_problem(1.0)
    assert not problem.homogeneous
    witness = solve_feasibility(problem, SolverOptions(backend="cvxpy"))
    assert witness.feasible
    assert 0.0 < witness.x[0] < 1.0


def test_non_homogeneous_toy_infeasible():
    witness = solve_feasibility(scalar_problem(-1.0), SolverOptions(backend="cvxpy"))
    assert witness.status is Status.INFEASIBLE
    assert witness.objective == pytest.approx(-0.5, abs=1e-5)


def test_status_comes_from_recomputed_margins(monkeypatch):
    import ncs_certifier.sdp as sdp

    problem = lyapunov_problem(UNSTABLE)

    def lying_backend(p, opts):
        return p.layout.identity_point(), 1.0, 3, True, {}, None

    monkeypatch.setattr(sdp, "_solve_cvxpy", lying_backend)
    witness = solve_feasibility(problem, SolverOptions(backend="cvxpy"))
    assert not witness.feasible
    assert witness.status is Status.ITERATION_LIMIT


def test_negative_objective_without_certificate_is_inconclusive(monkeypatch):
    import ncs_certifier.sdp as sdp

    def stalled_backend(p, opts):
        return p.layout.identity_point(), -0.0152, 10078, True, {"stationarity": 0.42}, None

    monkeypatch.setattr(sdp, "_solve_ascent", stalled_backend)
    witness = solve_feasibility(lyapunov_problem(UNSTABLE), SolverOptions(backend="ascent"))
    assert witness.status is Status.ITERATION_LIMIT


def test_dual_bound_of_scalar_toy():
    problem = scalar_problem(-1.0)
    bound, residual = _dual_bound(problem, [np.array([[0.5]]), np.array([[0.5]])], SolverOptions(backend="cvxpy"))
    assert bound == pytest.approx(-0.5)
    assert residual == 0.0


def test_dual_bound_of_lyapunov_toy():
    # Z = diag(2/3, 1/3) on the Lyapunov block, nothing on X > 0
    duals = [np.diag([2.0 / 3.0, 1.0 / 3.0]), np.zeros((2, 2))]
    bound, residual = _dual_bound(lyapunov_problem(UNSTABLE), duals, SolverOptions())
    assert bound == pytest.approx(-8.0 / 3.0)
    assert residual == pytest.approx(0.0, abs=1e-12)
    _, off = _dual_bound(lyapunov_problem(UNSTABLE), [np.diag([1.0, 0.0]), np.zeros((2, 2))], SolverOptions())
    assert off > CERTIFICATE_RTOL


def test_classify_needs_a_strictly_negative_bound():
    margins = [("lyap", -1e-3)]
    assert _classify(margins, margins, 1e-7, bound=5e-8, residual=0.0) is Status.ITERATION_LIMIT
    assert _classify(margins, margins, 1e-7, bound=-1e-12, residual=0.0, slack=1e-9) is Status.ITERATION_LIMIT
    assert _classify(margins, margins, 1e-7, bound=-0.2, residual=1e-3) is Status.ITERATION_LIMIT
    assert _classify(margins, margins, 1e-7, bound=-0.2, residual=0.0) is Status.INFEASIBLE
    assert _classify([("lyap", 1.0)], [("lyap", 1.0)], 1e-7, bound=-0.2, residual=0.0) is Status.FEASIBLE


def test_broken_jump_weights_reject_the_witness(monkeypatch):
    import ncs_certifier.sdp as sdp

    problem = replace(lyapunov_problem(STABLE), params=replace(TOY_PARAMS, alpha=0.1))
    monkeypatch.setattr(sdp, "jump_weight_margins", lambda p, x: [("rate", 0.998), ("U1", -1e-3)])
    with pytest.raises(SolverError, match="U1"):
        solve_feasibility(problem, SolverOptions(backend="cvxpy"))


def test_non_finite_data_rejected():
    problem = lyapunov_problem([[np.nan, 0.0], [0.0, -1.0]])
    with pytest.raises(SolverError, match="lyap"):
        solve_feasibility(problem)


def test_backend_from_environment(monkeypatch):
    monkeypatch.setenv("NCS_CERTIFIER_BACKEND", "ascent")
    assert default_backend() == "ascent"
    assert SolverOptions().backend == "ascent"
    monkeypatch.setenv("NCS_CERTIFIER_BACKEND", "bogus")
    assert default_backend() == "cvxpy"
    with pytest.raises(ValueError):
        SolverOptions(backend="bogus")


class WitnessTests(unittest.TestCase):
    def test_round_trip_through_dict(self):
        problem = lyapunov_problem(STABLE)
        witness = solve_feasibility(problem)
        data = witness.to_dict()
        self.assertNotIn("matrices", data)
        restored = CertificateWitness.from_dict(data)
        self.assertEqual(restored.status, witness.status)
        np.testing.assert_array_equal(restored.x, witness.x)
        self.assertEqual(restored.params, witness.params)

    def test_malformed_dict(self):
        with self.assertRaises(ValueError):
            CertificateWitness.from_dict({"x": [1.0]})

    def test_independent_margins_agree(self):
        problem = lyapunov_problem(STABLE)
        witness = solve_feasibility(problem)
        for (label, first), (label2, second) in zip(witness.margins, verify_witness(problem, witness.x)):
            self.assertEqual(label, label2)
            self.assertAlmostEqual(first, second, places=9)


class ReactorFeasibilityTests(unittest.TestCase):
    """Spans well inside and well outside the published limits (0.019 and 0.035 at eta_m=0)."""

    def setUp(self):
        self.cl = load_scenario("batch-reactor").closed_loop()

    def decide(self, assemble, tau_m):
        net = NetworkModel(eta_m=0.0, mad=0.0, tau_m=tau_m, nodes=2)
        return solve_feasibility(assemble(self.cl, net))

    def test_theorem1_inside(self):
        self.assertTrue(self.decide(assemble_theorem1, 0.012).feasible)

    def test_theorem1_outside(self):
        self.assertFalse(self.decide(assemble_theorem1, 0.03).feasible)

    def test_theorem2_inside(self):
        witness = self.decide(assemble_theorem2, 0.028)
        self.assertTrue(witness.feasible)
        self.assertTrue(all(v >= witness.epsilon for _, v in witness.margins))

    def test_theorem2_outside(self):
        self.assertFalse(self.decide(assemble_theorem2, 0.05).feasible)

    def test_witness_dict_carries_named_matrices(self):
        net = NetworkModel(eta_m=0.0, mad=0.0, tau_m=0.02, nodes=2)
        problem = assemble_theorem2(self.cl, net)
        data = solve_feasibility(problem).to_dict(problem)
        self.assertEqual(len(data["matrices"]["P"]), 6)
        np.testing.assert_allclose(data["matrices"]["U1"], data["matrices"]["Q1"])
        self.assertEqual(data["params"]["node_dims"], [1, 1])

    def test_backends_agree_inside_the_limit(self):
        net = NetworkModel(eta_m=0.0, mad=0.0, tau_m=0.010, nodes=2)
        problem = assemble_theorem1(self.cl, net)
        conic = solve_feasibility(problem, SolverOptions(backend="cvxpy"))
        ascent = solve_feasibility(problem, SolverOptions(backend="ascent", max_iter=3000))
        self.assertIs(conic.status, Status.FEASIBLE)
        self.assertIn(ascent.status, (Status.FEASIBLE, Status.ITERATION_LIMIT))
        if ascent.feasible:
            self.assertGreaterEqual(min(v for _, v in verify_witness(problem, ascent.x)), ascent.epsilon)

    def test_theorem1_witness_keeps_jump_weights_at_positive_rate(self):
        net = NetworkModel(eta_m=0.0, mad=0.0, tau_m=0.010, nodes=2)
        problem = assemble_theorem1(self.cl, net, alpha=0.05)
        witness = solve_feasibility(problem)
        self.assertTrue(witness.feasible)
        margins = dict(jump_weight_margins(problem, witness.x))
        self.assertAlmostEqual(margins["rate"], 1.0 - 2.0 * 0.05 * 0.010)
        self.assertTrue(all(v > 0.0 for v in margins.values()))
        self.assertEqual(witness.diagnostics["jump_weight_margin"], min(margins.values()))
        with self.assertRaises(AssemblyError):
            jump_weight_margins(assemble_theorem2(self.cl, net, alpha=0.05), witness.x)

    def test_deterministic_reruns(self):
        first = self.decide(assemble_theorem2, 0.02)
        second = self.decide(assemble_theorem2, 0.02)
        np.testing.assert_array_equal(first.x, second.x)


if __name__ == "__main__":
    unittest.main()
