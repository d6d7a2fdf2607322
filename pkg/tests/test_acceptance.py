"""End-to-end reproductions; run with NCS_CERTIFIER_SLOW=1."""

import numpy as np
import pytest

from ncs_certifier.lyapunov import FunctionalSpec, verify_runs
from ncs_certifier.model import NetworkModel, vertex_models
from ncs_certifier.protocols import RoundRobinProtocol, TodProtocol
from ncs_certifier.scenario import load_scenario
from ncs_certifier.sdp import solve_feasibility
from ncs_certifier.search import ASSEMBLERS, PUBLISHED_TABLES, max_alpha, table_run
from ncs_certifier.simulator import FixedTiming, generate_timing, simulate

pytestmark = pytest.mark.slow

SCENARIO_TABLES = {"batch-reactor": "ex2", "pendulum-n2": "ex1-n2"}


@pytest.fixture(scope="module")
def reactor():
    return load_scenario("batch-reactor")


@pytest.mark.parametrize("table_id", ["ex1-n2", "ex2"])
def test_table_matches_published_values(table_id):
    table = table_run(table_id, tol=1e-4)
    for row in table.result.rows:
        assert row.tau_max is not None, f"{row.theorem} eta_m={row.eta_m}"
        assert abs(row.tau_max - row.paper_value) <= 0.002, f"{row.theorem} eta_m={row.eta_m}"
    assert all(table.checks().values()), table.to_text()


def test_four_node_table_values():
    table = table_run("ex1-n4", tol=1e-4)
    expected = {("t1", 0.0): 0.003, ("t1", 0.01): 0.012, ("t2", 0.0): 0.006, ("t2", 0.01): 0.015}
    for (theorem, eta_m), value in expected.items():
        row = table.result.row(theorem, eta_m)
        assert row.paper_value == value
        assert row.tau_max is not None, f"{theorem} eta_m={eta_m}"
        assert abs(row.tau_max - value) <= 0.002, f"{theorem} eta_m={eta_m}: {row.tau_max}"
    assert table.checks()["monotone in eta_m"]


def test_decision_variable_counts():
    scenario = load_scenario("pendulum-n2")
    counts = PUBLISHED_TABLES["ex1-n2"]["decision_variables"]
    for theorem, expected in counts.items():
        cl = scenario.closed_loop()
        net = NetworkModel(eta_m=0.0, mad=0.0, tau_m=0.01, nodes=cl.nodes)
        problem = ASSEMBLERS[theorem](cl, net, disturbance=True)
        assert problem.layout.size == expected


@pytest.mark.parametrize(
    "scenario_name, theorem, variant",
    [
        ("batch-reactor", "t1", "tod-n"),
        ("batch-reactor", "t2", "rr-n"),
        ("batch-reactor", "t2", "n2"),
        ("pendulum-n2", "t1", "tod-n"),
        ("pendulum-n2", "t2", "rr-n"),
        ("pendulum-n2", "t2", "n2"),
    ],
)
def test_jump_conditions_hold_below_the_limit(scenario_name, theorem, variant):
    scenario = load_scenario(scenario_name)
    cl = scenario.closed_loop()
    tau = 0.8 * PUBLISHED_TABLES[SCENARIO_TABLES[scenario_name]]["rows"][theorem][0]
    net = NetworkModel(eta_m=0.0, mad=0.0, tau_m=tau, nodes=cl.nodes)
    problem = ASSEMBLERS[theorem](cl, net)
    witness = solve_feasibility(problem)
    assert witness.feasible, f"{theorem} at tau_M={tau}"
    matrices = witness.to_dict(problem)["matrices"]
    spec = FunctionalSpec.build(variant, matrices, alpha=0.0, eta_m=0.0, tau_m=tau, nodes=cl.nodes)
    # the polytopic pendulum is simulated at its first vertex
    model = vertex_models(cl)[0]
    protocol = TodProtocol(spec.Q) if theorem == "t1" else RoundRobinProtocol.natural(cl.nodes)
    reports, passed = verify_runs(model, net, spec, protocol, runs=100, seed=0, horizon=0.5, grid_points=20)
    assert passed, next(r.to_text() for r in reports if not r.passed)


@pytest.mark.parametrize("delta", [0.0, 0.1])
def test_iss_bound_at_certified_rate(reactor, delta):
    # t1 has no certificate at tau_M=0.03, eta_m=0 (its limit is 0.019), so the t2 witness is used
    cl = reactor.closed_loop()
    alpha, problem, witness = max_alpha(cl, "t2", 0.0, 0.03, disturbance=True)
    assert alpha > 0.0
    matrices = witness.to_dict(problem)["matrices"]
    spec = FunctionalSpec.build("n2", matrices, alpha=alpha, eta_m=0.0, tau_m=0.03, nodes=cl.nodes)
    net = NetworkModel(eta_m=0.0, mad=0.0, tau_m=0.03, nodes=cl.nodes)
    reports, passed = verify_runs(
        cl, net, spec, TodProtocol(spec.Q), runs=20, seed=0, horizon=20.0, delta=delta, grid_points=50, iss=True
    )
    assert len(reports) == 20
    assert passed, next(r.to_text() for r in reports if not r.passed)


def test_reactor_decays_under_fixed_timing(reactor):
    cl = reactor.closed_loop()
    net = reactor.network
    timing = generate_timing(net, FixedTiming(h=0.02, eta=0.01), horizon=20.0)
    x0 = np.ones(cl.n_cl)
    tr = simulate(cl, net, TodProtocol.identity(cl.node_dims), timing, None, x0, 20.0)
    assert np.linalg.norm(tr.segments[-1].x_end) / np.linalg.norm(x0) < 1e-4
