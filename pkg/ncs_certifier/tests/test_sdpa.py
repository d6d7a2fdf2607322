import numpy as np
import pytest

from ncs_certifier.lmi import (
    DecisionLayout,
    LmiProblem,
    ProblemParams,
    Sign,
    _positivity,
    assemble_theorem1,
    evaluate_constraints,
    make_constraint,
)
from ncs_certifier.model import NetworkModel
from ncs_certifier.scenario import load_scenario
from ncs_certifier.sdpa import SdpaFormatError, read_sdpa, round_trip_check, write_sdpa

PARAMS = ProblemParams(theorem="t2", alpha=0.0, eta_m=0.0, tau_m=0.01, nodes=2, node_dims=(1, 1), q=0, disturbance=False)


def toy_problem() -> LmiProblem:
    A = np.array([[-1.0, 0.5], [0.0, -2.0]])
    layout = DecisionLayout([("X", "sym", 2, True), ("s", "scalar", 1, True)])
    constraints = (
        make_constraint(layout, "lyap", Sign.ND, lambda v: A.T @ v["X"] + v["X"] @ A),
        make_constraint(layout, "cap", Sign.PSD, lambda v: np.array([[3.0 - v["s"]]])),
    ) + tuple(_positivity(layout))
    return LmiProblem(layout=layout, constraints=constraints, params=PARAMS)


def test_file_structure(tmp_path):
    path = write_sdpa(toy_problem(), tmp_path / "toy.dat-s", header="ncs-certifier test")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "* ncs-certifier test"
    assert lines[1].startswith("* theorem=t2")
    comments = [line for line in lines if line.startswith("* constraint")]
    assert [line.split()[2] for line in comments] == ["lyap", "cap", "X>0", "s>0"]
    body = lines[len(comments) + 2:]
    assert body[0] == "4"
    assert body[1] == "3"
    # lyap and X>0 as full 2x2 blocks, then the 1x1 constraints share a diagonal block
    assert body[2] == "2 2 -2"


def test_round_trip_preserves_margins(tmp_path):
    problem = toy_problem()
    x = np.random.default_rng(3).normal(size=problem.layout.size)
    rows = round_trip_check(problem, x, tmp_path / "toy.dat-s")
    assert [label for label, _, _ in rows] == ["lyap", "cap", "X>0", "s>0"]
    for _, before, after in rows:
        assert after == pytest.approx(before, abs=1e-12)


def test_reread_matrices_match_oriented_parts(tmp_path):
    problem = toy_problem()
    reread = read_sdpa(write_sdpa(problem, tmp_path / "toy.dat-s"))
    assert reread.m == problem.layout.size
    constant, coefficients = problem.constraint("lyap").oriented_parts()
    np.testing.assert_array_equal(reread.matrices[0][0], -constant)
    for j in range(reread.m):
        np.testing.assert_array_equal(reread.matrices[j + 1][0], coefficients[j])


def test_reactor_export(tmp_path):
    cl = load_scenario("batch-reactor").closed_loop()
    problem = assemble_theorem1(cl, NetworkModel(eta_m=0.0, mad=0.0, tau_m=0.01, nodes=2))
    rows = round_trip_check(problem, problem.layout.identity_point(), tmp_path / "reactor.dat-s")
    assert len(rows) == len(problem.constraints)
    assert rows[0][0] == "omega_1"


def test_tampered_value_detected(tmp_path):
    problem = toy_problem()
    path = write_sdpa(problem, tmp_path / "toy.dat-s")
    lines = path.read_text(encoding="utf-8").splitlines()
    for k, line in enumerate(lines):
        tokens = line.split()
        if len(tokens) == 5 and tokens[0] == "1" and not line.startswith("*"):
            tokens[4] = repr(float(tokens[4]) + 1.0)
            lines[k] = " ".join(tokens)
            break
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    x = problem.layout.identity_point()
    reread = read_sdpa(path)
    original = dict(evaluate_constraints(problem, x))
    assert any(abs(original[label] - value) > 1e-6 for label, value in reread.margins(x))


def test_malformed_entry_line(tmp_path):
    path = write_sdpa(toy_problem(), tmp_path / "toy.dat-s")
    path.write_text(path.read_text(encoding="utf-8") + "1 1 1\n", encoding="utf-8")
    with pytest.raises(SdpaFormatError, match="expected 5 fields"):
        read_sdpa(path)


def test_block_count_mismatch(tmp_path):
    path = tmp_path / "bad.dat-s"
    path.write_text("1\n2\n3\n0\n", encoding="utf-8")
    with pytest.raises(SdpaFormatError, match="block structure"):
        read_sdpa(path)


def test_wrong_vector_length(tmp_path):
    reread = read_sdpa(write_sdpa(toy_problem(), tmp_path / "toy.dat-s"))
    with pytest.raises(SdpaFormatError):
        reread.margins(np.zeros(2))
