import csv
import json
import unittest
from types import SimpleNamespace

import numpy as np
import pytest

import ncs_certifier.search as search
from ncs_certifier import __version__
from ncs_certifier.cli import format_search, header_line, main, parse_timing
from ncs_certifier.scenario import load_scenario
from ncs_certifier.sdp import CertificateWitness, Status
from ncs_certifier.search import CSV_COLUMNS, SearchResult, SearchRow
from ncs_certifier.simulator import FixedTiming, GridSweepTiming, UniformRandomTiming

STUB_PROBLEM = SimpleNamespace(layout=SimpleNamespace(size=7))


def fake_probe(limit, stall=False):
    def probe(cl, theorem, eta_m, tau, alpha=0.0, disturbance=False, opts=None):
        if tau <= limit:
            status = Status.FEASIBLE
        else:
            status = Status.ITERATION_LIMIT if stall else Status.INFEASIBLE
        witness = CertificateWitness(x=np.zeros(1), margins=(("m", limit - tau),), status=status, iterations=2, seconds=0.0)
        return STUB_PROBLEM, witness

    return probe


def read_csv(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    return lines[0], list(csv.reader(lines[1:]))


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_missing_required_argument():
    with pytest.raises(SystemExit) as info:
        main(["search"])
    assert info.value.code == 2


def test_unknown_scenario_is_usage_error(capsys):
    assert main(["search", "--scenario", "no-such-file.json"]) == 2
    assert "bundled scenarios" in capsys.readouterr().err


def test_simulate_writes_trajectory(tmp_path, capsys):
    out = tmp_path / "traj.csv"
    code = main(["simulate", "--scenario", "batch-reactor", "--timing", "fixed:0.02,0.01", "--horizon", "0.1", "--out", str(out)])
    assert code == 0
    header, rows = read_csv(out)
    digest = load_scenario("batch-reactor").digest[:12]
    assert header.startswith(f"# ncs-certifier {__version__} scenario={digest} params=")
    assert "seed=0" in header and "protocol=tod" in header
    assert rows[0] == ["t", "x1", "x2", "x3", "x4", "x5", "x6", "e1", "e2", "active", "segment"]
    assert float(rows[1][0]) == pytest.approx(0.01)
    assert "Simulated batch-reactor" in capsys.readouterr().out


def test_simulate_respects_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("NCS_CERTIFIER_OUTPUT_DIR", str(tmp_path / "results"))
    assert main(["simulate", "--scenario", "pendulum-n2", "--horizon", "0.05", "--seed", "4", "--out", "run.csv"]) == 0
    header, _ = read_csv(tmp_path / "results" / "run.csv")
    assert "seed=4" in header


@pytest.mark.parametrize(
    "argv",
    [
        ["--timing", "fixed:0.03,0.01"],
        ["--timing", "bogus"],
        ["--vertex", "3"],
        ["--x0", "1,x"],
    ],
)
def test_simulate_input_errors(argv, capsys):
    assert main(["simulate", "--scenario", "batch-reactor", "--horizon", "0.1"] + argv) == 2
    assert "error:" in capsys.readouterr().err


def test_search_writes_csv(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(search, "probe", fake_probe(0.0347))
    out = tmp_path / "search.csv"
    code = main(["search", "--scenario", "batch-reactor", "--theorem", "t2", "--eta-m", "0,0.01", "--workers", "2", "--out", str(out)])
    assert code == 0
    header, rows = read_csv(out)
    assert "theorem=t2" in header
    assert rows[0] == ["eta_m", "theorem", "tau_max", "status", "paper_value", "iterations", "seconds"]
    assert [row[0] for row in rows[1:]] == ["0.0", "0.01"]
    assert all(row[3] == "certified" for row in rows[1:])
    assert "Maximum tau_M for batch-reactor" in capsys.readouterr().out


def test_search_without_certificate_fails(monkeypatch):
    monkeypatch.setattr(search, "probe", fake_probe(-1.0))
    assert main(["search", "--scenario", "batch-reactor"]) == 1


def test_strict_search_is_health_error(monkeypatch, capsys):
    monkeypatch.setattr(search, "probe", fake_probe(0.03, stall=True))
    assert main(["search", "--scenario", "batch-reactor", "--strict"]) == 3
    assert "numerical error" in capsys.readouterr().err


def test_table_with_published_limits(tmp_path, monkeypatch):
    rows = search.PUBLISHED_TABLES["ex2"]["rows"]
    etas = search.PUBLISHED_TABLES["ex2"]["eta_m"]

    def probe(cl, theorem, eta_m, tau, alpha=0.0, disturbance=False, opts=None):
        return fake_probe(dict(zip(etas, rows[theorem]))[eta_m])(cl, theorem, eta_m, tau)

    monkeypatch.setattr(search, "probe", probe)
    out = tmp_path / "ex2.csv"
    assert main(["table", "--id", "ex2", "--tol", "1e-4", "--out", str(out)]) == 0
    _, written = read_csv(out)
    assert len(written) == 13
    assert tuple(written[0]) == CSV_COLUMNS
    assert all(row[4] for row in written[1:])


def test_verify_rejects_incomplete_witness(tmp_path, capsys):
    path = tmp_path / "witness.json"
    path.write_text(json.dumps({"x": [1.0], "status": "Feasible", "margins": []}), encoding="utf-8")
    assert main(["verify", "--scenario", "batch-reactor", "--witness", str(path)]) == 2
    assert "witness-out" in capsys.readouterr().err


def test_export_round_trip(tmp_path, capsys):
    out = tmp_path / "reactor.dat-s"
    assert main(["export", "--scenario", "batch-reactor", "--theorem", "t2", "--tau-m", "0.02", "--out", str(out)]) == 0
    text = out.read_text(encoding="utf-8")
    assert text.startswith("* ncs-certifier")
    assert "* theorem=t2" in text
    assert "Exported" in capsys.readouterr().out


def test_parse_timing():
    assert parse_timing("fixed:0.01,0", 0) == FixedTiming(h=0.01, eta=0.0)
    assert parse_timing("random", 7) == UniformRandomTiming(seed=7)
    assert parse_timing("random:3", 7) == UniformRandomTiming(seed=3)
    assert parse_timing("grid:5", 0) == GridSweepTiming(levels=5)


class FormatSearchTests(unittest.TestCase):
    def test_lists_rows_and_notes(self):
        scenario = load_scenario("pendulum-n2")
        rows = [
            SearchRow(eta_m=0.0, theorem="t1", tau_max=0.0141, trace=[]),
            SearchRow(eta_m=0.01, theorem="t1", tau_max=None, trace=[]),
        ]
        output = format_search(SearchResult(rows, notes=["t1: tau_max decreases"]), scenario, "t1")

        self.assertIn("Maximum tau_M for pendulum-n2 (t1)", output)
        self.assertIn("tau_max=0.0141", output)
        self.assertIn("none", output)
        self.assertIn("note: t1: tau_max decreases", output)

    def test_header_without_scenario(self):
        self.assertEqual(header_line(None, a=1), f"ncs-certifier {__version__} scenario=- params=a=1")


if __name__ == "__main__":
    unittest.main()
