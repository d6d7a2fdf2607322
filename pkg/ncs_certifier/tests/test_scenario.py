import json
import unittest

import numpy as np
import pytest

from ncs_certifier.scenario import BUNDLED, ScenarioError, bundled_path, dumps, list_bundled, load_scenario


class BundledScenarioTests(unittest.TestCase):
    def test_batch_reactor(self):
        scenario = load_scenario("batch-reactor")
        self.assertEqual(scenario.plant.n, 4)
        self.assertEqual(scenario.controller.n_c, 2)
        self.assertEqual(scenario.network.nodes, 2)
        self.assertEqual(scenario.plant.node_dims, (1, 1))
        np.testing.assert_allclose(scenario.plant.A[0], [1.38, -0.208, 6.715, -5.676])

    def test_pendulum_n4_uses_identity_rows(self):
        scenario = load_scenario("pendulum-n4")
        self.assertEqual(scenario.network.nodes, 4)
        for i, c_i in enumerate(scenario.plant.outputs):
            np.testing.assert_array_equal(c_i, np.eye(4)[i : i + 1])
        np.testing.assert_allclose(
            np.hstack(scenario.controller.gains), [[11.2062, -128.8597, 10.7823, -22.2629]]
        )

    def test_bundled_files_are_canonical(self):
        for name in BUNDLED:
            text = bundled_path(name).read_text(encoding="utf-8")
            with self.subTest(name=name):
                self.assertEqual(dumps(json.loads(text)), text)

    def test_digest_is_stable(self):
        self.assertEqual(load_scenario("pendulum-n2").digest, load_scenario("pendulum-n2").digest)
        self.assertNotEqual(load_scenario("pendulum-n2").digest, load_scenario("pendulum-n4").digest)


def _write(tmp_path, data) -> str:
    path = tmp_path / "scenario.json"
    path.write_text(dumps(data), encoding="utf-8")
    return str(path)


def _simple() -> dict:
    return {
        "name": "toy",
        "plant": {"A": [[0.0, 1.0], [-1.0, 0.0]], "B": [[0.0], [1.0]], "outputs": [[[1.0, 0.0]], [[0.0, 1.0]]]},
        "controller": {"type": "static", "gains": [[[-1.0]], [[-1.0]]]},
        "network": {"eta_m": 0.0, "mad": 0.01, "tau_m": 0.02, "nodes": 2},
        "protocol": "rr",
    }


def test_loads_file_with_defaults(tmp_path):
    scenario = load_scenario(_write(tmp_path, _simple()))
    assert scenario.name == "toy"
    assert scenario.plant.q == 0
    assert scenario.protocol == "rr"
    assert scenario.analysis.alpha == 0.0


def test_output_partition_mismatch_is_reported(tmp_path):
    data = _simple()
    data["plant"]["outputs"] = [[[1.0, 0.0], [0.0, 1.0]]]
    data["controller"]["gains"] = [[[-1.0, -1.0]]]
    with pytest.raises(ScenarioError, match="network.nodes"):
        load_scenario(_write(tmp_path, data))


def test_missing_field_carries_line_and_field(tmp_path):
    data = _simple()
    del data["network"]["tau_m"]
    with pytest.raises(ScenarioError) as info:
        load_scenario(_write(tmp_path, data))
    assert info.value.field == "network.tau_m"
    assert info.value.line is not None


def test_gain_shape_error_names_block(tmp_path):
    data = _simple()
    data["controller"]["gains"] = [[[-1.0, 2.0]], [[-1.0]]]
    with pytest.raises(ScenarioError, match="K_1"):
        load_scenario(_write(tmp_path, data))


def test_parse_error_has_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "name": "x",\n  "plant": [\n', encoding="utf-8")
    with pytest.raises(ScenarioError) as info:
        load_scenario(str(path))
    assert info.value.line is not None


def test_unknown_name_lists_bundled():
    assert list_bundled() == ["pendulum-n2", "pendulum-n4", "batch-reactor"]
    with pytest.raises(ScenarioError) as info:
        load_scenario("no-such-scenario")
    for name in list_bundled():
        assert name in str(info.value)


def test_canonical_dump_layout():
    text = dumps({"m": [[1.0, 2.5], [3, 4]], "v": [1, 2], "nested": {"flag": True}})
    assert text == (
        "{\n"
        '  "m": [\n'
        "    [1.0, 2.5],\n"
        "    [3, 4]\n"
        "  ],\n"
        '  "v": [1, 2],\n'
        '  "nested": {\n'
        '    "flag": true\n'
        "  }\n"
        "}\n"
    )


if __name__ == "__main__":
    unittest.main()
