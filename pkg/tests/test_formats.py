import json
import math
import unittest
from pathlib import Path

import numpy as np

from app.core.errors import FormatError
from app.core.geometry import Polyline
from app.services.formats import (
    ScenarioSpec,
    canonical_json,
    load_scenario,
    ndt_map_from_json,
    ndt_map_to_json,
    network_from_json,
    network_to_json,
    route_from_csv,
    route_to_csv,
    scenario_from_json,
)
from app.services.guidance import Route
from app.services.map_ingest import ingest_osm
from app.services.ndt_localization import ndt_map_from_points

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"


class TestRouteCsv(unittest.TestCase):

    def test_round_trip_is_exact(self):
        route = Route.from_path(Polyline([(0.0, 0.0), (10.0, 3.3), (20.0, -1.0)]), 4.2, spacing=0.7, cyclic=True)
        text = route_to_csv(route)
        self.assertTrue(text.startswith("# format_version: 1, cyclic: true\nx,y,yaw,speed\n"))
        again = route_from_csv(text)
        self.assertTrue(again.cyclic)
        self.assertEqual(route_to_csv(again), text)

    def test_rejects_bad_documents(self):
        with self.assertRaises(FormatError):
            route_from_csv("x,y,yaw,speed\n0,0,0,1\n1,0,0,1\n")
        with self.assertRaises(FormatError):
            route_from_csv("# format_version: 2, cyclic: false\nx,y,yaw,speed\n0,0,0,1\n1,0,0,1\n")
        with self.assertRaises(FormatError):
            route_from_csv("# format_version: 1, cyclic: false\nx,y,speed\n0,0,1\n")
        with self.assertRaises(FormatError):
            route_from_csv("# format_version: 1, cyclic: false\nx,y,yaw,speed\n0,zero,0,1\n1,0,0,1\n")


class TestDocuments(unittest.TestCase):

    def test_network_json(self):
        net, _ = ingest_osm((FIXTURES / "linden_min.osm").read_bytes())
        text = network_to_json(net)
        self.assertEqual(json.loads(text)["format_version"], 1)
        self.assertEqual(network_to_json(network_from_json(text)), text)

    def test_ndt_map_json(self):
        rng = np.random.default_rng(1)
        ndt = ndt_map_from_points(rng.uniform(0.0, 4.0, size=(200, 2)), 1.0)
        text = ndt_map_to_json(ndt)
        loaded = ndt_map_from_json(text)
        self.assertEqual(set(loaded.cells), set(ndt.cells))
        for key, cell in ndt.cells.items():
            np.testing.assert_allclose(loaded.cells[key].inv_covariance, cell.inv_covariance)
        self.assertEqual(ndt_map_to_json(loaded), text)

    def test_wrong_version_or_unknown_field(self):
        with self.assertRaises(FormatError):
            network_from_json('{"format_version": 2}')
        doc = json.loads((FIXTURES / "corridor_obstacle.json").read_text())
        doc["colour"] = "red"
        with self.assertRaises(FormatError):
            scenario_from_json(json.dumps(doc))

    def test_canonical_json_refuses_nan(self):
        self.assertEqual(canonical_json({"b": 1, "a": [1.5]}), '{"a":[1.5],"b":1}\n')
        with self.assertRaises(ValueError):
            canonical_json({"x": math.nan})


class TestScenarioSpec(unittest.TestCase):

    def test_fixtures_load(self):
        for name in ("corridor_obstacle.json", "circle_rain.json", "linden_free_run.json"):
            spec = load_scenario(FIXTURES / name)
            self.assertIsInstance(spec, ScenarioSpec)
        spec = load_scenario(FIXTURES / "corridor_obstacle.json")
        self.assertEqual((spec.seed, spec.obstacle.s, spec.dt), (7, 130.0, 0.02))
        self.assertEqual(spec.localization.mode, "ground_truth")

    def test_ranges_must_be_ordered(self):
        doc = {
            "name": "x", "kind": "intersection", "map": "four_way",
            "route": {"lanes": [{"segment": 100}]},
            "npc_spawns": [{"lanes": [{"segment": 100}], "speed": {"low": 6.0, "high": 4.0}}],
        }
        with self.assertRaises(FormatError):
            scenario_from_json(json.dumps(doc))
        doc["npc_spawns"][0]["speed"] = {"low": 4.0, "high": 6.0}
        self.assertEqual(scenario_from_json(json.dumps(doc)).npc_spawns[0].speed.high, 6.0)

    def test_scenario_round_trip(self):
        spec = load_scenario(FIXTURES / "corridor_obstacle.json")
        self.assertEqual(scenario_from_json(spec.to_json()), spec)


if __name__ == "__main__":
    unittest.main()
