import json
import os
import tempfile
import unittest
from pathlib import Path
from unittest import mock

from fastapi.testclient import TestClient

from app.services.scenario_maps import builtin_scenario
from main import app


FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"


class TestApi(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        tmp = Path(self._tmp.name)
        self._env = mock.patch.dict(os.environ, {
            "TESTBED_DATA_DIR": str(tmp / "data"),
            "TESTBED_OUTPUT_DIR": str(tmp / "output"),
        })
        self._env.start()
        self.client = TestClient(app)
        self.client.__enter__()

    def tearDown(self):
        self.client.__exit__(None, None, None)
        self._env.stop()
        self._tmp.cleanup()

    def _ingest(self):
        with open(FIXTURES / "linden_min.osm", "rb") as f:
            return self.client.post("/api/v1/maps/ingest", files={"file": ("linden_min.osm", f, "application/xml")})

    def test_ingest_and_list(self):
        resp = self._ingest()
        self.assertEqual(resp.status_code, 200)
        body = resp.json()
        self.assertEqual(body["name"], "linden_min.osm")
        self.assertGreater(body["segments"], 0)

        maps = self.client.get("/api/v1/maps").json()["maps"]
        self.assertEqual([m["id"] for m in maps], [body["map_id"]])

    def test_maps_survive_restart(self):
        ingested = self._ingest().json()
        self.client.__exit__(None, None, None)
        self.client = TestClient(app)
        self.client.__enter__()

        (restored,) = self.client.get("/api/v1/maps").json()["maps"]
        self.assertEqual(restored["name"], "linden_min.osm")
        self.assertEqual(restored["segments"], ingested["segments"])
        self.assertEqual(restored["issues"], ingested["issues"])

    def test_ingest_rejects_other_files(self):
        resp = self.client.post("/api/v1/maps/ingest", files={"file": ("notes.txt", b"hello", "text/plain")})
        self.assertEqual(resp.status_code, 400)

    def test_run_status_outcome(self):
        spec = builtin_scenario("free_run", duration_limit=1.0)
        resp = self.client.post("/api/v1/scenarios/run", json={
            "scenario": spec.model_dump(mode="json"), "seeds": [0, 1],
        })
        self.assertEqual(resp.status_code, 200)
        task_id = resp.json()["task_id"]
        self.assertEqual(resp.json()["runs"], 2)

        status = self.client.get(f"/api/v1/scenarios/status/{task_id}").json()
        self.assertEqual(status["status"], "completed")
        self.assertEqual(status["progress"], "2/2 runs")
        self.assertIsNotNone(status["timing"])

        outcomes = self.client.get(f"/api/v1/scenarios/outcome/{task_id}").json()["outcomes"]
        self.assertEqual(sorted(o["seed"] for o in outcomes), [0, 1])
        self.assertTrue(all(o["collision_count"] == 0 for o in outcomes))

        summary = self.client.get(f"/api/v1/scenarios/metrics/{task_id}").json()["summary"]
        self.assertIn("sim", summary["stages"])
        self.assertIn("real_time_factor", summary)
        self.assertEqual(status["collisions"], 0)

    def test_run_crash_marks_task_failed(self):
        with mock.patch("app.api.routes.run_scenario", side_effect=RuntimeError("Session already finished")):
            resp = self.client.post("/api/v1/scenarios/run", json={"builtin": "free_run", "seeds": [0, 1]})
        task_id = resp.json()["task_id"]
        status = self.client.get(f"/api/v1/scenarios/status/{task_id}").json()
        self.assertEqual(status["status"], "failed")
        self.assertEqual(status["progress"], "2/2 runs")
        self.assertIn("seed 0: Session already finished", status["error"])
        self.assertEqual(self.client.get(f"/api/v1/scenarios/outcome/{task_id}").json()["outcomes"], [])

    def test_duplicate_seeds_rejected(self):
        resp = self.client.post("/api/v1/scenarios/run", json={"builtin": "free_run", "seeds": [3, 3]})
        self.assertEqual(resp.status_code, 422)

    def test_run_on_ingested_map(self):
        map_id = self._ingest().json()["map_id"]
        doc = json.loads((FIXTURES / "linden_free_run.json").read_text(encoding="utf-8"))
        doc["duration_limit"] = 1.0
        resp = self.client.post("/api/v1/scenarios/run", json={"scenario": doc, "map_id": map_id})
        task_id = resp.json()["task_id"]
        status = self.client.get(f"/api/v1/scenarios/status/{task_id}").json()
        self.assertEqual(status["status"], "completed", status.get("error"))

    def test_run_request_validation(self):
        resp = self.client.post("/api/v1/scenarios/run", json={"builtin": "free_run", "scenario": {}})
        self.assertEqual(resp.status_code, 422)
        resp = self.client.post("/api/v1/scenarios/run", json={"builtin": "free_run", "map_id": "nope"})
        self.assertEqual(resp.status_code, 404)

    def test_unknown_task(self):
        for path in ("status", "outcome", "metrics"):
            resp = self.client.get(f"/api/v1/scenarios/{path}/missing")
            self.assertEqual(resp.status_code, 404)


if __name__ == "__main__":
    unittest.main()
