import tempfile
import unittest
from pathlib import Path

from app.core.errors import FormatError
from app.services.formats import LaneRefModel, ObstacleSpec, PedestrianSpawnSpec, SmartCircleSpec, load_scenario
from app.services.scenario_harness import (
    ScenarioSession,
    measure_stopping_distance,
    prepare,
    run_scenario,
)
from app.services.scenario_maps import builtin_scenario
from app.services.sim_engine import ControlCommand, WeatherState
from app.services.ego_stack import EgoStep
from app.services.trace import read_trace, replay

from pipeline.scenario_suite import (
    BRAKING_TOLERANCE,
    DENSITY_LEVELS,
    DENSITY_SEEDS,
    OCCLUSION_MIN_LEAD,
    braking_ratio,
    density_monotone,
    occlusion_lead,
    run_density,
)
from tests._support import FULL_SUITE, seeds


FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"


def short_free_run(seed: int = 0, limit: float = 4.0):
    return builtin_scenario("free_run", seed, duration_limit=limit)


class TestStoppingDistance(unittest.TestCase):
    def test_half_friction_doubles_distance(self):
        for speed in (4.0, 8.0, 12.0):
            clear = measure_stopping_distance(WeatherState.clear(), speed)
            wet = measure_stopping_distance(WeatherState.rain(friction_factor=0.5), speed)
            self.assertAlmostEqual(wet / clear, 2.0, delta=0.1)
        self.assertAlmostEqual(braking_ratio(), 2.0, delta=2.0 * BRAKING_TOLERANCE)

    def test_rejects_standstill(self):
        with self.assertRaises(ValueError):
            measure_stopping_distance(WeatherState.clear(), 0.0)


class TestPrepare(unittest.TestCase):
    def test_weather_overrides_reduce_cruise(self):
        setup = prepare(builtin_scenario("weather", 0))
        self.assertEqual(setup.weather.condition, "rain")
        self.assertLess(max(w.speed for w in setup.route.waypoints), 5.0)

    def test_smart_circle_needs_a_circle(self):
        spec = builtin_scenario("free_run", 0, smart_circle=SmartCircleSpec(enabled=True))
        with self.assertRaises(FormatError):
            prepare(spec)

    def test_missing_crosswalk(self):
        spec = builtin_scenario("free_run", 0, pedestrian_spawns=(PedestrianSpawnSpec(crosswalk=9, count=1),))
        with self.assertRaises(FormatError):
            ScenarioSession(spec)

    def test_obstacle_outside_lane(self):
        spec = builtin_scenario("free_run", 0, obstacle=ObstacleSpec(
            lane=LaneRefModel(segment=100, direction=1), s=5000.0, reveal_gap=4.0,
        ))
        with self.assertRaises(FormatError):
            ScenarioSession(spec)


class TestSession(unittest.TestCase):
    def test_start_delay_holds_ego(self):
        spec = short_free_run(limit=1.0).model_copy(update={"ego_start_delay": 5.0})
        session = ScenarioSession(spec)
        while not session.finished:
            session.observe()
            session.advance(EgoStep(command=ControlCommand(accel=2.0)))
        self.assertEqual(session.state.ego.speed, 0.0)
        outcome = session.close()
        self.assertFalse(outcome.completed)
        self.assertIsNone(outcome.finish_time)

    def test_advance_after_finish(self):
        session = ScenarioSession(short_free_run(limit=0.1))
        while not session.finished:
            session.observe()
            session.advance(EgoStep(command=ControlCommand()))
        with self.assertRaises(RuntimeError):
            session.advance(EgoStep(command=ControlCommand()))

    def test_same_seed_same_trace(self):
        for seed in seeds(5, 2):
            spec = builtin_scenario("pedestrian_crossing", seed, duration_limit=6.0)
            a = run_scenario(spec)
            b = run_scenario(spec)
            self.assertEqual(a.trace_hash, b.trace_hash)
            self.assertEqual(a.model_dump(), b.model_dump())


class TestScenarios(unittest.TestCase):
    def test_free_run_completes(self):
        with tempfile.TemporaryDirectory() as tmp:
            outcome = run_scenario(builtin_scenario("free_run", 0), out_dir=Path(tmp))
            self.assertTrue(outcome.completed)
            self.assertEqual(outcome.collision_count, 0)
            self.assertEqual(outcome.emergency_brake_count, 0)
            self.assertLess(outcome.max_cross_track_error, 0.5)
            self.assertTrue((Path(tmp) / "outcome.json").exists())

            report = replay(outcome.trace_file)
            self.assertTrue(report.ok)
            loaded = read_trace(outcome.trace_file)
            self.assertEqual(loaded.records[-1].topic, "finish")

    def test_fixture_scenario_runs_from_disk(self):
        path = FIXTURES / "linden_free_run.json"
        spec = load_scenario(path).model_copy(update={"duration_limit": 5.0})
        outcome = run_scenario(spec, base_dir=path.parent)
        self.assertAlmostEqual(outcome.ticks, 250, delta=1)
        self.assertFalse(outcome.completed)
        self.assertEqual(outcome.collision_count, 0)

    def test_stopped_obstacle_brakes_short(self):
        outcome = run_scenario(load_scenario(FIXTURES / "corridor_obstacle.json"))
        self.assertGreaterEqual(outcome.emergency_brake_count, 1)
        self.assertEqual(outcome.collision_count, 0)
        self.assertIsNotNone(outcome.final_gap)
        self.assertGreater(outcome.final_gap, 0.0)

    def test_slow_fleet_takes_longer(self):
        free = run_scenario(builtin_scenario("free_run", 0))
        fleet = run_scenario(builtin_scenario("slow_fleet", 0))
        self.assertEqual(fleet.collision_count, 0)
        self.assertTrue(fleet.completed)
        self.assertGreater(fleet.finish_time, free.finish_time)


class TestSafetyProperties(unittest.TestCase):
    def test_traffic_circle_priority(self):
        for seed in seeds(50, 2):
            outcome = run_scenario(builtin_scenario("traffic_circle", seed))
            with self.subTest(seed=seed):
                self.assertEqual(outcome.priority_violation_count, 0)
                self.assertGreaterEqual(outcome.stop_line_stop_count, 1)
                self.assertEqual(outcome.collision_count, 0)

    def test_pedestrian_clearance(self):
        for seed in seeds(50, 2):
            outcome = run_scenario(builtin_scenario("pedestrian_crossing", seed))
            with self.subTest(seed=seed):
                self.assertEqual(outcome.collision_count, 0)
                if outcome.min_pedestrian_distance is not None:
                    self.assertGreater(outcome.min_pedestrian_distance, 1.0)

    def test_overhead_broadcast_sees_occluded_vehicle_first(self):
        lead = occlusion_lead()
        self.assertIsNotNone(lead)
        self.assertGreaterEqual(lead, OCCLUSION_MIN_LEAD)

    def test_density_monotone(self):
        if not FULL_SUITE:
            self.skipTest("density sweep runs with TESTBED_FULL_SUITE=1")
        rows = [run_density((count, seed)) for count in DENSITY_LEVELS for seed in range(DENSITY_SEEDS)]
        ok, means = density_monotone(rows)
        self.assertTrue(ok, means)


if __name__ == "__main__":
    unittest.main()
