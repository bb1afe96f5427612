import unittest

import numpy as np

from app.core.geometry import Pose
from app.services.ego_stack import EgoObservation, PoseSource
from app.services.ndt_localization import Extrinsic, NdtLocalizer, ndt_map_from_points
from app.services.scenario_harness import make_ego_controller, prepare
from app.services.scenario_maps import builtin_scenario
from app.services.sensors import GpsFix
from app.services.world_model import Footprint


def corridor_setup():
    return prepare(builtin_scenario("free_run", 0))


def start_pose(route) -> Pose:
    w = route.waypoints[0]
    return Pose(w.x, w.y, w.yaw)


class TestPoseSource(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.route = corridor_setup().route
        rng = np.random.default_rng(0)
        cls.ndt = ndt_map_from_points(rng.uniform(-20.0, 20.0, size=(400, 2)), 2.0)

    def test_ndt_needs_localizer(self):
        with self.assertRaises(ValueError):
            PoseSource(self.route, "ndt")

    def test_ground_truth_passthrough(self):
        source = PoseSource(self.route)
        pose = Pose(1.0, 2.0, 0.3)
        self.assertEqual(source.update(EgoObservation(tick=0, time=0.0, speed=0.0, pose=pose), []), pose)

    def test_seeded_from_gps(self):
        source = PoseSource(self.route, "ndt", localizer=NdtLocalizer(self.ndt, Extrinsic()))
        events: list = []
        self.assertIsNone(source.update(EgoObservation(tick=0, time=0.0, speed=0.0), events))

        p = start_pose(self.route)
        gps = GpsFix(position=(p.x, p.y), valid=True, noise_sigma=0.5)
        pose = source.update(EgoObservation(tick=1, time=0.02, speed=0.0, gps=gps), events)
        self.assertIsNotNone(pose)
        self.assertAlmostEqual(pose.x, p.x)
        self.assertAlmostEqual(pose.yaw, self.route.heading_at(self.route.locate(p.x, p.y).s))
        self.assertEqual(events, [])

        denied = GpsFix(position=None, valid=False, noise_sigma=0.5)
        self.assertIsNotNone(source.update(EgoObservation(tick=2, time=0.04, speed=0.0, gps=denied), events))


class TestEgoController(unittest.TestCase):
    def test_clear_road_accelerates(self):
        setup = corridor_setup()
        ctrl = make_ego_controller(setup)
        result = ctrl.step(EgoObservation(tick=0, time=0.0, speed=0.0, pose=start_pose(setup.route), truth_agents=()))
        self.assertGreater(result.command.accel, 0.0)
        self.assertFalse(result.command.emergency_brake)
        self.assertEqual(result.events, ())

    def test_vehicle_close_ahead_triggers_brake(self):
        setup = corridor_setup()
        ctrl = make_ego_controller(setup)
        pose = start_pose(setup.route)
        ahead = Footprint(center=pose.to_global(8.0, 0.0), yaw=pose.yaw, half_length=2.5, half_width=1.0)
        obs = EgoObservation(tick=0, time=0.0, speed=5.0, pose=pose, truth_agents=((7, ahead),))
        result = ctrl.step(obs)
        self.assertTrue(result.command.emergency_brake)
        kinds = [kind for kind, _ in result.events]
        self.assertEqual(kinds, ["emergency_brake", "warning"])
        self.assertEqual(result.detections[0][0], 7)

        # one event per engagement
        again = ctrl.step(EgoObservation(tick=1, time=0.02, speed=4.9, pose=pose, truth_agents=((7, ahead),)))
        self.assertTrue(again.command.emergency_brake)
        self.assertEqual(again.events, ())


if __name__ == "__main__":
    unittest.main()
