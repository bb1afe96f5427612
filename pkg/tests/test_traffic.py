import unittest

import numpy as np
from shapely.geometry import box

from app.core.geometry import Polyline, Pose
from app.services.guidance import Route
from app.services.perception_planning import Cluster
from app.services.sim_engine import NpcAgent, PedestrianAgent, VehicleState, initial_state
from app.services.traffic import (
    ConflictZone,
    ParkedPlan,
    ParkedPolicy,
    PedMemory,
    PedestrianPlan,
    PedestrianPolicy,
    RightOfWayArbiter,
    corridor_gap,
    fuse_objects,
    label_agent,
    smart_circle_broadcast,
    zone_entries,
)
from app.services.world_model import Footprint

RNG = np.random.default_rng(0)


class TestArbiter(unittest.TestCase):

    def test_arrival_order_and_handover(self):
        arb = RightOfWayArbiter(ConflictZone(1, (0.0, 0.0), 5.0, "stop_sign"))
        self.assertTrue(arb.arrive(3, 10))
        self.assertTrue(arb.arrive(2, 10))
        self.assertTrue(arb.arrive(5, 8))
        self.assertFalse(arb.arrive(2, 11))
        self.assertEqual(arb.queue, (5, 2, 3))
        self.assertTrue(arb.arrived_before(2, 3))

        self.assertEqual(arb.update(11, frozenset()), [("grant", {"intersection": 1, "agent": 5})])
        self.assertTrue(arb.reserved_for_other(2))
        self.assertEqual(arb.update(12, frozenset({5})), [])
        events = arb.update(13, frozenset())
        self.assertEqual([k for k, _ in events], ["zone_exit", "grant"])
        self.assertTrue(arb.is_granted(2))

    def test_no_grant_while_occupied_or_committed(self):
        arb = RightOfWayArbiter(ConflictZone(1, (0.0, 0.0), 5.0, "yield"))
        arb.arrive(4, 0)
        self.assertEqual(arb.update(1, frozenset({7})), [])
        self.assertEqual(arb.update(2, frozenset(), frozenset({8})), [])
        self.assertEqual(len(arb.update(3, frozenset())), 1)
        arb.forget(4)
        self.assertIsNone(arb.grantee)


class TestSmartCircle(unittest.TestCase):

    def setUp(self):
        self.state = initial_state(
            VehicleState(-30.0, 0.0, 0.0),
            npcs=[NpcAgent(1, VehicleState(5.0, 0.0, 0.0, speed=2.0)), NpcAgent(2, VehicleState(50.0, 0.0, 0.0))],
            pedestrians=[PedestrianAgent(4, 0.0, 6.0), PedestrianAgent(6, 1.0, 1.0, active=False)],
        )

    def test_broadcast_covers_disk(self):
        msg = smart_circle_broadcast(self.state, (0.0, 0.0), 10.0)
        self.assertEqual([o.id for o in msg.objects], [1, 4])
        self.assertEqual(msg.objects[0].position, (6.5, 0.0))
        self.assertEqual(msg.objects[0].velocity, (2.0, 0.0))

    def test_fusion(self):
        msg = smart_circle_broadcast(self.state, (0.0, 0.0), 10.0)
        lidar = Cluster(id=0, points=np.array([[6.4, 0.1]]), centroid=(6.4, 0.1), radius=0.0)
        fused = fuse_objects([lidar], msg, Pose(0.0, 0.0, 0.0))
        self.assertEqual([(c.source, c.agent_id) for c in fused], [("fused", 1), ("broadcast", 4)])
        self.assertAlmostEqual(fused[1].centroid[1], 6.0)
        self.assertIs(fuse_objects([lidar], None, Pose(0.0, 0.0, 0.0))[0], lidar)

    def test_label_agent(self):
        self.assertEqual(label_agent((6.5, 1.2), self.state), 1)
        self.assertIsNone(label_agent((20.0, 20.0), self.state))


class TestNpcHelpers(unittest.TestCase):

    route = Route.from_path(Polyline([(0.0, 0.0), (100.0, 0.0)]), 5.0)

    def test_corridor_gap(self):
        ahead = [(9, Footprint((20.0, 0.0), 0.0, 2.5, 1.0))]
        self.assertAlmostEqual(corridor_gap(self.route, 0.0, 4.0, ahead, half_width=1.5), 13.5)
        aside = [(9, Footprint((20.0, 6.0), 0.0, 2.5, 1.0))]
        self.assertIsNone(corridor_gap(self.route, 0.0, 4.0, aside, half_width=1.5))

    def test_zone_entries(self):
        (entry,) = zone_entries(self.route, [ConflictZone(3, (50.0, 0.0), 5.0, "stop_sign")], half_width=1.0)
        self.assertEqual(entry.intersection_id, 3)
        self.assertAlmostEqual(entry.s_entry, 44.0)

    def test_parked_vehicle_reveals_itself(self):
        policy = ParkedPolicy(ParkedPlan(id=1, reveal_gap=10.0))
        parked = NpcAgent(1, VehicleState(30.0, 0.0, 0.0), active=False)
        far = initial_state(VehicleState(0.0, 0.0, 0.0), npcs=[parked])
        self.assertFalse(policy(far, parked, RNG).active)
        near = initial_state(VehicleState(18.0, 0.0, 0.0), npcs=[parked])
        decision = policy(near, parked, RNG)
        self.assertTrue(decision.active)
        self.assertEqual(decision.events[0][0], "obstacle_revealed")
        self.assertAlmostEqual(decision.events[0][1]["gap"], 7.0)


class TestPedestrians(unittest.TestCase):

    plan = PedestrianPlan(
        id=5, start=(0.0, -4.5), end=(0.0, 4.5), walk_speed=1.5, spawn_time=0.0, patience=5.0,
        crosswalk=box(-1.75, -3.5, 1.75, 3.5), crosswalk_id=0,
    )

    def _decide(self, ego: VehicleState, memory: PedMemory, position=(0.0, -4.5)):
        ped = PedestrianAgent(5, *position, policy_state=memory)
        state = initial_state(ego, pedestrians=[ped])
        return PedestrianPolicy(self.plan)(state, ped, RNG)

    def test_crosses_an_empty_road(self):
        ego = VehicleState(-100.0, 0.0, 0.0)
        spawned = self._decide(ego, PedMemory())
        self.assertEqual(spawned.policy_state.phase, "curb")
        go = self._decide(ego, PedMemory("curb", 0.0))
        self.assertEqual(go.velocity, (0.0, 1.5))
        self.assertEqual(go.events, (("crossing_start", {"crosswalk": 0}),))

    def test_waits_for_approaching_vehicle(self):
        fast = VehicleState(-20.0, 0.0, 0.0, speed=8.0)
        self.assertEqual(self._decide(fast, PedMemory("curb", 0.0)).velocity, (0.0, 0.0))
        # impatient, but the vehicle could not stop in time
        self.assertEqual(self._decide(fast, PedMemory("curb", -6.0)).velocity, (0.0, 0.0))
        slow = VehicleState(-20.0, 0.0, 0.0, speed=3.0)
        self.assertEqual(self._decide(slow, PedMemory("curb", 0.0)).velocity, (0.0, 0.0))
        self.assertEqual(self._decide(slow, PedMemory("curb", -6.0)).velocity, (0.0, 1.5))

    def test_leaves_after_crossing(self):
        done = self._decide(VehicleState(-100.0, 0.0, 0.0), PedMemory("crossing", 0.0), position=(0.0, 4.6))
        self.assertFalse(done.active)
        self.assertEqual(done.policy_state.phase, "done")


if __name__ == "__main__":
    unittest.main()
