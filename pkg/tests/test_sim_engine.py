import math
import unittest

import numpy as np

from app.core.errors import IntegrityFault
from app.services.sim_engine import (
    AgentDecision,
    ControlCommand,
    NpcAgent,
    PedestrianAgent,
    VehicleParams,
    VehicleState,
    WeatherState,
    bicycle_step,
    initial_state,
    step,
)

DT = 0.02


def wander(state, agent, rng):
    vx, vy = rng.normal(0.0, 1.0, size=2)
    return AgentDecision(velocity=(float(vx), float(vy)))


class TestBicycle(unittest.TestCase):

    def test_constant_steering_closes_circle(self):
        params = VehicleParams(wheelbase=3.0)
        delta = math.atan(3.0 / 10.0)  # turning radius 10 m about the rear axle
        v = VehicleState(0.0, 0.0, 0.0, speed=5.0, steering=delta, params=params)
        cmd = ControlCommand(steering_target=delta)
        turn_per_tick = 5.0 / 3.0 * math.tan(delta) * DT
        farthest = 0.0
        for _ in range(round(2 * math.pi / turn_per_tick)):
            v = bicycle_step(v, cmd, WeatherState.clear(), DT)
            farthest = max(farthest, math.hypot(v.x, v.y))
        self.assertLess(math.hypot(v.x, v.y), 0.1)
        self.assertAlmostEqual(farthest, 20.0, delta=0.1)
        self.assertAlmostEqual(v.speed, 5.0)

    def test_steering_rate_and_limit(self):
        v = VehicleState(0.0, 0.0, 0.0, speed=1.0)
        out = bicycle_step(v, ControlCommand(steering_target=2.0), WeatherState.clear(), DT)
        self.assertAlmostEqual(out.steering, 0.7 * DT)
        for _ in range(200):
            out = bicycle_step(out, ControlCommand(steering_target=2.0), WeatherState.clear(), DT)
        self.assertAlmostEqual(out.steering, 0.55)

    def test_braking_scales_with_friction(self):
        v = VehicleState(0.0, 0.0, 0.0, speed=10.0)
        dry = bicycle_step(v, ControlCommand(emergency_brake=True), WeatherState.clear(), DT)
        wet = bicycle_step(v, ControlCommand(accel=-100.0), WeatherState.rain(0.5), DT)
        self.assertAlmostEqual(10.0 - dry.speed, 6.0 * DT)
        self.assertAlmostEqual(10.0 - wet.speed, 3.0 * DT)

    def test_speed_never_negative(self):
        v = VehicleState(0.0, 0.0, 0.0, speed=0.01)
        out = bicycle_step(v, ControlCommand(emergency_brake=True), WeatherState.clear(), DT)
        self.assertEqual(out.speed, 0.0)

    def test_clamped_command(self):
        cmd = ControlCommand(steering_target=-3.0, accel=9.0).clamped(VehicleParams())
        self.assertEqual(cmd, ControlCommand(steering_target=-0.55, accel=2.0))


class TestWeather(unittest.TestCase):

    def test_presets(self):
        self.assertEqual(WeatherState.preset("rain").friction_factor, 0.5)
        self.assertGreater(WeatherState.preset("fog").sensor_dropout_prob, 0.0)
        with self.assertRaises(ValueError):
            WeatherState.preset("hail")

    def test_clear_has_no_penalty(self):
        with self.assertRaises(ValueError):
            WeatherState("clear", friction_factor=0.5)
        with self.assertRaises(ValueError):
            WeatherState("rain", friction_factor=0.0)


class TestStep(unittest.TestCase):

    def _state(self, seed=0, **kw):
        return initial_state(VehicleState(0.0, 0.0, 0.0), seed=seed, dt=DT, **kw)

    def test_collision_reported_once_per_contact(self):
        npc = NpcAgent(1, VehicleState(3.0, 0.0, 0.0))
        state = self._state(npcs=[npc])
        for _ in range(3):
            state = step(state, ControlCommand(), DT)
        collisions = [e for e in state.events if e.kind == "collision"]
        self.assertEqual(len(collisions), 1)
        self.assertEqual(dict(collisions[0].data), {"a": 0, "b": 1})
        self.assertEqual(collisions[0].tick, 1)
        self.assertEqual(state.contacts, frozenset({(0, 1)}))

    def test_non_finite_command_is_a_fault(self):
        state = self._state()
        with self.assertRaises(IntegrityFault) as ctx:
            step(state, ControlCommand(accel=float("nan")), DT)
        self.assertEqual(ctx.exception.field, "ego_cmd.accel")
        self.assertEqual(ctx.exception.tick, 0)

    def test_dt_mismatch(self):
        with self.assertRaises(ValueError):
            step(self._state(), ControlCommand(), 0.05)

    def test_duplicate_ids_rejected(self):
        with self.assertRaises(ValueError):
            self._state(npcs=[NpcAgent(1, VehicleState(50, 0, 0))], pedestrians=[PedestrianAgent(1, 0, 20)])
        with self.assertRaises(ValueError):
            self._state(pedestrians=[PedestrianAgent(0, 0, 20)])

    def test_despawn_event(self):
        npc = NpcAgent(4, VehicleState(50.0, 0.0, 0.0))
        state = step(self._state(npcs=[npc]), ControlCommand(), DT,
                     policies={4: lambda s, a, rng: AgentDecision(active=False)})
        self.assertFalse(state.npcs[0].active)
        self.assertEqual([(e.kind, dict(e.data)) for e in state.events], [("despawn", {"agent": 4})])
        self.assertEqual(state.footprints(include_ego=False), [])

    def test_same_seed_same_run(self):
        def run(seed):
            state = self._state(seed=seed, pedestrians=[PedestrianAgent(7, 0.0, 30.0), PedestrianAgent(3, 5.0, 30.0)])
            for _ in range(100):
                state = step(state, ControlCommand(accel=1.0), DT, policies={3: wander, 7: wander})
            return [(p.x, p.y) for p in state.pedestrians], state.ego

        first, ego_a = run(11)
        again, ego_b = run(11)
        other, _ = run(12)
        self.assertEqual(first, again)
        self.assertEqual(ego_a, ego_b)
        self.assertNotEqual(first, other)

    def test_rng_state_advances(self):
        state = self._state(pedestrians=[PedestrianAgent(2, 0.0, 30.0)])
        nxt = step(state, ControlCommand(), DT, policies={2: wander})
        self.assertNotEqual(dict(state.rng_state), dict(nxt.rng_state))
        expected = np.random.Generator(np.random.PCG64(0)).normal(0.0, 1.0, size=2)
        self.assertAlmostEqual(nxt.pedestrians[0].vx, float(expected[0]))


if __name__ == "__main__":
    unittest.main()
