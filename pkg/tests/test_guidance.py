import math
import unittest

import numpy as np

from app.core.errors import OffRouteError, RouteTooShortError
from app.core.geometry import Polyline, Pose
from app.services.guidance import (
    CrosswalkAhead,
    GoalPoint,
    Route,
    StopLineTracker,
    TwistLimits,
    Waypoint,
    lookahead_distance,
    pure_pursuit_steer,
    record_route,
    route_from_lane_path,
    select_goal,
    speed_command,
    twist_filter,
    velocity_set,
)
from app.services.sim_engine import ControlCommand, VehicleParams, VehicleState, WeatherState, bicycle_step
from app.services.world_model import StopLineGeom

DT = 0.02
PARAMS = VehicleParams()


def straight(length=100.0, speed=3.0) -> Route:
    return Route.from_path(Polyline([(0.0, 0.0), (length, 0.0)]), speed, spacing=0.5)


def bend(speed: float) -> Route:
    """30 m straight, a 90 degree left turn of radius 12 m, then 40 m straight."""
    arc = [(30.0 + 12.0 * math.sin(t), 12.0 - 12.0 * math.cos(t)) for t in np.linspace(0.0, math.pi / 2, 60)]
    pts = [(0.0, 0.0)] + arc + [(42.0, 52.0)]
    return Route.from_path(Polyline(pts), speed, spacing=0.5)


def drive(route: Route, state: VehicleState, seconds: float) -> list[float]:
    """Closed-loop pure pursuit; returns the cross-track error every tick."""
    limits = TwistLimits.for_vehicle(PARAMS, DT)
    prev = ControlCommand()
    hint = 0.0
    errors = []
    for _ in range(int(seconds / DT)):
        near = route.locate(state.x, state.y, hint)
        hint = near.s
        errors.append(near.lateral)
        goal = select_goal(route, state.pose, lookahead_distance(state.speed), hint=hint)
        steer = pure_pursuit_steer(goal, PARAMS.wheelbase, PARAMS.steering_limit)
        target = velocity_set(route, state.pose, hint=hint)
        cmd = twist_filter(ControlCommand(steer, speed_command(target, state.speed)), prev, limits)
        prev = cmd
        state = bicycle_step(state, cmd, WeatherState.clear(), DT)
    return errors


def crossings(errors: list[float], band: float = 0.01) -> int:
    """Sign changes of the error, ignoring wiggles inside +-band."""
    count, side = 0, 0
    for e in errors:
        s = 1 if e > band else -1 if e < -band else 0
        if s and side and s != side:
            count += 1
        if s:
            side = s
    return count


class TestRoute(unittest.TestCase):

    def test_needs_two_waypoints(self):
        with self.assertRaises(RouteTooShortError):
            Route([Waypoint(0.0, 0.0, 0.0, 1.0)])
        with self.assertRaises(ValueError):
            Waypoint(0.0, 0.0, 0.0, -1.0)

    def test_cyclic_wraps(self):
        square = [Waypoint(0, 0, 0, 2), Waypoint(10, 0, 0, 2), Waypoint(10, 10, 0, 2), Waypoint(0, 10, 0, 2)]
        route = Route(square, cyclic=True)
        self.assertAlmostEqual(route.length, 40.0)
        self.assertEqual(route.point_at(41.0), (1.0, 0.0))
        near = route.locate(1.0, -0.5, hint=39.5)
        self.assertAlmostEqual(near.s, 1.0)
        self.assertAlmostEqual(near.lateral, -0.5)

    def test_record_straight(self):
        poses = [Pose(0.1 * k, 0.0, 0.0) for k in range(201)]
        route = record_route(poses, 1.0, 4.0)
        self.assertEqual(len(route), 21)
        self.assertFalse(route.cyclic)
        self.assertTrue(all(w.speed == 4.0 for w in route.waypoints))

    def test_record_loop_caps_speed(self):
        poses = [Pose(10.0 * math.cos(t), 10.0 * math.sin(t), t + math.pi / 2) for t in np.linspace(0, 2 * math.pi, 1257)]
        route = record_route(poses, 1.0, 10.0, max_lateral_accel=1.5)
        self.assertTrue(route.cyclic)
        self.assertAlmostEqual(route.length, 2 * math.pi * 10.0, delta=0.5)
        for w in route.waypoints:
            self.assertAlmostEqual(w.speed, math.sqrt(15.0), delta=0.1)

    def test_record_too_short(self):
        with self.assertRaises(RouteTooShortError):
            record_route([Pose(0, 0, 0), Pose(0.2, 0, 0)], 1.0, 3.0)

    def test_route_from_lane_path(self):
        route = route_from_lane_path(Polyline([(0.0, 0.0), (50.0, 0.0)]), 5.0)
        self.assertFalse(route.cyclic)
        self.assertGreater(route.length, 45.0)
        ys = [w.y for w in route.waypoints]
        self.assertLess(max(abs(y) for y in ys), 0.05)


class TestPursuit(unittest.TestCase):

    def test_goal_on_lookahead_circle(self):
        goal = select_goal(straight(), Pose(5.0, 1.0, 0.0), 4.0)
        self.assertAlmostEqual(goal.world[0], 5.0 + math.sqrt(15.0))
        self.assertAlmostEqual(goal.world[1], 0.0)
        self.assertAlmostEqual(goal.g_y, -1.0)

    def test_off_route(self):
        with self.assertRaises(OffRouteError):
            select_goal(straight(), Pose(5.0, 8.0, 0.0), 4.0)

    def test_wide_of_path_aims_down_route(self):
        goal = select_goal(straight(), Pose(5.0, 4.0, 0.0), 3.0)
        self.assertAlmostEqual(goal.world[0], 8.0)
        self.assertAlmostEqual(goal.world[1], 0.0)
        self.assertAlmostEqual(goal.s, 8.0)
        self.assertLess(goal.g_y, 0.0)

    def test_route_end_inside_lookahead(self):
        goal = select_goal(straight(), Pose(98.0, 0.5, 0.0), 4.0)
        self.assertAlmostEqual(goal.world[0], 100.0)
        self.assertAlmostEqual(goal.world[1], 0.0)

    def test_arc_curvature(self):
        self.assertEqual(pure_pursuit_steer(GoalPoint(4.0, 0.0, 4.0, 0, 0.0, 0.0), 3.0), 0.0)
        steer = pure_pursuit_steer(GoalPoint(3.0, 1.0, math.sqrt(10.0), 0, 0.0, 0.0), 3.0)
        self.assertAlmostEqual(steer, math.atan(0.6))
        steer = pure_pursuit_steer(GoalPoint(4.0, 3.0, 5.0, 0, 0.0, 0.0), 3.0, steering_limit=1.0)
        self.assertAlmostEqual(steer, math.atan(0.72))
        self.assertEqual(pure_pursuit_steer(GoalPoint(0.5, 2.0, 2.1, 0, 0.0, 0.0), 3.0), 0.55)

    def test_curvature_uses_lookahead_not_goal_distance(self):
        steer = pure_pursuit_steer(GoalPoint(2.0, 1.0, 4.0, 0, 0.0, 0.0), 3.0)
        self.assertAlmostEqual(steer, math.atan(3.0 * 2.0 * 1.0 / 16.0))

    def test_straight_convergence(self):
        errors = drive(straight(speed=3.0), VehicleState(0.0, 1.0, 0.0, speed=3.0), 10.0)
        self.assertLess(abs(errors[-1]), 0.05)
        self.assertLessEqual(crossings(errors), 1)

    def test_deviation_grows_with_speed(self):
        worst = []
        for speed in (2.0, 4.0, 6.0, 8.0):
            route = bend(speed)
            seconds = (route.length - 15.0) / speed
            errors = drive(route, VehicleState(0.0, 0.0, 0.0, speed=speed), seconds)
            worst.append(max(abs(e) for e in errors))
        self.assertEqual(worst, sorted(worst))
        self.assertGreater(worst[-1], worst[0])


class TestSpeedAndFilter(unittest.TestCase):

    def test_velocity_rules(self):
        route = straight(speed=10.0)
        pose = Pose(10.0, 0.0, 0.0)
        self.assertAlmostEqual(velocity_set(route, pose), 10.0)
        self.assertAlmostEqual(velocity_set(route, pose, stop_distances=[4.0]), 4.0)
        self.assertEqual(velocity_set(route, pose, obstacle_distance=3.0), 0.0)
        self.assertAlmostEqual(velocity_set(route, pose, obstacle_distance=8.0), 4.0)
        occupied = CrosswalkAhead(distance=6.0, occupied=True)
        self.assertAlmostEqual(velocity_set(route, pose, crosswalks=[occupied]), 4.0)
        self.assertAlmostEqual(velocity_set(route, pose, crosswalks=[CrosswalkAhead(6.0, False)]), 10.0)

    def test_zero_target_brakes(self):
        self.assertEqual(speed_command(0.0, 0.1), -2.0)
        self.assertAlmostEqual(speed_command(5.0, 4.0), 4.0)

    def test_twist_filter_limits(self):
        limits = TwistLimits(dt=DT)
        out = twist_filter(ControlCommand(0.5, 5.0), ControlCommand(), limits)
        self.assertAlmostEqual(out.steering_target, 0.7 * DT)
        self.assertAlmostEqual(out.accel, 10.0 * DT)
        emergency = twist_filter(ControlCommand(0.1, 0.0, True), ControlCommand(), limits)
        self.assertEqual((emergency.accel, emergency.emergency_brake), (-6.0, True))


class TestStopLines(unittest.TestCase):

    def _tracker(self, cyclic=False):
        geom = StopLineGeom(segment_id=1, arclength=50.0, position=(50.0, -1.75), direction=1,
                            intersection_id=9, node_id=3)
        route = straight() if not cyclic else Route(
            [Waypoint(0, 0, 0, 3), Waypoint(100, 0, 0, 3), Waypoint(100, 10, 0, 3), Waypoint(0, 10, 0, 3)], cyclic=True)
        return StopLineTracker(route, [geom], intersections={9: (55.0, 0.0)})

    def test_stop_grant_pass(self):
        tracker = self._tracker()
        (entry,) = tracker.entries
        self.assertAlmostEqual(entry.s, 50.0)
        self.assertEqual(tracker.active_distances(40.0), [10.0])
        events = tracker.update(49.0, 0.0, 12.0, lambda e: False)
        self.assertEqual([e.kind for e in events], ["stop_line_stop"])
        self.assertEqual(entry.phase, "stopped")
        tracker.update(49.0, 0.0, 13.0, lambda e: True)
        self.assertEqual(entry.phase, "granted")
        self.assertEqual(tracker.active_distances(49.0), [])
        events = tracker.update(54.0, 3.0, 15.0, lambda e: True)
        self.assertEqual([e.kind for e in events], ["stop_line_passed"])
        self.assertEqual(entry.phase, "passed")

    def test_running_the_line_is_a_violation(self):
        tracker = self._tracker()
        events = tracker.update(51.0, 3.0, 5.0, lambda e: True)
        self.assertEqual([e.kind for e in events], ["stop_line_violation"])

    def test_cyclic_route_rearms(self):
        tracker = self._tracker(cyclic=True)
        (entry,) = tracker.entries
        tracker.update(50.0, 0.0, 1.0, lambda e: True)
        tracker.update(54.0, 3.0, 2.0, lambda e: True)
        self.assertEqual(entry.phase, "approaching")
        self.assertAlmostEqual(entry.next_s, 50.0 + 220.0)

    def test_lines_facing_away_are_ignored(self):
        geom = StopLineGeom(1, 50.0, (50.0, 1.75), -1, 9, 3)
        tracker = StopLineTracker(straight(), [geom], intersections={9: (45.0, 0.0)})
        self.assertEqual(tracker.entries, [])


if __name__ == "__main__":
    unittest.main()
