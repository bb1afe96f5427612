from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Final, Iterable, Literal, Optional, Sequence, Union

import numpy as np

from app.core.errors import OffRouteError, RouteTooShortError
from app.core.geometry import Polyline, Pose, Projection2D, wrap_angle
from app.services.sim_engine import ControlCommand, VehicleParams, VehicleState, WeatherState, bicycle_step
from app.services.world_model import StopLineGeom


logger = logging.getLogger(__name__)


MIN_LOOKAHEAD: Final[float] = 3.0
MAX_LOOKAHEAD: Final[float] = 12.0
LOOKAHEAD_GAIN: Final[float] = 1.5  # seconds
MAX_OFFTRACK: Final[float] = 5.0
SPACING_EPS: Final[float] = 1e-9

SpeedProfile = Union[float, Callable[[int, Pose], float]]


@dataclass(frozen=True, slots=True)
class Waypoint:
    x: float
    y: float
    yaw: float
    speed: float

    def __post_init__(self) -> None:
        if self.speed < 0:
            raise ValueError("target speed must be >= 0")

    @property
    def pose(self) -> Pose:
        return Pose(self.x, self.y, self.yaw)


class Route:
    """Ordered waypoints; a cyclic route closes from the last waypoint back to the first."""

    __slots__ = ("waypoints", "cyclic", "polyline", "_speeds")

    def __init__(self, waypoints: Sequence[Waypoint], cyclic: bool = False) -> None:
        if len(waypoints) < 2:
            raise RouteTooShortError(f"Route needs at least 2 waypoints, got {len(waypoints)}")
        self.waypoints = tuple(waypoints)
        self.cyclic = cyclic
        pts = [(w.x, w.y) for w in self.waypoints]
        speeds = [w.speed for w in self.waypoints]
        if cyclic:
            pts.append(pts[0])
            speeds.append(speeds[0])
        self.polyline = Polyline(pts)
        # Polyline drops repeated points; keep speeds aligned with its vertices.
        self._speeds = np.interp(
            self.polyline.cumulative,
            _cumulative(pts),
            np.array(speeds, dtype=float),
        )

    def __len__(self) -> int:
        return len(self.waypoints)

    @property
    def length(self) -> float:
        return self.polyline.length

    @property
    def max_gap(self) -> float:
        return float(np.max(np.diff(self.polyline.cumulative)))

    @classmethod
    def from_path(cls, path: Polyline, speed: float, *, spacing: float = 1.0, cyclic: bool = False) -> Route:
        """Sample a path every `spacing` meters."""
        n = max(1, int(math.ceil(path.length / spacing - 1e-9)))
        stations = [path.length * k / n for k in range(n + 1)]
        if cyclic:
            stations = stations[:-1]
        wps = [Waypoint(*path.point_at(s), path.heading_at(s), speed) for s in stations]
        return cls(wps, cyclic=cyclic)

    def normalize(self, s: float) -> float:
        if self.cyclic:
            return s % self.length
        return min(max(s, 0.0), self.length)

    def point_at(self, s: float) -> tuple[float, float]:
        return self.polyline.point_at(self.normalize(s))

    def heading_at(self, s: float) -> float:
        return self.polyline.heading_at(self.normalize(s))

    def speed_at(self, s: float) -> float:
        return float(np.interp(self.normalize(s), self.polyline.cumulative, self._speeds))

    def locate(self, x: float, y: float, hint: Optional[float] = None, *, window: float = 20.0) -> Projection2D:
        """
        Closest route point. With a hint the search is restricted to a window
        starting just behind the hint, so the match never jumps backward.
        """
        if hint is None:
            return self.polyline.project(x, y)
        s0 = self.normalize(hint)
        lo, hi = s0 - 1.0, s0 + window
        best = self.polyline.project(x, y, max(lo, 0.0), min(hi, self.length))
        if self.cyclic:
            if hi > self.length:
                wrapped = self.polyline.project(x, y, 0.0, hi - self.length)
                if wrapped.distance < best.distance:
                    best = wrapped
            if lo < 0.0:
                wrapped = self.polyline.project(x, y, self.length + lo, self.length)
                if wrapped.distance < best.distance:
                    best = wrapped
        return best

    def cross_track_error(self, x: float, y: float, hint: Optional[float] = None) -> float:
        return self.locate(x, y, hint).lateral


def _cumulative(pts: Sequence[tuple[float, float]]) -> np.ndarray:
    out = [0.0]
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        out.append(out[-1] + math.hypot(x1 - x0, y1 - y0))
    return np.array(out)


@dataclass(frozen=True, slots=True)
class GoalPoint:
    g_x: float
    g_y: float
    lookahead: float
    index: int
    s: float  # route arclength of the goal
    s_nearest: float
    world: tuple[float, float] = (0.0, 0.0)


def lookahead_distance(speed: float) -> float:
    return min(max(LOOKAHEAD_GAIN * speed, MIN_LOOKAHEAD), MAX_LOOKAHEAD)


def _cap_speeds(
    waypoints: list[Waypoint], cyclic: bool, max_lateral_accel: float, decel: float
) -> list[Waypoint]:
    n = len(waypoints)
    speeds = [w.speed for w in waypoints]
    for i in range(n):
        if not cyclic and (i == 0 or i == n - 1):
            continue
        a, b, c = waypoints[i - 1], waypoints[i], waypoints[(i + 1) % n]
        turn = abs(wrap_angle(math.atan2(c.y - b.y, c.x - b.x) - math.atan2(b.y - a.y, b.x - a.x)))
        ds = 0.5 * (math.hypot(b.x - a.x, b.y - a.y) + math.hypot(c.x - b.x, c.y - b.y))
        if turn > 1e-9 and ds > 0:
            speeds[i] = min(speeds[i], math.sqrt(max_lateral_accel * ds / turn))
    # Backward pass so each slow section can be reached at `decel`.
    passes = 2 if cyclic else 1
    for _ in range(passes):
        for i in range(n - 2, -1, -1) if not cyclic else range(n - 1, -1, -1):
            j = (i + 1) % n
            d = math.hypot(waypoints[j].x - waypoints[i].x, waypoints[j].y - waypoints[i].y)
            speeds[i] = min(speeds[i], math.sqrt(speeds[j] ** 2 + 2.0 * decel * d))
    return [replace(w, speed=v) for w, v in zip(waypoints, speeds)]


def record_route(
    poses: Iterable[Pose],
    min_spacing: float,
    speed: SpeedProfile,
    *,
    max_lateral_accel: Optional[float] = 1.5,
    decel: float = 1.0,
) -> Route:
    """Emit a waypoint every `min_spacing` meters of a driven pose stream."""
    if min_spacing <= 0:
        raise ValueError("min_spacing must be positive")
    waypoints: list[Waypoint] = []
    last: Optional[Pose] = None
    travelled = 0.0
    prev: Optional[Pose] = None
    for pose in poses:
        if prev is not None:
            travelled += pose.distance_to(prev)
        prev = pose
        if last is None or pose.distance_to(last) >= min_spacing - SPACING_EPS:
            v = speed(len(waypoints), pose) if callable(speed) else float(speed)
            waypoints.append(Waypoint(pose.x, pose.y, pose.yaw, v))
            last = pose
    if len(waypoints) < 2:
        raise RouteTooShortError("Pose stream produced fewer than 2 waypoints")

    first = waypoints[0]
    cyclic = (
        prev is not None
        and travelled >= 3.0 * min_spacing
        and math.hypot(prev.x - first.x, prev.y - first.y) < min_spacing
    )
    if cyclic and math.hypot(waypoints[-1].x - first.x, waypoints[-1].y - first.y) < 0.5 * min_spacing:
        waypoints.pop()
    if max_lateral_accel is not None and len(waypoints) >= 3:
        waypoints = _cap_speeds(waypoints, cyclic, max_lateral_accel, decel)
    route = Route(waypoints, cyclic=cyclic)
    logger.info("Recorded route: %d waypoints, %.1f m, cyclic=%s", len(route), route.length, cyclic)
    return route


def select_goal(
    route: Route,
    pose: Pose,
    lookahead: float,
    *,
    hint: Optional[float] = None,
    max_offtrack: float = MAX_OFFTRACK,
) -> GoalPoint:
    """Walk forward from the nearest route point to the first point `lookahead` away from the ego."""
    if lookahead <= 0:
        raise ValueError("lookahead must be positive")
    near = route.locate(pose.x, pose.y, hint)
    if near.distance > max_offtrack:
        raise OffRouteError(near.distance, max_offtrack)

    pl = route.polyline
    pts = pl.points
    nseg = len(pts) - 1
    px, py = pose.x, pose.y
    r2 = lookahead * lookahead

    seg = near.segment
    start = np.array(near.point)
    s_base = near.s
    walked = 0.0
    goal_xy: Optional[tuple[float, float]] = None
    goal_s = near.s
    goal_seg = seg
    limit = route.length if route.cyclic else route.length - near.s
    while walked <= limit + 1e-9:
        end = pts[seg + 1]
        d = end - start
        seg_len = math.hypot(d[0], d[1])
        if seg_len > 0:
            fx, fy = start[0] - px, start[1] - py
            a = d[0] * d[0] + d[1] * d[1]
            b = 2.0 * (fx * d[0] + fy * d[1])
            c = fx * fx + fy * fy - r2
            disc = b * b - 4.0 * a * c
            if disc >= 0.0:
                t = (-b + math.sqrt(disc)) / (2.0 * a)
                if 0.0 <= t <= 1.0:
                    goal_xy = (float(start[0] + t * d[0]), float(start[1] + t * d[1]))
                    goal_s = s_base + walked + t * seg_len
                    goal_seg = seg
                    break
        walked += seg_len
        seg += 1
        start = pts[seg] if seg < nseg else pts[0]
        if seg >= nseg:
            if not route.cyclic:
                break
            seg = 0
            start = pts[0]

    if goal_xy is None:
        if near.distance >= lookahead or route.cyclic:
            # the lookahead circle misses the path ahead; aim `lookahead` down the route from the nearest point
            goal_s = near.s + lookahead
            if not route.cyclic:
                goal_s = min(goal_s, route.length)
        else:
            # the rest of the route lies inside the lookahead circle
            goal_s = route.length
        goal_xy = route.point_at(goal_s)
        goal_seg = pl._segment_at(route.normalize(goal_s))

    gx, gy = pose.to_local(*goal_xy)
    return GoalPoint(
        g_x=gx,
        g_y=gy,
        lookahead=lookahead,
        index=goal_seg,
        s=route.normalize(goal_s),
        s_nearest=near.s,
        world=goal_xy,
    )


def pure_pursuit_steer(goal: GoalPoint, wheelbase: float, steering_limit: float = 0.55) -> float:
    """Arc through the origin and the goal, tangent to the heading: kappa = 2 g_y / L_d^2."""
    if goal.lookahead <= 0:
        raise ValueError("lookahead must be positive")
    kappa = 2.0 * goal.g_y / (goal.lookahead * goal.lookahead)
    delta = math.atan(kappa * wheelbase)
    return min(max(delta, -steering_limit), steering_limit)


@dataclass(frozen=True, slots=True)
class VelocityLimits:
    comfort_decel: float = 2.0
    standoff: float = 4.0
    stop_margin: float = 0.0
    crosswalk_lookout: float = 30.0
    crosswalk_standoff: float = 2.0


@dataclass(frozen=True, slots=True)
class CrosswalkAhead:
    distance: float  # front bumper to the near edge
    occupied: bool


def _braking_cap(distance: float, decel: float) -> float:
    return math.sqrt(2.0 * decel * max(distance, 0.0))


def velocity_set(
    route: Route,
    pose: Pose,
    *,
    hint: Optional[float] = None,
    stop_distances: Sequence[float] = (),
    crosswalks: Sequence[CrosswalkAhead] = (),
    obstacle_distance: Optional[float] = None,
    end_distance: Optional[float] = None,
    limits: VelocityLimits = VelocityLimits(),
) -> float:
    """Target speed: the tightest of the waypoint speed and every active rule."""
    s = route.locate(pose.x, pose.y, hint).s
    target = route.speed_at(s)
    a = limits.comfort_decel
    for d in stop_distances:
        target = min(target, _braking_cap(d - limits.stop_margin, a))
    for cw in crosswalks:
        if cw.occupied and cw.distance <= limits.crosswalk_lookout:
            target = min(target, _braking_cap(cw.distance - limits.crosswalk_standoff, a))
    if obstacle_distance is not None:
        if obstacle_distance <= limits.standoff:
            target = 0.0
        else:
            target = min(target, _braking_cap(obstacle_distance - limits.standoff, a))
    if end_distance is not None and not route.cyclic:
        target = min(target, _braking_cap(end_distance - limits.stop_margin, a))
    return max(target, 0.0)


def speed_command(target: float, speed: float, *, kp: float = 4.0, stop_decel: float = 2.0) -> float:
    """Proportional speed tracker; a zero target always brakes by at least `stop_decel` so the ego actually halts."""
    accel = kp * (target - speed)
    if target <= 0.0 and speed > 0.0:
        accel = min(accel, -stop_decel)
    return accel


@dataclass(frozen=True, slots=True)
class TwistLimits:
    steering_rate_limit: float = 0.7
    jerk_limit: float = 10.0
    max_brake: float = 6.0
    max_drive: float = 2.0
    steering_limit: float = 0.55
    dt: float = 0.02

    @classmethod
    def for_vehicle(cls, params: VehicleParams, dt: float, jerk_limit: float = 10.0) -> TwistLimits:
        return cls(
            steering_rate_limit=params.steering_rate_limit,
            jerk_limit=jerk_limit,
            max_brake=params.max_brake,
            max_drive=params.max_drive,
            steering_limit=params.steering_limit,
            dt=dt,
        )


def twist_filter(raw: ControlCommand, prev: ControlCommand, limits: TwistLimits) -> ControlCommand:
    if raw.emergency_brake:
        return ControlCommand(
            steering_target=min(max(raw.steering_target, -limits.steering_limit), limits.steering_limit),
            accel=-limits.max_brake,
            emergency_brake=True,
        )
    max_steer = limits.steering_rate_limit * limits.dt
    max_jerk = limits.jerk_limit * limits.dt
    steer = prev.steering_target + min(max(raw.steering_target - prev.steering_target, -max_steer), max_steer)
    accel = prev.accel + min(max(raw.accel - prev.accel, -max_jerk), max_jerk)
    accel = min(max(accel, -limits.max_brake), limits.max_drive)
    return ControlCommand(steering_target=steer, accel=accel, emergency_brake=False)


# ---------------------------------------------------------------------------
# Stop lines
# ---------------------------------------------------------------------------

StopPhase = Literal["approaching", "stopped", "granted", "passed"]


@dataclass(slots=True)
class StopLineEntry:
    geom: StopLineGeom
    s: float  # route arclength of the line
    next_s: float  # unwrapped progress of the next occurrence
    phase: StopPhase = "approaching"
    stopped_at: Optional[float] = None

    @property
    def intersection_id(self) -> Optional[int]:
        return self.geom.intersection_id


@dataclass(frozen=True, slots=True)
class StopLineEvent:
    kind: str  # stop_line_stop | stop_line_violation | stop_line_passed
    entry: StopLineEntry


class StopLineTracker:
    """Per-stop-line state machine along the route: approaching, stopped, granted, passed."""

    def __init__(
        self,
        route: Route,
        stop_lines: Sequence[StopLineGeom],
        *,
        intersections: Optional[dict[int, tuple[float, float]]] = None,
        max_lateral: float = 3.0,
        stop_zone: float = 3.0,
    ) -> None:
        self._route = route
        self._stop_zone = stop_zone
        self.entries: list[StopLineEntry] = []
        for geom in stop_lines:
            proj = route.locate(*geom.position)
            if proj.distance > max_lateral:
                continue
            heading = route.heading_at(proj.s)
            if intersections and geom.intersection_id in intersections:
                ix, iy = intersections[geom.intersection_id]
                toward = (ix - geom.position[0]) * math.cos(heading) + (iy - geom.position[1]) * math.sin(heading)
                if toward <= 0:
                    continue
            self.entries.append(StopLineEntry(geom=geom, s=proj.s, next_s=proj.s))
        self.entries.sort(key=lambda e: e.s)

    def active_distances(self, front_progress: float) -> list[float]:
        """Distances from the front bumper to lines that still require a stop."""
        return [
            e.next_s - front_progress
            for e in self.entries
            if e.phase in ("approaching", "stopped") and e.next_s - front_progress > -self._stop_zone
        ]

    def upcoming(self, front_progress: float, horizon: float) -> list[StopLineEntry]:
        return [e for e in self.entries if e.phase != "passed" and -self._stop_zone < e.next_s - front_progress <= horizon]

    def update(
        self,
        front_progress: float,
        speed: float,
        time: float,
        is_granted: Callable[[StopLineEntry], bool],
    ) -> list[StopLineEvent]:
        events: list[StopLineEvent] = []
        for e in self.entries:
            if e.phase == "passed":
                continue
            dist = e.next_s - front_progress
            if e.phase == "approaching":
                if speed == 0.0 and -0.5 <= dist <= self._stop_zone:
                    e.phase = "stopped"
                    e.stopped_at = time
                    events.append(StopLineEvent("stop_line_stop", e))
                elif dist < -0.5:
                    e.phase = "granted"
                    events.append(StopLineEvent("stop_line_violation", e))
            if e.phase == "stopped" and is_granted(e):
                e.phase = "granted"
            if e.phase == "granted" and dist < -self._stop_zone:
                events.append(StopLineEvent("stop_line_passed", e))
                if self._route.cyclic:
                    e.next_s += self._route.length
                    e.phase = "approaching"
                    e.stopped_at = None
                else:
                    e.phase = "passed"
        return events


# ---------------------------------------------------------------------------
# Scripted drive
# ---------------------------------------------------------------------------


def route_from_lane_path(
    path: Polyline,
    speed: float,
    *,
    cyclic: bool = False,
    dt: float = 0.02,
    params: VehicleParams = VehicleParams(),
    min_spacing: float = 1.0,
    max_lateral_accel: Optional[float] = 1.5,
    sample_every: int = 1,
) -> Route:
    """Drive a lane path with the pure-pursuit chain and record the driven route."""
    guide = Route.from_path(path, speed, spacing=min(min_spacing, 1.0), cyclic=cyclic)
    start = path.point_at(0.0)
    state = VehicleState(start[0], start[1], path.heading_at(0.0), 0.0, 0.0, params)
    limits = TwistLimits.for_vehicle(params, dt)
    weather = WeatherState.clear()
    prev_cmd = ControlCommand()
    poses = [state.pose]
    progress = 0.0
    hint = 0.0
    max_ticks = int(4.0 * (guide.length / max(speed, 0.1)) / dt) + 1000
    for tick in range(max_ticks):
        near = guide.locate(state.x, state.y, hint)
        delta_s = near.s - hint
        if cyclic and delta_s < -0.5 * guide.length:
            delta_s += guide.length
        elif cyclic and delta_s > 0.5 * guide.length:
            delta_s -= guide.length
        progress += max(delta_s, 0.0)
        hint = near.s
        remaining = guide.length - progress
        if remaining <= 0.05 or (not cyclic and state.speed == 0.0 and remaining < 0.5 and tick > 0):
            break
        goal = select_goal(guide, state.pose, lookahead_distance(state.speed), hint=hint)
        steer = pure_pursuit_steer(goal, params.wheelbase, params.steering_limit)
        target = velocity_set(guide, state.pose, hint=hint, end_distance=None if cyclic else remaining)
        raw = ControlCommand(steer, speed_command(target, state.speed))
        cmd = twist_filter(raw, prev_cmd, limits)
        prev_cmd = cmd
        state = bicycle_step(state, cmd, weather, dt)
        if tick % sample_every == 0:
            poses.append(state.pose)
    poses.append(state.pose)
    return record_route(poses, min_spacing, speed, max_lateral_accel=max_lateral_accel)
