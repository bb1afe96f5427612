"""
Background traffic: NPC vehicle and pedestrian policies, right-of-way
arbitration at controlled intersections and the overhead smart-circle sensor.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Final, Literal, Mapping, Optional, Sequence

import numpy as np
from shapely.geometry import Point, Polygon

from app.core.errors import OffRouteError
from app.core.geometry import Pose
from app.services.guidance import (
    Route,
    TwistLimits,
    lookahead_distance,
    pure_pursuit_steer,
    select_goal,
    speed_command,
    twist_filter,
)
from app.services.perception_planning import Cluster, footprint_points
from app.services.sim_engine import (
    EGO_ID,
    Agent,
    AgentDecision,
    ControlCommand,
    NpcAgent,
    PedestrianAgent,
    SimState,
    VehicleParams,
)
from app.services.world_model import Footprint, footprint_distance


logger = logging.getLogger(__name__)


FOLLOW_STANDOFF: Final[float] = 3.0
FOLLOW_DECEL: Final[float] = 2.0
FOLLOW_HORIZON: Final[float] = 40.0
STOP_ZONE: Final[float] = 3.0
SPAWN_CLEARANCE: Final[float] = 8.0
ERRATIC_DECEL: Final[float] = 4.0


def _brake_cap(distance: float, decel: float) -> float:
    return math.sqrt(2.0 * decel * max(distance, 0.0))


# ---------------------------------------------------------------------------
# Conflict zones and arbitration
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ConflictZone:
    intersection_id: int
    center: tuple[float, float]
    radius: float
    control: str

    def contains(self, fp: Footprint) -> bool:
        return fp.distance_to_point(*self.center) <= self.radius


def zone_occupants(zone: ConflictZone, bodies: Sequence[tuple[int, Footprint]]) -> frozenset[int]:
    return frozenset(i for i, fp in bodies if zone.contains(fp))


class RightOfWayArbiter:
    """
    Grants entry to one vehicle at a time in arrival order (ties by id). The
    next grant waits until the previous grantee has been inside the zone and
    left it, the zone is empty and nobody is committed to entering unannounced.
    """

    def __init__(self, zone: ConflictZone) -> None:
        self.zone = zone
        self._queue: list[tuple[int, int]] = []  # (arrival tick, agent id)
        self.arrival_ticks: dict[int, int] = {}
        self.grantee: Optional[int] = None
        self._grantee_entered = False
        self.occupants: frozenset[int] = frozenset()

    def arrive(self, agent_id: int, tick: int) -> bool:
        if agent_id in self.arrival_ticks or agent_id == self.grantee:
            return False
        self.arrival_ticks[agent_id] = tick
        bisect.insort(self._queue, (tick, agent_id))
        return True

    def forget(self, agent_id: int) -> None:
        """Drop a vehicle that left the scene."""
        self._queue = [q for q in self._queue if q[1] != agent_id]
        if self.grantee == agent_id:
            self.grantee = None
            self._grantee_entered = False

    @property
    def queue(self) -> tuple[int, ...]:
        return tuple(a for _, a in self._queue)

    def is_granted(self, agent_id: int) -> bool:
        return self.grantee == agent_id

    def reserved_for_other(self, agent_id: int) -> bool:
        if self.grantee is not None and self.grantee != agent_id:
            return True
        return bool(self.occupants - {agent_id})

    def arrived_before(self, a: int, b: int) -> bool:
        ta, tb = self.arrival_ticks.get(a), self.arrival_ticks.get(b)
        if ta is None or tb is None:
            return False
        return (ta, a) < (tb, b)

    def update(
        self, tick: int, occupants: frozenset[int], committed: frozenset[int] = frozenset()
    ) -> list[tuple[str, Mapping[str, Any]]]:
        events: list[tuple[str, Mapping[str, Any]]] = []
        self.occupants = occupants
        if self.grantee is not None:
            if self.grantee in occupants:
                self._grantee_entered = True
            elif self._grantee_entered:
                events.append(("zone_exit", {"intersection": self.zone.intersection_id, "agent": self.grantee}))
                self.arrival_ticks.pop(self.grantee, None)
                self.grantee = None
                self._grantee_entered = False
        if self.grantee is None and self._queue and not occupants and not committed:
            _, nxt = self._queue.pop(0)
            self.grantee = nxt
            self._grantee_entered = nxt in occupants
            events.append(("grant", {"intersection": self.zone.intersection_id, "agent": nxt}))
        return events


# ---------------------------------------------------------------------------
# Smart circle
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ObjectReport:
    id: int
    position: tuple[float, float]
    velocity: tuple[float, float]
    yaw: float
    length: float
    width: float

    def footprint(self) -> Footprint:
        return Footprint(center=self.position, yaw=self.yaw, half_length=self.length / 2.0, half_width=self.width / 2.0)


@dataclass(frozen=True, slots=True)
class ObjectListMessage:
    stamp: float
    objects: tuple[ObjectReport, ...] = ()


def report_agent(agent: Agent) -> ObjectReport:
    if isinstance(agent, NpcAgent):
        v = agent.vehicle
        fp = v.footprint()
        return ObjectReport(
            id=agent.id,
            position=fp.center,
            velocity=(v.speed * math.cos(v.yaw), v.speed * math.sin(v.yaw)),
            yaw=v.yaw,
            length=v.params.length,
            width=v.params.width,
        )
    fp = agent.footprint()
    return ObjectReport(
        id=agent.id,
        position=fp.center,
        velocity=(agent.vx, agent.vy),
        yaw=0.0,
        length=2.0 * fp.half_length,
        width=2.0 * fp.half_width,
    )


def smart_circle_broadcast(state: SimState, center: tuple[float, float], radius: float) -> ObjectListMessage:
    """Ground-truth reports of every active agent whose body centre lies in the coverage disk."""
    cx, cy = center
    objects = []
    for agent in sorted([*state.npcs, *state.pedestrians], key=lambda a: a.id):
        if not agent.active:
            continue
        rep = report_agent(agent)
        if math.hypot(rep.position[0] - cx, rep.position[1] - cy) <= radius:
            objects.append(rep)
    return ObjectListMessage(stamp=state.time, objects=tuple(objects))


def fuse_objects(
    clusters: Sequence[Cluster], message: Optional[ObjectListMessage], ego_pose: Pose, *, gate: float = 2.0
) -> list[Cluster]:
    """
    Nearest-centroid association of broadcast objects with lidar clusters.
    Matched clusters take the object's id; unmatched objects become clusters of
    their own perimeter points.
    """
    fused = list(clusters)
    if message is None:
        return fused
    taken: set[int] = set()
    for rep in message.objects:
        lx, ly = ego_pose.to_local(*rep.position)
        best, best_d = None, gate
        for k, c in enumerate(fused):
            if k in taken or c.source not in ("lidar", "truth"):
                continue
            d = math.hypot(c.centroid[0] - lx, c.centroid[1] - ly)
            if d <= best_d:
                best, best_d = k, d
        if best is not None:
            taken.add(best)
            fused[best] = replace(fused[best], agent_id=rep.id, source="fused")
            continue
        pts = ego_pose.inverse_transform_points(footprint_points(rep.footprint()))
        c = pts.mean(axis=0)
        fused.append(Cluster(
            id=len(fused),
            points=pts,
            centroid=(float(c[0]), float(c[1])),
            radius=float(np.max(np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1]))),
            source="broadcast",
            agent_id=rep.id,
        ))
    return fused


# ---------------------------------------------------------------------------
# NPC vehicles
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class PathStop:
    s: float  # front-bumper progress at the line
    intersection_id: int


@dataclass(frozen=True, slots=True)
class PathZone:
    s_entry: float  # front-bumper progress at which the body reaches the zone
    intersection_id: int


@dataclass(frozen=True, slots=True)
class NpcPlan:
    id: int
    route: Route
    cruise_speed: float
    spawn_time: float
    erratic: bool = False
    stops: tuple[PathStop, ...] = ()
    zones: tuple[PathZone, ...] = ()
    params: VehicleParams = field(default_factory=VehicleParams)
    start_progress: float = 0.0


NpcPhase = Literal["pending", "driving", "done"]


@dataclass(frozen=True, slots=True)
class NpcMemory:
    phase: NpcPhase = "pending"
    progress: float = 0.0
    passed: frozenset[int] = frozenset()
    arrived: frozenset[int] = frozenset()
    violated: frozenset[int] = frozenset()
    prev_cmd: ControlCommand = field(default_factory=ControlCommand)


def _spawn_clear(state: SimState, agent_id: int, point: tuple[float, float]) -> bool:
    for i, fp in state.footprints():
        if i != agent_id and fp.distance_to_point(*point) < SPAWN_CLEARANCE:
            return False
    return True


def corridor_gap(
    route: Route,
    progress: float,
    front_offset: float,
    bodies: Sequence[tuple[int, Footprint]],
    *,
    half_width: float,
    horizon: float = FOLLOW_HORIZON,
) -> Optional[float]:
    """Free distance from the front bumper to the nearest body inside the path corridor."""
    origin = route.point_at(progress)
    best: Optional[float] = None
    for _, fp in bodies:
        if math.hypot(fp.center[0] - origin[0], fp.center[1] - origin[1]) > horizon + fp.circumradius:
            continue
        for px, py in [fp.center, *fp.corners()]:
            proj = route.locate(px, py, progress, window=horizon)
            ahead = proj.s - route.normalize(progress)
            if route.cyclic and ahead < -0.5 * route.length:
                ahead += route.length
            if proj.distance > half_width or ahead <= 0.0:
                continue
            gap = ahead - front_offset
            if gap < -front_offset:
                continue
            if best is None or gap < best:
                best = gap
    return best


class NpcPolicy:
    """Lane follower with gap keeping, stop-line compliance and optional erratic priority skipping."""

    def __init__(self, plan: NpcPlan, arbiters: Mapping[int, RightOfWayArbiter], dt: float) -> None:
        self.plan = plan
        self._arbiters = arbiters
        self._limits = TwistLimits.for_vehicle(plan.params, dt)

    def __call__(self, state: SimState, agent: Agent, rng: np.random.Generator) -> AgentDecision:
        assert isinstance(agent, NpcAgent)
        plan = self.plan
        mem: NpcMemory = agent.policy_state or NpcMemory(progress=plan.start_progress)
        if mem.phase == "done":
            return AgentDecision(policy_state=mem, active=False)
        if mem.phase == "pending":
            if state.time >= plan.spawn_time and _spawn_clear(state, agent.id, agent.footprint().center):
                return AgentDecision(command=ControlCommand(), policy_state=replace(mem, phase="driving"), active=True)
            return AgentDecision(policy_state=mem, active=False)

        v = agent.vehicle
        route = plan.route
        progress = route.locate(v.x, v.y, mem.progress).s
        if not route.cyclic and progress >= route.length - 1.0:
            for arb in self._arbiters.values():
                arb.forget(agent.id)
            return AgentDecision(policy_state=replace(mem, phase="done", progress=progress), active=False)
        front_off = plan.params.front_overhang
        front = progress + front_off

        target = plan.cruise_speed
        others = [(i, fp) for i, fp in state.footprints() if i != agent.id]
        gap = corridor_gap(route, progress, front_off, others, half_width=plan.params.width / 2.0 + 0.5)
        if gap is not None:
            target = min(target, _brake_cap(gap - FOLLOW_STANDOFF, FOLLOW_DECEL))

        events: list[tuple[str, Mapping[str, Any]]] = []
        passed, arrived, violated = set(mem.passed), set(mem.arrived), set(mem.violated)
        for k, stop in enumerate(plan.stops):
            if k in passed:
                continue
            d = stop.s - front
            arb = self._arbiters.get(stop.intersection_id)
            granted = arb is None or arb.is_granted(agent.id)
            if d < -STOP_ZONE:
                passed.add(k)
                continue
            if plan.erratic or (granted and k in arrived):
                continue
            target = min(target, _brake_cap(d, FOLLOW_DECEL))
            if v.speed == 0.0 and d <= STOP_ZONE and k not in arrived:
                arrived.add(k)
                events.append(("stop_line_arrival", {"intersection": stop.intersection_id}))

        if plan.erratic:
            brake = plan.params.max_brake * state.weather.friction_factor
            for k, zone in enumerate(plan.zones):
                arb = self._arbiters.get(zone.intersection_id)
                if arb is None:
                    continue
                d = zone.s_entry - front
                if d > 0.0 and arb.reserved_for_other(agent.id):
                    if v.speed * v.speed / (2.0 * brake) <= d - 0.5:
                        target = min(target, _brake_cap(d - 1.0, ERRATIC_DECEL))
                elif -STOP_ZONE < d <= 0.0 and k not in violated and not arb.is_granted(agent.id):
                    violated.add(k)
                    events.append(("npc_priority_violation", {"intersection": zone.intersection_id}))

        try:
            goal = select_goal(route, v.pose, lookahead_distance(v.speed), hint=progress)
            steer = pure_pursuit_steer(goal, plan.params.wheelbase, plan.params.steering_limit)
        except OffRouteError:
            steer, target = mem.prev_cmd.steering_target, 0.0
        raw = ControlCommand(steer, speed_command(target, v.speed))
        cmd = twist_filter(raw, mem.prev_cmd, self._limits)
        return AgentDecision(
            command=cmd,
            policy_state=NpcMemory(
                phase="driving",
                progress=progress,
                passed=frozenset(passed),
                arrived=frozenset(arrived),
                violated=frozenset(violated),
                prev_cmd=cmd,
            ),
            events=tuple(events),
        )


def is_committed(agent: NpcAgent, plan: NpcPlan, zone_id: int, friction: float) -> bool:
    """An erratic NPC that can no longer stop short of the zone."""
    mem: NpcMemory = agent.policy_state or NpcMemory()
    if not agent.active or not plan.erratic or mem.phase != "driving":
        return False
    front = mem.progress + plan.params.front_overhang
    brake = plan.params.max_brake * friction
    v = agent.vehicle.speed
    for zone in plan.zones:
        if zone.intersection_id != zone_id:
            continue
        d = zone.s_entry - front
        if 0.0 < d <= v * v / (2.0 * brake) + 1.0 and v > 0.1:
            return True
    return False


# ---------------------------------------------------------------------------
# Stopped obstacle
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ParkedPlan:
    id: int
    reveal_gap: float


class ParkedPolicy:
    """Stationary vehicle that appears once the ego is within `reveal_gap`."""

    def __init__(self, plan: ParkedPlan) -> None:
        self.plan = plan

    def __call__(self, state: SimState, agent: Agent, rng: np.random.Generator) -> AgentDecision:
        assert isinstance(agent, NpcAgent)
        if agent.active:
            return AgentDecision(command=ControlCommand(accel=-agent.vehicle.params.max_brake), policy_state="revealed")
        gap = footprint_distance(state.ego.footprint(), agent.footprint())
        if gap <= self.plan.reveal_gap:
            return AgentDecision(
                command=ControlCommand(),
                policy_state="revealed",
                active=True,
                events=(("obstacle_revealed", {"gap": gap}),),
            )
        return AgentDecision(policy_state="hidden", active=False)


# ---------------------------------------------------------------------------
# Pedestrians
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class PedestrianPlan:
    id: int
    start: tuple[float, float]
    end: tuple[float, float]
    walk_speed: float
    spawn_time: float
    patience: float
    crosswalk: Polygon
    crosswalk_id: int

    @property
    def span(self) -> float:
        return math.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1])

    @property
    def direction(self) -> tuple[float, float]:
        n = self.span
        return ((self.end[0] - self.start[0]) / n, (self.end[1] - self.start[1]) / n)


PedPhase = Literal["pending", "curb", "crossing", "done"]


@dataclass(frozen=True, slots=True)
class PedMemory:
    phase: PedPhase = "pending"
    wait_since: float = 0.0


def _vehicle_bodies(state: SimState) -> list[tuple[float, float, float, float, Footprint]]:
    """(x, y, yaw, speed, footprint) of the ego and every active NPC."""
    out = [(state.ego.x, state.ego.y, state.ego.yaw, state.ego.speed, state.ego.footprint())]
    for a in state.npcs:
        if a.active:
            v = a.vehicle
            out.append((v.x, v.y, v.yaw, v.speed, v.footprint()))
    return out


class PedestrianPolicy:
    """
    Curb gap acceptance: cross when no vehicle body is on the crosswalk and no
    moving vehicle would reach it before the crossing is done. After waiting
    `patience` seconds the pedestrian accepts any gap a vehicle can still stop for.
    """

    def __init__(self, plan: PedestrianPlan, *, comfort_decel: float = 2.0) -> None:
        self.plan = plan
        self._decel = comfort_decel
        self._guard = plan.crosswalk.buffer(1.0)

    def _gap_ok(self, state: SimState, waited: float) -> bool:
        plan = self.plan
        cx, cy = plan.crosswalk.centroid.x, plan.crosswalk.centroid.y
        crossing_time = plan.span / plan.walk_speed
        for x, y, yaw, speed, fp in _vehicle_bodies(state):
            if self._guard.intersects(Polygon(fp.corners())):
                return False
            local = Pose(x, y, yaw).to_local(cx, cy)
            ahead = local[0] - fp.half_length * 2.0
            if abs(local[1]) > plan.span / 2.0 + 2.0 or ahead <= 0.0 or speed <= 0.1:
                continue
            if waited < plan.patience:
                if ahead / speed <= crossing_time + 1.0:
                    return False
            elif ahead < speed * speed / (2.0 * self._decel) + 3.0:
                return False
        return True

    def __call__(self, state: SimState, agent: Agent, rng: np.random.Generator) -> AgentDecision:
        assert isinstance(agent, PedestrianAgent)
        plan = self.plan
        mem: PedMemory = agent.policy_state or PedMemory()
        if mem.phase == "done":
            return AgentDecision(velocity=(0.0, 0.0), policy_state=mem, active=False)
        if mem.phase == "pending":
            if state.time >= plan.spawn_time:
                return AgentDecision(
                    velocity=(0.0, 0.0), policy_state=PedMemory("curb", state.time), active=True
                )
            return AgentDecision(velocity=(0.0, 0.0), policy_state=mem, active=False)
        if mem.phase == "curb":
            if self._gap_ok(state, state.time - mem.wait_since):
                ux, uy = plan.direction
                return AgentDecision(
                    velocity=(ux * plan.walk_speed, uy * plan.walk_speed),
                    policy_state=replace(mem, phase="crossing"),
                    events=(("crossing_start", {"crosswalk": plan.crosswalk_id}),),
                )
            return AgentDecision(velocity=(0.0, 0.0), policy_state=mem)
        ux, uy = plan.direction
        walked = (agent.x - plan.start[0]) * ux + (agent.y - plan.start[1]) * uy
        if walked >= plan.span:
            return AgentDecision(velocity=(0.0, 0.0), policy_state=replace(mem, phase="done"), active=False)
        return AgentDecision(velocity=(ux * plan.walk_speed, uy * plan.walk_speed), policy_state=mem)


def pedestrian_near_crosswalk(ped: PedestrianAgent, plan: PedestrianPlan) -> tuple[bool, bool]:
    """(inside the crosswalk, waiting at its curb)."""
    mem: PedMemory = ped.policy_state or PedMemory()
    if not ped.active or mem.phase in ("pending", "done"):
        return False, False
    inside = plan.crosswalk.buffer(0.5).covers(Point(ped.x, ped.y))
    return inside or mem.phase == "crossing", mem.phase == "curb"


def label_agent(point: tuple[float, float], state: SimState, *, tolerance: float = 1.0) -> Optional[int]:
    """Id of the active agent whose body is nearest to a world point, within tolerance."""
    best, best_d = None, tolerance
    for i, fp in state.footprints(include_ego=False):
        d = fp.distance_to_point(*point)
        if d <= best_d:
            best, best_d = i, d
    return best


def zone_entries(
    route: Route, zones: Sequence[ConflictZone], *, half_width: float, step: float = 0.25
) -> list[PathZone]:
    """Front-bumper arclengths at which a body following the route reaches each zone."""
    out: list[PathZone] = []
    n = max(2, int(math.ceil(route.length / step)) + 1)
    stations = np.linspace(0.0, route.length, n)
    for zone in zones:
        cx, cy = zone.center
        inside = False
        for s in stations:
            x, y = route.point_at(float(s))
            now = math.hypot(x - cx, y - cy) <= zone.radius + half_width
            if now and not inside:
                out.append(PathZone(s_entry=float(s), intersection_id=zone.intersection_id))
            inside = now
    return sorted(out, key=lambda z: z.s_entry)
