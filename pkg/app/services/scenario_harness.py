"""
Scenario execution: builds the world, agents and ego stack for a ScenarioSpec
and runs the per-tick loop

    sensors -> ego stack (or bridge client) -> sim step -> arbitration -> metrics

writing every metric sample and event to the run trace.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping, Optional, Protocol

import numpy as np
from shapely.geometry import Polygon

from app.core.config import Settings, load_settings
from app.core.errors import FormatError
from app.core.file_utils import write_text_atomic
from app.core.geometry import Pose
from app.services.ego_stack import (
    CrosswalkStatus,
    EgoConfig,
    EgoController,
    EgoObservation,
    EgoStep,
    TrafficRules,
)
from app.services.formats import (
    LaneRefModel,
    LidarSpec,
    Range,
    ScenarioOutcome,
    ScenarioSpec,
    ndt_map_from_json,
    route_from_csv,
)
from app.services.guidance import Route, StopLineTracker, route_from_lane_path
from app.services.ndt_localization import Extrinsic, NdtLocalizer, NdtMap, build_ndt_map
from app.services.scenario_maps import MapBundle, lane_route_path, lane_slice, load_map
from app.services.sensors import (
    LidarConfig,
    OdometryNoise,
    SensorStreams,
    read_gps,
    read_odometry,
    scan_lidar,
    scan_state,
)
from app.services.sim_engine import (
    EGO_ID,
    AgentPolicy,
    ControlCommand,
    NpcAgent,
    PedestrianAgent,
    SimState,
    VehicleParams,
    VehicleState,
    WeatherState,
    bicycle_step,
    initial_state,
    step as sim_step,
)
from app.services.trace import TraceWriter, metrics_from_trace
from app.services.traffic import (
    NpcPlan,
    NpcPolicy,
    ObjectListMessage,
    ParkedPlan,
    ParkedPolicy,
    PathStop,
    PedestrianPlan,
    PedestrianPolicy,
    RightOfWayArbiter,
    is_committed,
    label_agent,
    pedestrian_near_crosswalk,
    smart_circle_broadcast,
    zone_entries,
    zone_occupants,
)
from app.services.world_model import StaticWorld, footprint_distance

from pipeline.speed_analyzer import SpeedTracker


logger = logging.getLogger(__name__)


FINISH_TOLERANCE = 1.0
NDT_MAP_SPACING = 2.0

# spawn_key groups of the per-scenario SeedSequence
_KEY_SIM = 0
_KEY_NPC = 1
_KEY_PEDESTRIAN = 2
_KEY_SENSORS = 99


class Controller(Protocol):
    def step(self, obs: EgoObservation) -> EgoStep: ...


# ---------------------------------------------------------------------------
# Setup
# ---------------------------------------------------------------------------


def weather_from_spec(spec: ScenarioSpec) -> WeatherState:
    w = spec.weather
    base = WeatherState.preset(w.condition)
    overrides = {
        k: v
        for k, v in (
            ("friction_factor", w.friction_factor),
            ("sensor_noise_scale", w.sensor_noise_scale),
            ("sensor_dropout_prob", w.sensor_dropout_prob),
            ("speed_factor", w.speed_factor),
        )
        if v is not None
    }
    try:
        return replace(base, **overrides)
    except ValueError as e:
        raise FormatError(f"Invalid weather for scenario {spec.name}: {e}") from e


def lidar_config(spec: LidarSpec) -> LidarConfig:
    return LidarConfig(
        beam_count=spec.beam_count,
        max_range=spec.max_range,
        range_noise_sigma=spec.range_noise_sigma,
        mount_pose=Pose(*spec.mount),
    )


@lru_cache(maxsize=32)
def _lane_route(
    map_name: str,
    lanes: tuple[LaneRefModel, ...],
    speed: float,
    cyclic: bool,
    dt: float,
    lane_width: float,
    conflict_radius: Optional[float],
) -> Route:
    bundle = load_map(map_name, lane_width=lane_width, conflict_radius=conflict_radius)
    path = lane_route_path(bundle.world, lanes)
    return route_from_lane_path(path, speed, cyclic=cyclic, dt=dt)


def build_route_ndt_map(
    world: StaticWorld, route: Route, lidar: LidarConfig, *, cell_size: float, spacing: float = NDT_MAP_SPACING
) -> NdtMap:
    """Noiseless scans of the static world every `spacing` meters along the route, accumulated into an NDT map."""
    clean = replace(lidar, range_noise_sigma=0.0)
    weather = WeatherState.clear()
    rng = np.random.Generator(np.random.PCG64(0))
    scans = []
    n = max(1, int(route.length // spacing))
    for k in range(n + 1):
        s = min(k * spacing, route.length)
        x, y = route.point_at(s)
        pose = Pose(x, y, route.heading_at(s))
        cloud = scan_lidar(world, [], pose, clean, weather, rng)
        scans.append((cloud, pose.compose(clean.mount_pose)))
    ndt = build_ndt_map(scans, cell_size)
    logger.info("NDT map built from %d scans: %d cells of %.1f m", len(scans), len(ndt), cell_size)
    return ndt


@lru_cache(maxsize=8)
def _lane_route_ndt_map(
    map_name: str,
    lanes: tuple[LaneRefModel, ...],
    speed: float,
    cyclic: bool,
    dt: float,
    lane_width: float,
    conflict_radius: Optional[float],
    lidar: LidarSpec,
    cell_size: float,
) -> NdtMap:
    bundle = load_map(map_name, lane_width=lane_width, conflict_radius=conflict_radius)
    route = _lane_route(map_name, lanes, speed, cyclic, dt, lane_width, conflict_radius)
    return build_route_ndt_map(bundle.world, route, lidar_config(lidar), cell_size=cell_size)


def _resolve(base_dir: Optional[Path], name: str) -> Path:
    p = Path(name)
    if not p.is_absolute() and base_dir is not None:
        p = base_dir / p
    return p


@dataclass(frozen=True, slots=True)
class ScenarioSetup:
    """Everything both sides of a run (simulator and ego stack) derive from the scenario document."""

    spec: ScenarioSpec
    bundle: MapBundle
    route: Route
    weather: WeatherState
    lidar: LidarConfig
    params: VehicleParams = field(default_factory=VehicleParams)
    ndt_map: Optional[NdtMap] = None
    denial_zones: tuple[Polygon, ...] = ()
    smart_circle: Optional[tuple[tuple[float, float], float]] = None
    lidar_period: int = 5

    @property
    def intersections(self) -> dict[int, tuple[float, float]]:
        return {i.id: i.position for i in self.bundle.network.intersections}


def prepare(
    spec: ScenarioSpec,
    *,
    settings: Optional[Settings] = None,
    base_dir: Optional[Path] = None,
    ndt_map: Optional[NdtMap] = None,
) -> ScenarioSetup:
    settings = settings or load_settings()
    map_name = spec.map
    if map_name.endswith((".json", ".osm", ".xml")):
        map_name = str(_resolve(base_dir, map_name))
    bundle = load_map(map_name, lane_width=settings.lane_width, conflict_radius=spec.conflict_radius)
    weather = weather_from_spec(spec)
    speed = spec.route.cruise_speed * weather.speed_factor

    if spec.route.file:
        route = route_from_csv(_resolve(base_dir, spec.route.file).read_text(encoding="utf-8"))
    else:
        route = _lane_route(
            map_name, spec.route.lanes, speed, spec.route.cyclic, spec.dt, settings.lane_width, spec.conflict_radius
        )

    lidar = lidar_config(spec.lidar)
    loc = spec.localization
    if loc.mode == "ndt" and ndt_map is None:
        if loc.map_file:
            ndt_map = ndt_map_from_json(_resolve(base_dir, loc.map_file).read_bytes())
        elif spec.route.file:
            ndt_map = build_route_ndt_map(bundle.world, route, lidar, cell_size=settings.ndt_cell_size)
        else:
            ndt_map = _lane_route_ndt_map(
                map_name, spec.route.lanes, speed, spec.route.cyclic, spec.dt, settings.lane_width,
                spec.conflict_radius, spec.lidar, settings.ndt_cell_size,
            )

    smart = None
    sc = spec.smart_circle
    if sc.enabled:
        default = bundle.smart_circle
        center = sc.center if sc.center is not None else (default[0] if default else None)
        radius = sc.radius if sc.radius is not None else (default[1] if default else None)
        if center is None or radius is None:
            raise FormatError(f"Scenario {spec.name}: smart circle enabled but map {spec.map} has no traffic circle")
        smart = (tuple(center), float(radius))

    return ScenarioSetup(
        spec=spec,
        bundle=bundle,
        route=route,
        weather=weather,
        lidar=lidar,
        ndt_map=ndt_map,
        denial_zones=tuple(Polygon(z) for z in loc.denial_zones),
        smart_circle=smart,
        lidar_period=spec.lidar.period_ticks or settings.lidar_period_ticks,
    )


def make_ego_controller(setup: ScenarioSetup) -> EgoController:
    """The in-process autonomy chain for a prepared scenario; bridge clients build the same one."""
    spec = setup.spec
    localizer = None
    if spec.localization.mode == "ndt":
        assert setup.ndt_map is not None
        localizer = NdtLocalizer(
            setup.ndt_map,
            Extrinsic(setup.lidar.mount_pose),
            downsample_radius=spec.localization.downsample_radius,
        )
    config = EgoConfig(
        params=setup.params,
        dt=spec.dt,
        friction_factor=setup.weather.friction_factor,
        perception=spec.perception,
        localization=spec.localization.mode,
        on_lost=spec.localization.on_lost,
        lidar_mount=setup.lidar.mount_pose,
    )
    return EgoController(
        setup.route,
        setup.bundle.world,
        config=config,
        zones=setup.bundle.zones,
        intersections=setup.intersections,
        localizer=localizer,
    )


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, r: Range) -> float:
    return float(r.low) if r.high == r.low else float(rng.uniform(r.low, r.high))


class ScenarioSession:
    """
    One deterministic run. Drive it with `observe()` / `advance(step)` until
    `finished`, then `close()` for the outcome. Every random draw comes from a
    SeedSequence child of the scenario seed: the world step, each spawned
    agent and the sensors draw from independent streams.
    """

    def __init__(
        self,
        spec: ScenarioSpec,
        *,
        settings: Optional[Settings] = None,
        base_dir: Optional[Path] = None,
        ndt_map: Optional[NdtMap] = None,
        tracker: Optional[SpeedTracker] = None,
        setup: Optional[ScenarioSetup] = None,
    ) -> None:
        self.spec = spec
        self.setup = setup or prepare(spec, settings=settings, base_dir=base_dir, ndt_map=ndt_map)
        self.tracker = tracker
        self.dt = spec.dt
        world = self.setup.bundle.world
        route = self.setup.route
        params = self.setup.params

        self.arbiters: dict[int, RightOfWayArbiter] = {z.intersection_id: RightOfWayArbiter(z) for z in self.setup.bundle.zones}
        self.policies: dict[int, AgentPolicy] = {}
        self.npc_plans: dict[int, NpcPlan] = {}
        self.pedestrian_plans: dict[int, PedestrianPlan] = {}
        self.obstacle_id: Optional[int] = None

        npcs = self._spawn_npcs(world)
        peds = self._spawn_pedestrians(world, next_id=len(npcs) + 1)
        if spec.obstacle is not None:
            npcs.append(self._place_obstacle(world, len(npcs) + len(peds) + 1))

        start = route.waypoints[0]
        ego = VehicleState(start.x, start.y, start.yaw, 0.0, 0.0, params)
        self.state: SimState = initial_state(
            ego,
            npcs=npcs,
            pedestrians=peds,
            weather=self.setup.weather,
            seed=np.random.SeedSequence(spec.seed, spawn_key=(_KEY_SIM,)),
            dt=spec.dt,
        )
        self.sensors = SensorStreams.from_seed_sequence(np.random.SeedSequence(spec.seed, spawn_key=(_KEY_SENSORS,)))
        self.odometry_noise = OdometryNoise(
            spec.localization.odometry_translation_frac, spec.localization.odometry_yaw_sigma
        )
        self.ego_stops = StopLineTracker(route, world.stop_lines, intersections=self.setup.intersections)

        self._prev_ego = ego
        self._broadcast: Optional[ObjectListMessage] = None
        self._hint = 0.0
        self.progress = 0.0
        self._event_cursor = 0
        self._ego_zones: set[int] = set()
        self._co_occupied: set[int] = set()
        self._wait_since: Optional[float] = None
        self._paused = False
        self._detected: set[int] = set()
        self.finished = False
        self.completed = False
        self.finish_time: Optional[float] = None

        self.trace = TraceWriter({
            "scenario": spec.model_dump(mode="json"),
            "route_length": route.length,
            "agents": {
                "npcs": sorted(self.npc_plans),
                "pedestrians": sorted(self.pedestrian_plans),
                "obstacle": self.obstacle_id,
            },
        })
        logger.info(
            "Scenario %s (seed %d): %d NPCs, %d pedestrians, route %.1f m",
            spec.name, spec.seed, len(self.npc_plans), len(self.pedestrian_plans), route.length,
        )

    # -- agents ------------------------------------------------------------

    def _spawn_npcs(self, world: StaticWorld) -> list[NpcAgent]:
        spec = self.spec
        zones = self.setup.bundle.zones
        npcs: list[NpcAgent] = []
        next_id = 1
        for g, group in enumerate(spec.npc_spawns):
            path = lane_route_path(world, group.lanes)
            for k in range(group.count):
                rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(_KEY_NPC, g, k)))
                entry = _uniform(rng, group.entry_time) + k * group.headway
                speed = _uniform(rng, group.speed) * self.setup.weather.speed_factor
                route = Route.from_path(path, speed, spacing=1.0)
                tracker = StopLineTracker(route, world.stop_lines, intersections=self.setup.intersections)
                stops = tuple(
                    PathStop(s=e.s, intersection_id=e.intersection_id)
                    for e in tracker.entries
                    if e.intersection_id is not None
                )
                params = self.setup.params
                plan = NpcPlan(
                    id=next_id,
                    route=route,
                    cruise_speed=speed,
                    spawn_time=entry,
                    erratic=k < group.erratic_count,
                    stops=stops,
                    zones=tuple(zone_entries(route, zones, half_width=params.width / 2.0)),
                    params=params,
                )
                w0 = route.waypoints[0]
                npcs.append(NpcAgent(
                    id=next_id,
                    vehicle=VehicleState(w0.x, w0.y, w0.yaw, speed, 0.0, params),
                    active=False,
                ))
                self.npc_plans[next_id] = plan
                self.policies[next_id] = NpcPolicy(plan, self.arbiters, self.dt)
                next_id += 1
        return npcs

    def _spawn_pedestrians(self, world: StaticWorld, next_id: int) -> list[PedestrianAgent]:
        spec = self.spec
        peds: list[PedestrianAgent] = []
        for g, group in enumerate(spec.pedestrian_spawns):
            if group.crosswalk >= len(world.crosswalks):
                raise FormatError(f"Scenario {spec.name}: map has no crosswalk {group.crosswalk}")
            cw = world.crosswalks[group.crosswalk]
            polygon = cw.polygon()
            tx, ty = math.cos(cw.heading), math.sin(cw.heading)
            nx, ny = -ty, tx
            reach = cw.half_span + 1.0
            for k in range(group.count):
                rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(_KEY_PEDESTRIAN, g, k)))
                side = 1.0 if rng.integers(2) == 0 else -1.0
                u = float(rng.uniform(-0.3, 0.3)) * cw.width
                entry = _uniform(rng, group.entry_time)
                walk = _uniform(rng, group.walk_speed)
                patience = _uniform(rng, group.patience)
                cx, cy = cw.position[0] + u * tx, cw.position[1] + u * ty
                start = (cx + side * reach * nx, cy + side * reach * ny)
                end = (cx - side * reach * nx, cy - side * reach * ny)
                plan = PedestrianPlan(
                    id=next_id,
                    start=start,
                    end=end,
                    walk_speed=walk,
                    spawn_time=entry,
                    patience=patience,
                    crosswalk=polygon,
                    crosswalk_id=group.crosswalk,
                )
                peds.append(PedestrianAgent(id=next_id, x=start[0], y=start[1], active=False))
                self.pedestrian_plans[next_id] = plan
                self.policies[next_id] = PedestrianPolicy(plan)
                next_id += 1
        return peds

    def _place_obstacle(self, world: StaticWorld, agent_id: int) -> NpcAgent:
        obs = self.spec.obstacle
        assert obs is not None
        lane = lane_slice(world, obs.lane)
        if not 0.0 <= obs.s <= lane.length:
            raise FormatError(f"Obstacle arclength {obs.s} outside lane slice of length {lane.length:.1f}")
        x, y = lane.point_at(obs.s)
        self.obstacle_id = agent_id
        self.policies[agent_id] = ParkedPolicy(ParkedPlan(agent_id, obs.reveal_gap))
        return NpcAgent(
            id=agent_id,
            vehicle=VehicleState(x, y, lane.heading_at(obs.s), 0.0, 0.0, self.setup.params),
            active=False,
        )

    # -- observation -------------------------------------------------------

    def _time(self, stage: str) -> None:
        if self.tracker is not None:
            self.tracker.start(self.spec.name, self.state.tick, stage)

    def _untime(self) -> None:
        if self.tracker is not None:
            self.tracker.stop()

    def rules(self) -> TrafficRules:
        granted = frozenset(z for z, arb in self.arbiters.items() if arb.is_granted(EGO_ID))
        occupied = frozenset(z for z, arb in self.arbiters.items() if arb.occupants - {EGO_ID})
        n = len(self.setup.bundle.world.crosswalks)
        inside = [False] * n
        waiting = [False] * n
        for ped in self.state.pedestrians:
            plan = self.pedestrian_plans.get(ped.id)
            if plan is None:
                continue
            i, w = pedestrian_near_crosswalk(ped, plan)
            inside[plan.crosswalk_id] |= i
            waiting[plan.crosswalk_id] |= w
        crosswalks = tuple(CrosswalkStatus(k, inside[k], waiting[k]) for k in range(n))
        return TrafficRules(granted=granted, occupied_zones=occupied, crosswalks=crosswalks)

    def observe(self) -> EgoObservation:
        """Sensor readings for the current tick."""
        spec = self.spec
        st = self.state
        self._time("sensors")
        ndt = spec.localization.mode == "ndt"
        scan = None
        if (spec.perception == "lidar" or ndt) and st.tick % self.setup.lidar_period == 0:
            scan = scan_state(self.setup.bundle.world, st, self.setup.lidar, self.sensors.lidar)
        odometry = gps = None
        if ndt:
            if st.tick > 0:
                odometry = read_odometry(self._prev_ego, st.ego, self.dt, self.odometry_noise, self.sensors.odometry)
            gps = read_gps(
                (st.ego.x, st.ego.y), self.setup.denial_zones, spec.localization.gps_noise_sigma, self.sensors.gps
            )
        if self.setup.smart_circle is not None and st.tick % spec.smart_circle.broadcast_interval_ticks == 0:
            center, radius = self.setup.smart_circle
            self._broadcast = smart_circle_broadcast(st, center, radius)
        truth = None
        if spec.perception == "ground_truth":
            reach = self.setup.lidar.max_range
            truth = tuple(
                (i, fp) for i, fp in st.footprints(include_ego=False)
                if fp.distance_to_point(st.ego.x, st.ego.y) <= reach
            )
        obs = EgoObservation(
            tick=st.tick,
            time=st.time,
            speed=st.ego.speed,
            pose=st.ego.pose if not ndt else None,
            scan=scan,
            odometry=odometry,
            gps=gps,
            objects=self._broadcast,
            truth_agents=truth,
            rules=self.rules(),
        )
        self._untime()
        return obs

    # -- advance -----------------------------------------------------------

    def advance(self, ego_step: EgoStep) -> None:
        """Apply the ego command for the current tick and step the world."""
        if self.finished:
            raise RuntimeError("Session already finished")
        spec = self.spec
        st = self.state
        cmd = ego_step.command if st.time >= spec.ego_start_delay else ControlCommand()

        pre: list[tuple[str, Mapping[str, Any]]] = list(ego_step.events)
        for agent_id, point in ego_step.detections:
            if agent_id is None:
                agent_id = label_agent(point, st)
            if agent_id is not None and agent_id not in self._detected:
                self._detected.add(agent_id)
                pre.append(("first_detection", {"agent": agent_id}))
        if pre:
            st = st.with_events(*pre)

        self._time("sim")
        self._prev_ego = st.ego
        nxt = sim_step(st, cmd, self.dt, policies=self.policies)
        self._untime()

        self._time("arbitration")
        extra = self._arbitrate(nxt)
        self._untime()
        if extra:
            nxt = nxt.with_events(*extra)
        self.state = nxt
        self._record(cmd)

    def _update_progress(self, st: SimState) -> None:
        route = self.setup.route
        near = route.locate(st.ego.x, st.ego.y, self._hint)
        delta = near.s - self._hint
        if route.cyclic and delta < -0.5 * route.length:
            delta += route.length
        elif route.cyclic and delta > 0.5 * route.length:
            delta -= route.length
        self.progress += max(delta, 0.0)
        self._hint = near.s

    def _arbitrate(self, nxt: SimState) -> list[tuple[str, Mapping[str, Any]]]:
        extra: list[tuple[str, Mapping[str, Any]]] = []
        for ev in nxt.events[len(self.state.events):]:
            if ev.kind == "stop_line_arrival":
                arb = self.arbiters.get(ev.data.get("intersection"))
                if arb is not None:
                    arb.arrive(ev.data["agent"], nxt.tick)

        self._update_progress(nxt)
        params = self.setup.params
        front = self.progress + params.front_overhang

        def ego_granted(entry: Any) -> bool:
            arb = self.arbiters.get(entry.intersection_id)
            return arb is None or arb.is_granted(EGO_ID)

        for ev in self.ego_stops.update(front, nxt.ego.speed, nxt.time, ego_granted):
            iid = ev.entry.intersection_id
            extra.append((ev.kind, {"agent": EGO_ID, "intersection": iid}))
            if ev.kind == "stop_line_stop" and iid in self.arbiters:
                self.arbiters[iid].arrive(EGO_ID, nxt.tick)

        vehicles = [(EGO_ID, nxt.ego.footprint())] + [(a.id, a.footprint()) for a in nxt.npcs if a.active]
        friction = nxt.weather.friction_factor
        for zid, arb in sorted(self.arbiters.items()):
            occupants = zone_occupants(arb.zone, vehicles)
            committed = frozenset(
                a.id for a in nxt.npcs
                if a.id in self.npc_plans and is_committed(a, self.npc_plans[a.id], zid, friction)
            )
            extra.extend(arb.update(nxt.tick, occupants, committed))

            ego_in = EGO_ID in occupants
            if ego_in and zid not in self._ego_zones and not arb.is_granted(EGO_ID):
                extra.append(("priority_violation", {"agent": EGO_ID, "intersection": zid}))
            self._ego_zones.discard(zid)
            if ego_in:
                self._ego_zones.add(zid)
            others = occupants - {EGO_ID}
            if ego_in and others:
                if zid not in self._co_occupied:
                    extra.append(("zone_co_occupancy", {"intersection": zid, "agents": sorted(others)}))
                self._co_occupied.add(zid)
            else:
                self._co_occupied.discard(zid)

        route = self.setup.route
        if route.cyclic:
            done = self.progress >= self.spec.route.laps * route.length
        else:
            remaining = route.length - self.progress
            done = remaining <= 0.0 or (remaining <= FINISH_TOLERANCE and nxt.ego.speed == 0.0)
        if done:
            self.finished = True
            self.completed = True
            self.finish_time = nxt.time
            extra.append(("route_complete", {"progress": self.progress}))
            logger.info("Scenario %s: route complete at t=%.2f s", self.spec.name, nxt.time)
            return extra

        holding = nxt.time < self.spec.ego_start_delay
        if nxt.ego.speed == 0.0 and not holding:
            if self._wait_since is None:
                self._wait_since = nxt.time
            elif not self._paused and nxt.time - self._wait_since > self.spec.pause_threshold:
                self._paused = True
                extra.append(("pause", {"reason": "wait", "waited": nxt.time - self._wait_since}))
                logger.warning("Scenario %s: ego waiting for %.1f s", self.spec.name, nxt.time - self._wait_since)
        else:
            self._wait_since = None
            self._paused = False

        if nxt.time >= self.spec.duration_limit - 1e-9:
            self.finished = True
            logger.info("Scenario %s: duration limit reached", self.spec.name)
        return extra

    def _nearest(self, st: SimState, *, pedestrians: bool) -> Optional[float]:
        ego_fp = st.ego.footprint()
        agents = st.pedestrians if pedestrians else st.npcs
        best: Optional[float] = None
        for a in agents:
            if not a.active:
                continue
            d = footprint_distance(ego_fp, a.footprint())
            if best is None or d < best:
                best = d
        return best

    def _record(self, cmd: ControlCommand) -> None:
        st = self.state
        for ev in st.events[self._event_cursor:]:
            self.trace.append(ev.tick, ev.time, "event", {"kind": ev.kind, "data": dict(ev.data)})
        self._event_cursor = len(st.events)

        route = self.setup.route
        npc_gap = self._nearest(st, pedestrians=False)
        ped_gap = self._nearest(st, pedestrians=True)
        clearance = ped_gap if npc_gap is None else (npc_gap if ped_gap is None else min(npc_gap, ped_gap))
        self.trace.append(st.tick, st.time, "sample", {
            "cte": route.cross_track_error(st.ego.x, st.ego.y, self._hint),
            "clearance": clearance,
            "pedestrian_distance": ped_gap,
            "speed": st.ego.speed,
            "progress": self.progress,
        })
        if self.spec.trace_detail == "full":
            e = st.ego
            self.trace.append(st.tick, st.time, "ego", {
                "x": e.x, "y": e.y, "yaw": e.yaw, "speed": e.speed, "steering": e.steering,
                "cmd": [cmd.steering_target, cmd.accel, cmd.emergency_brake],
            })
            agents = [[a.id, a.vehicle.x, a.vehicle.y, a.vehicle.yaw, a.vehicle.speed] for a in st.npcs if a.active]
            agents += [[p.id, p.x, p.y, 0.0, p.speed] for p in st.pedestrians if p.active]
            if agents:
                self.trace.append(st.tick, st.time, "agents", {"agents": agents})

    # -- close -------------------------------------------------------------

    def close(
        self,
        out_dir: Optional[Path] = None,
        *,
        partial: bool = False,
        aborted: Optional[str] = None,
    ) -> ScenarioOutcome:
        st = self.state
        self.finished = True
        final_gap = self._nearest(st, pedestrians=False)
        self.trace.append(st.tick, st.time, "finish", {
            "completed": self.completed,
            "finish_time": self.finish_time,
            "ticks": st.tick,
            "final_gap": final_gap,
            "ego_final_speed": st.ego.speed,
            "partial": partial,
            "aborted": aborted,
        })
        metrics = metrics_from_trace(self.trace.records)
        digest = self.trace.close(metrics)
        trace_file = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            trace_file = str(self.trace.write(out_dir / "trace.jsonl"))
        outcome = ScenarioOutcome(
            scenario=self.spec.name,
            kind=self.spec.kind,
            seed=self.spec.seed,
            weather=self.setup.weather.condition,
            trace_file=trace_file,
            trace_hash=digest,
            **metrics,
        )
        if out_dir is not None:
            write_text_atomic(out_dir / "outcome.json", outcome.to_json())
        logger.info(
            "Scenario %s finished: completed=%s time=%s collisions=%d brakes=%d",
            self.spec.name, outcome.completed, outcome.finish_time, outcome.collision_count,
            outcome.emergency_brake_count,
        )
        return outcome


def run_scenario(
    spec: ScenarioSpec,
    *,
    settings: Optional[Settings] = None,
    base_dir: Optional[Path] = None,
    out_dir: Optional[Path] = None,
    ndt_map: Optional[NdtMap] = None,
    tracker: Optional[SpeedTracker] = None,
    controller: Optional[Controller] = None,
) -> ScenarioOutcome:
    """Run one scenario with the in-process ego stack (or the given controller) to completion or timeout."""
    session = ScenarioSession(spec, settings=settings, base_dir=base_dir, ndt_map=ndt_map, tracker=tracker)
    ctrl = controller or make_ego_controller(session.setup)
    while not session.finished:
        obs = session.observe()
        if tracker is not None:
            tracker.start(spec.name, obs.tick, "autonomy")
        result = ctrl.step(obs)
        if tracker is not None:
            tracker.stop()
        session.advance(result)
    return session.close(out_dir)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def measure_stopping_distance(
    weather: WeatherState, speed: float, *, dt: float = 0.02, params: VehicleParams = VehicleParams()
) -> float:
    """Distance covered under full braking from `speed` on a straight road."""
    if speed <= 0:
        raise ValueError("speed must be positive")
    v = VehicleState(0.0, 0.0, 0.0, speed, 0.0, params)
    brake = ControlCommand(emergency_brake=True)
    for _ in range(int(10.0 * speed / (params.max_brake * weather.friction_factor) / dt) + 10):
        v = bicycle_step(v, brake, weather, dt)
        if v.speed == 0.0:
            break
    return v.x

