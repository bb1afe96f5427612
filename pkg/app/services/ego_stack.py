"""
In-process autonomy chain for the ego shuttle:
localization -> perception -> guidance -> twist filter.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Literal, Mapping, Optional, Sequence

import numpy as np

from app.core.errors import OffRouteError
from app.core.geometry import Pose
from app.services.guidance import (
    CrosswalkAhead,
    Route,
    StopLineTracker,
    TwistLimits,
    VelocityLimits,
    lookahead_distance,
    pure_pursuit_steer,
    select_goal,
    speed_command,
    twist_filter,
    velocity_set,
)
from app.services.ndt_localization import NdtLocalizer
from app.services.perception_planning import (
    AvoidanceResult,
    BrakeConfig,
    Cluster,
    GridConfig,
    astar_check,
    brake_check,
    build_grid,
    cluster_points,
    clusters_from_footprints,
    nearest_in_corridor,
    path_window,
)
from app.services.sensors import GpsFix, OdometryDelta, PointCloud
from app.services.sim_engine import ControlCommand, VehicleParams
from app.services.traffic import ConflictZone, ObjectListMessage, PathZone, fuse_objects, zone_entries
from app.services.world_model import CrosswalkGeom, Footprint, StaticWorld


logger = logging.getLogger(__name__)


WINDOW_LENGTH = 30.0
CLUSTER_TOLERANCE = 0.8
ZONE_LOOKOUT = 30.0
ZONE_STANDOFF = 1.0

# Event kinds an ego controller may report; every other kind belongs to the simulator.
CONTROLLER_EVENT_KINDS = frozenset({"emergency_brake", "warning", "pause", "localization_lost"})


@dataclass(frozen=True, slots=True)
class CrosswalkStatus:
    index: int
    inside: bool  # a pedestrian is on the crosswalk
    waiting: bool  # a pedestrian waits at its curb


@dataclass(frozen=True, slots=True)
class TrafficRules:
    """Infrastructure state the shuttle is told about each tick."""

    granted: frozenset[int] = frozenset()
    occupied_zones: frozenset[int] = frozenset()  # held by a vehicle other than the ego
    crosswalks: tuple[CrosswalkStatus, ...] = ()


@dataclass(frozen=True, slots=True)
class EgoObservation:
    tick: int
    time: float
    speed: float
    pose: Optional[Pose] = None  # ground truth, only in ground-truth localization mode
    scan: Optional[PointCloud] = None
    odometry: Optional[OdometryDelta] = None
    gps: Optional[GpsFix] = None
    objects: Optional[ObjectListMessage] = None
    truth_agents: Optional[Sequence[tuple[int, Footprint]]] = None
    rules: TrafficRules = field(default_factory=TrafficRules)


@dataclass(frozen=True, slots=True)
class EgoStep:
    command: ControlCommand
    events: tuple[tuple[str, Mapping[str, Any]], ...] = ()
    diagnostics: Mapping[str, Any] = field(default_factory=dict)
    detections: tuple[tuple[Optional[int], tuple[float, float]], ...] = ()  # (agent id if known, world centroid)


@dataclass(frozen=True, slots=True)
class EgoConfig:
    params: VehicleParams = field(default_factory=VehicleParams)
    dt: float = 0.02
    friction_factor: float = 1.0
    perception: Literal["lidar", "ground_truth"] = "lidar"
    localization: Literal["ground_truth", "ndt"] = "ground_truth"
    on_lost: Literal["halt", "reseed"] = "reseed"
    lidar_mount: Pose = field(default_factory=Pose.identity)
    limits: VelocityLimits = VelocityLimits(stop_margin=0.5)
    brake: BrakeConfig = BrakeConfig()
    grid: GridConfig = GridConfig()
    plan_detours: bool = True


class PoseSource:
    """
    Ego pose per tick: the ground-truth pose, or an NDT tracker seeded and
    re-seeded from GPS (heading from the route when there is no previous estimate).
    """

    def __init__(
        self,
        route: Route,
        mode: Literal["ground_truth", "ndt"] = "ground_truth",
        *,
        on_lost: Literal["halt", "reseed"] = "reseed",
        localizer: Optional[NdtLocalizer] = None,
    ) -> None:
        if mode == "ndt" and localizer is None:
            raise ValueError("NDT localization needs a localizer")
        self.route = route
        self.mode = mode
        self.on_lost = on_lost
        self.localizer = localizer

    def _seed_from_gps(self, gps: Optional[GpsFix], fallback_yaw: Optional[float]) -> bool:
        if gps is None or not gps.valid or gps.position is None or self.localizer is None:
            return False
        x, y = gps.position
        yaw = fallback_yaw if fallback_yaw is not None else self.route.heading_at(self.route.locate(x, y).s)
        self.localizer.seed(Pose(x, y, yaw))
        return True

    def update(self, obs: EgoObservation, events: list) -> Optional[Pose]:
        """Pose for this tick, or None while not localized; appends a `localization_lost` event on loss."""
        if self.mode == "ground_truth":
            return obs.pose
        loc = self.localizer
        assert loc is not None
        last_yaw = loc.pose.yaw if loc.pose is not None else None
        if obs.odometry is not None:
            loc.on_odometry(obs.odometry)
        if loc.lost and (loc.estimate is None or self.on_lost == "reseed"):
            self._seed_from_gps(obs.gps, last_yaw)
        if obs.scan is not None and not loc.lost:
            update = loc.on_scan(obs.scan)
            if update.lost:
                events.append(("localization_lost", {"reason": update.reason}))
                if self.on_lost == "reseed" and self._seed_from_gps(obs.gps, last_yaw):
                    return loc.pose
                return None
        return None if loc.lost else loc.pose


class EgoController:
    """
    One instance per run. `step` turns an observation into a control command;
    all internal state (held clusters, stop-line phases, localizer) advances
    with it, so the same observation sequence always yields the same commands.
    """

    def __init__(
        self,
        route: Route,
        world: StaticWorld,
        *,
        config: EgoConfig = EgoConfig(),
        zones: Sequence[ConflictZone] = (),
        intersections: Optional[dict[int, tuple[float, float]]] = None,
        localizer: Optional[NdtLocalizer] = None,
    ) -> None:
        self.route = route
        self.world = world
        self.config = config
        self.pose_source = PoseSource(route, config.localization, on_lost=config.on_lost, localizer=localizer)
        self.stop_lines = StopLineTracker(route, world.stop_lines, intersections=intersections)
        self._twist = TwistLimits.for_vehicle(config.params, config.dt)
        self._zones: list[PathZone] = zone_entries(route, zones, half_width=config.params.width / 2.0)
        self._crosswalks = self._crosswalks_on_route(world.crosswalks)
        self._prev_cmd = ControlCommand()
        self._hint: Optional[float] = None
        self.progress = 0.0
        self._held: list[tuple[Cluster, np.ndarray]] = []  # clusters with their world-frame points
        self._braking = False
        self._off_route = False
        self.avoidance: Optional[AvoidanceResult] = None

    def _crosswalks_on_route(self, crosswalks: Sequence[CrosswalkGeom]) -> list[tuple[int, float, CrosswalkGeom]]:
        out = []
        for k, cw in enumerate(crosswalks):
            proj = self.route.locate(*cw.position)
            if proj.distance <= cw.half_span:
                out.append((k, proj.s, cw))
        return out

    # -- perception --------------------------------------------------------

    def _perceive(self, obs: EgoObservation, pose: Pose) -> list[Cluster]:
        cfg = self.config
        if cfg.perception == "ground_truth":
            clusters = clusters_from_footprints(obs.truth_agents or (), pose)
        else:
            if obs.scan is not None:
                ego_pts = cfg.lidar_mount.transform_points(obs.scan.points)
                found = cluster_points(ego_pts, CLUSTER_TOLERANCE)
                self._held = [(c, pose.transform_points(c.points)) for c in found]
            clusters = []
            for c, world_pts in self._held:
                local = pose.inverse_transform_points(world_pts)
                cen = local.mean(axis=0)
                clusters.append(Cluster(
                    id=c.id, points=local, centroid=(float(cen[0]), float(cen[1])), radius=c.radius,
                    indices=c.indices, source=c.source, agent_id=c.agent_id,
                ))
        return fuse_objects(clusters, obs.objects, pose)

    # -- main step ---------------------------------------------------------

    def step(self, obs: EgoObservation) -> EgoStep:
        cfg = self.config
        params = cfg.params
        events: list[tuple[str, Mapping[str, Any]]] = []
        pose = self.pose_source.update(obs, events)
        if pose is None:
            return self._stop(obs, events, {"localized": False})

        near = self.route.locate(pose.x, pose.y, self._hint)
        if self._hint is not None:
            delta = near.s - self._hint
            if self.route.cyclic and delta < -0.5 * self.route.length:
                delta += self.route.length
            elif self.route.cyclic and delta > 0.5 * self.route.length:
                delta -= self.route.length
            self.progress += max(delta, 0.0)
        else:
            self.progress = near.s
        self._hint = near.s
        front = self.progress + params.front_overhang

        try:
            goal = select_goal(self.route, pose, lookahead_distance(obs.speed), hint=near.s)
        except OffRouteError as e:
            if not self._off_route:
                events.append(("pause", {"reason": "off_route", "offset": e.offset}))
                logger.warning("Ego off route: %s", e)
            self._off_route = True
            return self._stop(obs, events, {"localized": True, "off_route": True})
        self._off_route = False
        steer = pure_pursuit_steer(goal, params.wheelbase, params.steering_limit)

        clusters = self._perceive(obs, pose)
        window = path_window(self.route.polyline, pose, near.s, WINDOW_LENGTH, cyclic=self.route.cyclic)
        _, gap = nearest_in_corridor(clusters, window, cfg.brake.corridor_half_width, cfg.brake.front_overhang)
        decision = brake_check(clusters, obs.speed, window, params.max_brake * cfg.friction_factor, cfg.brake)

        if cfg.plan_detours and obs.scan is not None and gap is not None and cfg.perception == "lidar":
            grid = build_grid(obs.scan, clusters, cfg.grid, sensor_pose=cfg.lidar_mount)
            self.avoidance = astar_check(grid, window)

        crosswalks = self._crosswalks_ahead(obs, front)

        stop_events = self.stop_lines.update(
            front, obs.speed, obs.time, lambda e: e.intersection_id is None or e.intersection_id in obs.rules.granted
        )
        stop_distances = list(self.stop_lines.active_distances(front))
        stop_distances += self._zone_waits(obs, front)

        remaining = None
        if not self.route.cyclic:
            remaining = self.route.length - self.progress
        target = velocity_set(
            self.route, pose, hint=near.s, stop_distances=stop_distances, crosswalks=crosswalks,
            obstacle_distance=gap, end_distance=remaining, limits=cfg.limits,
        )
        raw = ControlCommand(steer, speed_command(target, obs.speed), emergency_brake=decision.engage)
        cmd = twist_filter(raw, self._prev_cmd, self._twist)
        self._prev_cmd = cmd

        if decision.engage and not self._braking:
            data = {"gap": decision.distance, "ttc": decision.time_to_collision, "trigger": decision.trigger}
            events.append(("emergency_brake", data))
            events.append(("warning", {"message": "Emergency stop, hold on", **data}))
            logger.info("Emergency brake at t=%.2f: gap %.2f m", obs.time, decision.distance or 0.0)
        self._braking = decision.engage

        detections = tuple(
            (c.agent_id, pose.to_global(*c.centroid)) for c in clusters
        )
        diagnostics = {
            "localized": True,
            "pose": pose.as_tuple(),
            "progress": self.progress,
            "target_speed": target,
            "gap": gap,
            "ttc": decision.time_to_collision,
            "clusters": len(clusters),
            "stop_events": [ev.kind for ev in stop_events],
            "avoidance": self.avoidance.status if self.avoidance is not None and obs.scan is not None else None,
        }
        return EgoStep(command=cmd, events=tuple(events), diagnostics=diagnostics, detections=detections)

    def _stop(self, obs: EgoObservation, events: list, diagnostics: dict[str, Any]) -> EgoStep:
        raw = ControlCommand(self._prev_cmd.steering_target, speed_command(0.0, obs.speed))
        cmd = twist_filter(raw, self._prev_cmd, self._twist)
        self._prev_cmd = cmd
        return EgoStep(command=cmd, events=tuple(events), diagnostics=diagnostics)

    def _crosswalks_ahead(self, obs: EgoObservation, front: float) -> list[CrosswalkAhead]:
        status = {c.index: c for c in obs.rules.crosswalks}
        limits = self.config.limits
        out = []
        for index, s, cw in self._crosswalks:
            d = self._ahead(s - cw.width / 2.0, front)
            if d is None or d < 0.0:
                continue
            st = status.get(index)
            if st is None:
                continue
            occupied = st.inside
            if st.waiting and not occupied:
                # yield to a waiting pedestrian only while a comfortable stop is still possible
                needed = obs.speed * obs.speed / (2.0 * limits.comfort_decel)
                occupied = d - limits.crosswalk_standoff >= needed
            out.append(CrosswalkAhead(distance=d, occupied=occupied))
        return out

    def _zone_waits(self, obs: EgoObservation, front: float) -> list[float]:
        out = []
        for z in self._zones:
            if z.intersection_id not in obs.rules.occupied_zones:
                continue
            d = self._ahead(z.s_entry, front)
            if d is not None and 0.0 < d <= ZONE_LOOKOUT:
                out.append(d - ZONE_STANDOFF)
        return out

    def _ahead(self, s: float, front: float) -> Optional[float]:
        """Distance from the front bumper to route arclength `s` (next occurrence on cyclic routes)."""
        if not self.route.cyclic:
            return s - front
        L = self.route.length
        d = (s - front) % L
        return d if d <= 0.5 * L else d - L
