"""
File and wire schemas. Every document carries `format_version`; JSON is
written canonically so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from app.core.errors import FormatError
from app.services.guidance import Route, Waypoint
from app.services.map_ingest import (
    Building,
    Crosswalk,
    Intersection,
    Projection,
    RoadNetwork,
    Segment,
    StopLine,
    ValidationIssue,
)
from app.services.ndt_localization import NdtMap, make_cell


logger = logging.getLogger(__name__)


FORMAT_VERSION = 1

Point2 = tuple[float, float]


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False) + "\n"


class _Document(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    format_version: Literal[1] = FORMAT_VERSION

    def to_json(self) -> str:
        return canonical_json(self.model_dump(mode="json"))


def _load(model: type[_Document], text: str | bytes) -> Any:
    try:
        return model.model_validate_json(text)
    except ValidationError as e:
        raise FormatError(f"Invalid {model.__name__}: {e.errors()[0]['msg']} at {e.errors()[0]['loc']}") from e


# ---------------------------------------------------------------------------
# Road network
# ---------------------------------------------------------------------------


class SegmentModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    id: int
    centerline: tuple[Point2, ...]
    lane_count: int = Field(ge=1)
    speed_limit: float = Field(gt=0)
    oneway: bool = False
    highway: str = "residential"
    node_ids: tuple[int, ...] = ()
    node_arclengths: tuple[float, ...] = ()
    intersection_ids: tuple[int, ...] = ()
    roundabout: bool = False
    tags: dict[str, str] = Field(default_factory=dict)


class IntersectionModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    id: int
    position: Point2
    segment_ids: tuple[int, ...]
    control: Literal["none", "stop_sign", "circle"] = "none"
    radius: float = 0.0
    node_ids: tuple[int, ...] = ()


class StopLineModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    segment_id: int
    arclength: float
    node_id: int = 0
    direction: Optional[Literal[-1, 1]] = None
    intersection_id: Optional[int] = None


class CrosswalkModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    segment_id: int
    arclength: float
    width: float
    node_id: int = 0


class BuildingModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    id: int
    polygon: tuple[Point2, ...]


class IssueModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: str
    subject_id: int
    message: str


class NetworkDocument(_Document):
    projection: tuple[float, float, float]  # ref_lat, ref_lon, earth_radius
    bounds: tuple[float, float, float, float]
    segments: tuple[SegmentModel, ...]
    intersections: tuple[IntersectionModel, ...] = ()
    stop_lines: tuple[StopLineModel, ...] = ()
    crosswalks: tuple[CrosswalkModel, ...] = ()
    buildings: tuple[BuildingModel, ...] = ()
    ingest_issues: tuple[IssueModel, ...] = ()

    @classmethod
    def from_network(cls, net: RoadNetwork) -> NetworkDocument:
        p = net.projection
        return cls(
            projection=(p.ref_lat, p.ref_lon, p.earth_radius),
            bounds=net.bounds,
            segments=tuple(
                SegmentModel(
                    id=s.id,
                    centerline=s.centerline,
                    lane_count=s.lane_count,
                    speed_limit=s.speed_limit,
                    oneway=s.oneway,
                    highway=s.highway,
                    node_ids=s.node_ids,
                    node_arclengths=s.node_arclengths,
                    intersection_ids=s.intersection_ids,
                    roundabout=s.roundabout,
                    tags=dict(s.tags),
                )
                for s in net.segments
            ),
            intersections=tuple(
                IntersectionModel(
                    id=i.id, position=i.position, segment_ids=i.segment_ids, control=i.control,
                    radius=i.radius, node_ids=i.node_ids,
                )
                for i in net.intersections
            ),
            stop_lines=tuple(
                StopLineModel(
                    segment_id=s.segment_id, arclength=s.arclength, node_id=s.node_id,
                    direction=s.direction, intersection_id=s.intersection_id,
                )
                for s in net.stop_lines
            ),
            crosswalks=tuple(
                CrosswalkModel(segment_id=c.segment_id, arclength=c.arclength, width=c.width, node_id=c.node_id)
                for c in net.crosswalks
            ),
            buildings=tuple(BuildingModel(id=b.id, polygon=b.polygon) for b in net.buildings),
            ingest_issues=tuple(
                IssueModel(kind=i.kind, subject_id=i.subject_id, message=i.message) for i in net.ingest_issues
            ),
        )

    def to_network(self) -> RoadNetwork:
        lat, lon, radius = self.projection
        return RoadNetwork(
            segments=tuple(Segment(**s.model_dump()) for s in self.segments),
            intersections=tuple(Intersection(**i.model_dump()) for i in self.intersections),
            stop_lines=tuple(StopLine(**s.model_dump()) for s in self.stop_lines),
            crosswalks=tuple(Crosswalk(**c.model_dump()) for c in self.crosswalks),
            buildings=tuple(Building(**b.model_dump()) for b in self.buildings),
            bounds=self.bounds,
            projection=Projection(lat, lon, radius),
            ingest_issues=tuple(ValidationIssue(**i.model_dump()) for i in self.ingest_issues),
        )


def network_to_json(net: RoadNetwork) -> str:
    return NetworkDocument.from_network(net).to_json()


def network_from_json(text: str | bytes) -> RoadNetwork:
    return _load(NetworkDocument, text).to_network()


# ---------------------------------------------------------------------------
# Route CSV
# ---------------------------------------------------------------------------


ROUTE_HEADER = ("x", "y", "yaw", "speed")


def route_to_csv(route: Route) -> str:
    buf = io.StringIO()
    buf.write(f"# format_version: {FORMAT_VERSION}, cyclic: {str(route.cyclic).lower()}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROUTE_HEADER)
    for w in route.waypoints:
        writer.writerow([repr(float(w.x)), repr(float(w.y)), repr(float(w.yaw)), repr(float(w.speed))])
    return buf.getvalue()


def route_from_csv(text: str) -> Route:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise FormatError("Route CSV is missing its '# format_version' line")
    meta: dict[str, str] = {}
    for part in lines[0].lstrip("#").split(","):
        key, _, value = part.partition(":")
        meta[key.strip()] = value.strip()
    if meta.get("format_version") != str(FORMAT_VERSION):
        raise FormatError(f"Unsupported route format_version {meta.get('format_version')!r}")
    reader = csv.reader(lines[1:])
    header = next(reader, None)
    if header is None or tuple(header) != ROUTE_HEADER:
        raise FormatError(f"Route CSV header must be {','.join(ROUTE_HEADER)}")
    waypoints = []
    for n, row in enumerate(reader, start=3):
        if not row:
            continue
        try:
            x, y, yaw, speed = (float(v) for v in row)
        except ValueError as e:
            raise FormatError(f"Bad route row at line {n}: {row}") from e
        waypoints.append(Waypoint(x, y, yaw, speed))
    return Route(waypoints, cyclic=meta.get("cyclic") == "true")


# ---------------------------------------------------------------------------
# NDT map
# ---------------------------------------------------------------------------


class NdtCellModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    i: int
    j: int
    count: int = Field(ge=1)
    mean: Point2
    covariance: tuple[float, float, float]  # raw xx, xy, yy


class NdtMapDocument(_Document):
    cell_size: float = Field(gt=0)
    origin: Point2 = (0.0, 0.0)
    min_points: int = Field(ge=1)
    cells: tuple[NdtCellModel, ...]

    @classmethod
    def from_map(cls, ndt: NdtMap) -> NdtMapDocument:
        cells = []
        for (i, j), cell in sorted(ndt.cells.items()):
            cov = cell.raw_covariance
            cells.append(NdtCellModel(
                i=i, j=j, count=cell.count,
                mean=(float(cell.mean[0]), float(cell.mean[1])),
                covariance=(float(cov[0, 0]), float(cov[0, 1]), float(cov[1, 1])),
            ))
        return cls(cell_size=ndt.cell_size, origin=ndt.origin, min_points=ndt.min_points, cells=tuple(cells))

    def to_map(self) -> NdtMap:
        cells = {}
        for c in self.cells:
            xx, xy, yy = c.covariance
            cells[(c.i, c.j)] = make_cell(c.count, np.array(c.mean), np.array([[xx, xy], [xy, yy]]), self.cell_size)
        return NdtMap(self.cell_size, cells, origin=self.origin, min_points=self.min_points)


def ndt_map_to_json(ndt: NdtMap) -> str:
    return NdtMapDocument.from_map(ndt).to_json()


def ndt_map_from_json(text: str | bytes) -> NdtMap:
    return _load(NdtMapDocument, text).to_map()


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------


ScenarioKind = Literal[
    "intersection", "traffic_circle", "pedestrian_crossing", "stopped_obstacle", "slow_fleet", "weather", "free_run"
]


class _Part(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LaneRefModel(_Part):
    """A drivable slice of one lane; `s_from > s_to` wraps around a closed ring."""

    segment: int
    direction: Literal[-1, 1] = 1
    lane: int = Field(default=0, ge=0)
    s_from: float = 0.0
    s_to: Optional[float] = None


class Range(_Part):
    low: float
    high: float

    @field_validator("high")
    @classmethod
    def _ordered(cls, v: float, info: Any) -> float:
        if v < info.data.get("low", v):
            raise ValueError("high must be >= low")
        return v


class RouteSpec(_Part):
    lanes: tuple[LaneRefModel, ...] = ()
    file: Optional[str] = None  # route CSV, relative to the scenario document
    cruise_speed: float = Field(default=5.0, gt=0)
    cyclic: bool = False
    laps: int = Field(default=1, ge=1)


class NpcSpawnSpec(_Part):
    lanes: tuple[LaneRefModel, ...]
    count: int = Field(default=1, ge=0)
    entry_time: Range = Range(low=0.0, high=0.0)
    speed: Range = Range(low=4.0, high=6.0)
    erratic_count: int = Field(default=0, ge=0)
    headway: float = Field(default=0.0, ge=0)  # extra spacing in time between draws of one spawn group


class PedestrianSpawnSpec(_Part):
    crosswalk: int = 0  # index into the world's crosswalks
    count: int = Field(default=1, ge=0)
    entry_time: Range = Range(low=0.0, high=10.0)
    walk_speed: Range = Range(low=1.0, high=1.5)
    patience: Range = Range(low=3.0, high=5.0)


class ObstacleSpec(_Part):
    lane: LaneRefModel
    s: float  # rear-axle arclength along the lane slice
    reveal_gap: float = Field(default=4.0, ge=0)


class WeatherSpec(_Part):
    condition: Literal["clear", "rain", "fog"] = "clear"
    friction_factor: Optional[float] = None
    sensor_noise_scale: Optional[float] = None
    sensor_dropout_prob: Optional[float] = None
    speed_factor: Optional[float] = None


class SmartCircleSpec(_Part):
    enabled: bool = False
    center: Optional[Point2] = None
    radius: Optional[float] = None
    broadcast_interval_ticks: int = Field(default=5, ge=1)


class LidarSpec(_Part):
    beam_count: int = Field(default=360, ge=1)
    max_range: float = Field(default=50.0, gt=0)
    range_noise_sigma: float = Field(default=0.02, ge=0)
    period_ticks: Optional[int] = Field(default=None, ge=1)  # None: TESTBED_LIDAR_PERIOD_TICKS
    mount: tuple[float, float, float] = (1.5, 0.0, 0.0)


class LocalizationSpec(_Part):
    mode: Literal["ground_truth", "ndt"] = "ground_truth"
    gps_noise_sigma: float = Field(default=0.5, ge=0)
    denial_zones: tuple[tuple[Point2, ...], ...] = ()
    odometry_translation_frac: float = Field(default=0.01, ge=0)
    odometry_yaw_sigma: float = Field(default=0.001, ge=0)
    on_lost: Literal["halt", "reseed"] = "reseed"
    downsample_radius: float = Field(default=0.3, ge=0)
    map_file: Optional[str] = None


class ScenarioSpec(_Document):
    name: str
    kind: ScenarioKind
    map: str  # built-in map name or path to an OSM / network JSON file
    route: RouteSpec
    seed: int = 0
    duration_limit: float = Field(default=120.0, gt=0)
    dt: float = Field(default=0.02, gt=0)
    npc_spawns: tuple[NpcSpawnSpec, ...] = ()
    pedestrian_spawns: tuple[PedestrianSpawnSpec, ...] = ()
    obstacle: Optional[ObstacleSpec] = None
    weather: WeatherSpec = WeatherSpec()
    smart_circle: SmartCircleSpec = SmartCircleSpec()
    lidar: LidarSpec = LidarSpec()
    perception: Literal["lidar", "ground_truth"] = "lidar"
    localization: LocalizationSpec = LocalizationSpec()
    ego_start_delay: float = Field(default=0.0, ge=0)
    pause_threshold: float = Field(default=30.0, gt=0)
    conflict_radius: Optional[float] = None
    trace_detail: Literal["events", "full"] = "full"


def scenario_from_json(text: str | bytes) -> ScenarioSpec:
    return _load(ScenarioSpec, text)


def load_scenario(path: str | Path) -> ScenarioSpec:
    return scenario_from_json(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Outcome, trace, bridge
# ---------------------------------------------------------------------------


class ScenarioOutcome(_Document):
    scenario: str
    kind: ScenarioKind
    seed: int
    weather: str
    completed: bool
    finish_time: Optional[float] = None  # None on timeout or abort
    ticks: int
    max_cross_track_error: float
    min_clearance: Optional[float] = None  # None when nothing was ever seen
    collision_count: int
    emergency_brake_count: int
    pause_event_count: int
    localization_loss_count: int
    priority_violation_count: int = 0
    zone_co_occupancy_count: int = 0
    stop_line_stop_count: int = 0
    stop_line_violation_count: int = 0
    min_pedestrian_distance: Optional[float] = None
    final_gap: Optional[float] = None
    ego_final_speed: float = 0.0
    first_detection: dict[str, float] = Field(default_factory=dict)
    partial: bool = False
    aborted: Optional[str] = None
    trace_file: Optional[str] = None
    trace_hash: Optional[str] = None


class TraceRecord(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    tick: int = Field(ge=0)
    time: float
    topic: str
    payload: dict[str, Any]

    def to_line(self) -> str:
        return canonical_json(self.model_dump(mode="json"))


class BridgeMessage(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    topic: str
    seq: int = Field(ge=0)
    stamp: float
    data: dict[str, Any] = Field(default_factory=dict)

    def to_line(self) -> bytes:
        return canonical_json(self.model_dump(mode="json")).encode("utf-8")
