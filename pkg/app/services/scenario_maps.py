"""
Built-in test maps and the scenario catalog.

Maps are written as OSM XML and go through the same ingest path as real
extracts, so every scenario exercises parsing, projection and compilation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Final, Optional, Sequence

from lxml import etree

from app.core.errors import FormatError, TestbedError
from app.services.formats import (
    LaneRefModel,
    LocalizationSpec,
    NpcSpawnSpec,
    ObstacleSpec,
    PedestrianSpawnSpec,
    Range,
    RouteSpec,
    ScenarioKind,
    ScenarioSpec,
    SmartCircleSpec,
    WeatherSpec,
    network_from_json,
)
from app.services.map_ingest import Projection, RoadNetwork, ingest_osm, unproject
from app.services.traffic import ConflictZone
from app.services.world_model import LanePath, StaticWorld, compile_world


logger = logging.getLogger(__name__)


REFERENCE: Final[tuple[float, float]] = (39.9906, -82.9866)  # Linden, Columbus OH
MAP_HALF_EXTENT: Final[float] = 120.0

STOP_ZONE_RADIUS: Final[float] = 6.0
CIRCLE_ZONE_RADIUS: Final[float] = 17.5
SMART_CIRCLE_RADIUS: Final[float] = 40.0

RING_RADIUS: Final[float] = 15.0
RING_STEP_DEG: Final[int] = 10


class _OsmWriter:
    """Builds an OSM XML extract from metric coordinates around the reference point."""

    def __init__(self, ref: tuple[float, float] = REFERENCE) -> None:
        self.proj = Projection(*ref)
        self.root = etree.Element("osm", version="0.6", generator="testbed")
        lat0, lon0 = unproject(-MAP_HALF_EXTENT, -MAP_HALF_EXTENT, self.proj)
        lat1, lon1 = unproject(MAP_HALF_EXTENT, MAP_HALF_EXTENT, self.proj)
        etree.SubElement(
            self.root, "bounds", minlat=repr(lat0), minlon=repr(lon0), maxlat=repr(lat1), maxlon=repr(lon1)
        )
        self._nodes: list[Any] = []
        self._ways: list[Any] = []
        self._next_node = 1

    def node(self, x: float, y: float, **tags: str) -> int:
        lat, lon = unproject(x, y, self.proj)
        nid = self._next_node
        self._next_node += 1
        el = etree.Element("node", id=str(nid), lat=repr(lat), lon=repr(lon))
        for k, v in sorted(tags.items()):
            etree.SubElement(el, "tag", k=k, v=v)
        self._nodes.append(el)
        return nid

    def way(self, way_id: int, refs: Sequence[int], **tags: str) -> None:
        el = etree.Element("way", id=str(way_id))
        for r in refs:
            etree.SubElement(el, "nd", ref=str(r))
        for k, v in sorted(tags.items()):
            etree.SubElement(el, "tag", k=k, v=v)
        self._ways.append(el)

    def building(self, way_id: int, corners: Sequence[tuple[float, float]]) -> None:
        refs = [self.node(x, y) for x, y in corners]
        self.way(way_id, refs + [refs[0]], building="yes")

    def tostring(self) -> bytes:
        for el in self._nodes + self._ways:
            self.root.append(el)
        return etree.tostring(self.root, xml_declaration=True, encoding="UTF-8", pretty_print=True)


def _mirror(corners: Sequence[tuple[float, float]], sx: int, sy: int) -> list[tuple[float, float]]:
    pts = [(sx * x, sy * y) for x, y in corners]
    return pts if sx * sy > 0 else list(reversed(pts))


def corridor_osm() -> bytes:
    """Straight two-lane street with a mid-block crosswalk, lined by buildings."""
    w = _OsmWriter()
    refs = []
    for x in (-100.0, -50.0, 0.0, 40.0, 100.0):
        tags = {"highway": "crossing", "width": "3.0"} if x == 40.0 else {}
        refs.append(w.node(x, 0.0, **tags))
    w.way(100, refs, highway="residential", lanes="2", maxspeed="25 mph", name="Linden Corridor")
    bid = 1000
    for x0, x1 in ((-95.0, -55.0), (-45.0, 25.0), (55.0, 95.0)):
        for sy in (1, -1):
            w.building(bid, _mirror([(x0, 8.0), (x1, 8.0), (x1, 20.0), (x0, 20.0)], 1, sy))
            bid += 1
    return w.tostring()


def four_way_osm() -> bytes:
    """All-way stop: an east-west and a north-south street with stop signs on every approach."""
    w = _OsmWriter()
    centre = w.node(0.0, 0.0)
    ew = [
        w.node(-100.0, 0.0),
        w.node(-50.0, 0.0),
        w.node(-8.0, 0.0, highway="stop", direction="forward"),
        centre,
        w.node(8.0, 0.0, highway="stop", direction="backward"),
        w.node(50.0, 0.0),
        w.node(100.0, 0.0),
    ]
    w.way(100, ew, highway="residential", lanes="2", maxspeed="25 mph")
    ns = [
        w.node(0.0, 100.0),
        w.node(0.0, 50.0),
        w.node(0.0, 8.0, highway="stop", direction="forward"),
        centre,
        w.node(0.0, -8.0, highway="stop", direction="backward"),
        w.node(0.0, -50.0),
        w.node(0.0, -100.0),
    ]
    w.way(101, ns, highway="residential", lanes="2", maxspeed="25 mph")
    bid = 1000
    for sx in (1, -1):
        for sy in (1, -1):
            w.building(bid, _mirror([(12.0, 12.0), (60.0, 12.0), (60.0, 60.0), (12.0, 60.0)], sx, sy))
            bid += 1
    return w.tostring()


def circle_osm() -> bytes:
    """Single-lane roundabout with four two-lane approaches and stop signs on entry."""
    w = _OsmWriter()
    ring = [
        w.node(RING_RADIUS * math.cos(math.radians(a)), RING_RADIUS * math.sin(math.radians(a)))
        for a in range(0, 360, RING_STEP_DEG)
    ]
    w.way(200, ring + [ring[0]], highway="residential", junction="roundabout", oneway="yes", lanes="1",
          maxspeed="15 mph")
    step = 360 // RING_STEP_DEG
    for way_id, k, (ux, uy) in ((201, 0, (1, 0)), (202, step // 4, (0, 1)), (203, step // 2, (-1, 0)),
                                (204, 3 * step // 4, (0, -1))):
        refs = [ring[k]]
        refs.append(w.node(19.0 * ux, 19.0 * uy, highway="stop", direction="backward"))
        refs += [w.node(d * ux, d * uy) for d in (60.0, 100.0)]
        w.way(way_id, refs, highway="residential", lanes="2", maxspeed="25 mph")
    bid = 1000
    quadrant = [(70.0, 6.0), (19.0, 6.0), (6.0, 19.0), (6.0, 70.0), (70.0, 70.0)]
    for sx in (1, -1):
        for sy in (1, -1):
            w.building(bid, _mirror(quadrant, sx, sy))
            bid += 1
    return w.tostring()


BUILTIN_MAPS: Final[dict[str, Callable[[], bytes]]] = {
    "corridor": corridor_osm,
    "four_way": four_way_osm,
    "circle": circle_osm,
}


@dataclass(frozen=True, slots=True)
class MapBundle:
    name: str
    network: RoadNetwork
    world: StaticWorld
    zones: tuple[ConflictZone, ...]
    smart_circle: Optional[tuple[tuple[float, float], float]] = None

    def zone(self, intersection_id: int) -> Optional[ConflictZone]:
        for z in self.zones:
            if z.intersection_id == intersection_id:
                return z
        return None


def conflict_zones(net: RoadNetwork, radius: Optional[float] = None) -> tuple[ConflictZone, ...]:
    zones = []
    for inter in net.intersections:
        if inter.control == "stop_sign":
            zones.append(ConflictZone(inter.id, inter.position, radius or STOP_ZONE_RADIUS, inter.control))
        elif inter.control == "circle":
            zones.append(ConflictZone(inter.id, inter.position, radius or max(CIRCLE_ZONE_RADIUS, inter.radius + 2.5),
                                      inter.control))
    return tuple(zones)


def _bundle(name: str, net: RoadNetwork, lane_width: float, conflict_radius: Optional[float]) -> MapBundle:
    world = compile_world(net, lane_width=lane_width)
    zones = conflict_zones(net, conflict_radius)
    circles = [z for z in zones if z.control == "circle"]
    smart = (circles[0].center, SMART_CIRCLE_RADIUS) if circles else None
    return MapBundle(name=name, network=net, world=world, zones=zones, smart_circle=smart)


@lru_cache(maxsize=16)
def load_map(name: str, *, lane_width: float = 3.5, conflict_radius: Optional[float] = None) -> MapBundle:
    """Built-in map by name, or an OSM / network JSON file by path."""
    if name in BUILTIN_MAPS:
        net, issues = ingest_osm(BUILTIN_MAPS[name]())
        if issues:
            raise TestbedError(f"Built-in map {name} failed validation: {issues[0].message}")
        return _bundle(name, net, lane_width, conflict_radius)
    path = Path(name)
    if not path.exists():
        raise FormatError(f"Unknown map {name!r}: not a built-in map and no such file")
    if path.suffix == ".json":
        net = network_from_json(path.read_bytes())
    else:
        net, issues = ingest_osm(path.read_bytes())
        for issue in issues:
            logger.warning("Map %s: %s", path.name, issue.message)
    return _bundle(path.stem, net, lane_width, conflict_radius)


# ---------------------------------------------------------------------------
# Lane references
# ---------------------------------------------------------------------------


def lane_slice(world: StaticWorld, ref: LaneRefModel) -> LanePath:
    candidates = world.lane_paths_for(ref.segment, ref.direction)
    if ref.lane >= len(candidates):
        raise FormatError(f"Segment {ref.segment} has no lane {ref.lane} in direction {ref.direction}")
    path = candidates[ref.lane]
    s_to = path.length if ref.s_to is None else ref.s_to
    if ref.s_from > s_to:
        # wrap around a closed ring
        head = path.slice(ref.s_from, path.length)
        tail = path.slice(0.0, s_to)
        return LanePath.concat([head, tail], speed_limit=path.speed_limit)
    return path.slice(ref.s_from, s_to)


def lane_route_path(world: StaticWorld, refs: Sequence[LaneRefModel]) -> LanePath:
    if not refs:
        raise FormatError("A route needs at least one lane reference")
    parts = [lane_slice(world, r) for r in refs]
    return parts[0] if len(parts) == 1 else LanePath.concat(parts)


def ring_arclength(angle_deg: float) -> float:
    """Arclength along the built-in ring (CCW from angle 0) at a multiple of the node spacing."""
    k = angle_deg / RING_STEP_DEG
    return k * 2.0 * RING_RADIUS * math.sin(math.radians(RING_STEP_DEG / 2.0))


# Inbound lanes travel against the approach way (which points away from the centre).
def _circle_pass(entry_way: int, entry_angle: float, exit_way: int, exit_angle: float) -> tuple[LaneRefModel, ...]:
    s_from = ring_arclength(entry_angle + RING_STEP_DEG)
    s_to = ring_arclength((exit_angle - RING_STEP_DEG) % 360)
    return (
        LaneRefModel(segment=entry_way, direction=-1, s_from=0.0, s_to=83.0),
        LaneRefModel(segment=200, direction=1, s_from=s_from, s_to=s_to),
        LaneRefModel(segment=exit_way, direction=1, s_from=2.0),
    )


EGO_CIRCLE_ROUTE: Final = _circle_pass(201, 0.0, 203, 180.0)
EGO_FOUR_WAY_ROUTE: Final = (LaneRefModel(segment=100, direction=1, s_from=10.0, s_to=190.0),)
EGO_CORRIDOR_ROUTE: Final = (LaneRefModel(segment=100, direction=1, s_from=10.0, s_to=190.0),)


# ---------------------------------------------------------------------------
# Scenario catalog
# ---------------------------------------------------------------------------


def _base(kind: ScenarioKind, map_name: str, lanes: Sequence[LaneRefModel], seed: int, **kw: Any) -> ScenarioSpec:
    cruise = kw.pop("cruise_speed", 5.0)
    return ScenarioSpec(
        name=kw.pop("name", f"{kind}-{seed}"),
        kind=kind,
        map=map_name,
        route=RouteSpec(lanes=tuple(lanes), cruise_speed=cruise),
        seed=seed,
        **kw,
    )


def through_traffic(count: int, *, erratic: int = 0) -> tuple[NpcSpawnSpec, ...]:
    """North-south traffic across the all-way stop, split between both directions."""
    if count <= 0:
        return ()
    south = (count + 1) // 2
    north = count - south
    spawns = [NpcSpawnSpec(
        lanes=(LaneRefModel(segment=101, direction=1, s_from=5.0, s_to=195.0),),
        count=south, entry_time=Range(low=0.0, high=20.0), speed=Range(low=4.0, high=6.0),
        erratic_count=min(erratic, south),
    )]
    if north:
        spawns.append(NpcSpawnSpec(
            lanes=(LaneRefModel(segment=101, direction=-1, s_from=5.0, s_to=195.0),),
            count=north, entry_time=Range(low=0.0, high=20.0), speed=Range(low=4.0, high=6.0),
            erratic_count=max(0, erratic - south),
        ))
    return tuple(spawns)


def circle_traffic(count: int = 3, *, erratic: int = 0) -> tuple[NpcSpawnSpec, ...]:
    """Vehicles entering the circle from the north and south approaches."""
    north = _circle_pass(202, 90.0, 204, 270.0)
    south = _circle_pass(204, 270.0, 201, 360.0)
    first = (count + 1) // 2
    return (
        NpcSpawnSpec(lanes=north, count=first, entry_time=Range(low=0.0, high=12.0),
                     speed=Range(low=4.0, high=5.5), erratic_count=min(erratic, first)),
        NpcSpawnSpec(lanes=south, count=count - first, entry_time=Range(low=0.0, high=12.0),
                     speed=Range(low=4.0, high=5.5), erratic_count=max(0, erratic - first)),
    )


def builtin_scenario(kind: ScenarioKind, seed: int = 0, **overrides: Any) -> ScenarioSpec:
    """Default scenario of each kind; keyword overrides replace top-level fields."""
    if kind == "free_run":
        spec = _base(kind, "corridor", EGO_CORRIDOR_ROUTE, seed, perception="ground_truth")
    elif kind == "intersection":
        spec = _base(kind, "four_way", EGO_FOUR_WAY_ROUTE, seed, npc_spawns=through_traffic(5),
                     perception="ground_truth")
    elif kind == "slow_fleet":
        spec = _base(kind, "corridor", EGO_CORRIDOR_ROUTE, seed, perception="ground_truth", npc_spawns=(
            NpcSpawnSpec(
                lanes=(LaneRefModel(segment=100, direction=1, s_from=40.0, s_to=195.0),),
                count=1, entry_time=Range(low=0.0, high=0.0), speed=Range(low=2.0, high=2.5),
            ),
        ))
    elif kind == "traffic_circle":
        spec = _base(kind, "circle", EGO_CIRCLE_ROUTE, seed, npc_spawns=circle_traffic(3),
                     perception="ground_truth", smart_circle=SmartCircleSpec(enabled=True))
    elif kind == "pedestrian_crossing":
        spec = _base(kind, "corridor", EGO_CORRIDOR_ROUTE, seed, pedestrian_spawns=(
            PedestrianSpawnSpec(crosswalk=0, count=3, entry_time=Range(low=0.0, high=20.0)),
        ))
    elif kind == "stopped_obstacle":
        spec = _base(kind, "corridor", EGO_CORRIDOR_ROUTE, seed, obstacle=ObstacleSpec(
            lane=LaneRefModel(segment=100, direction=1), s=130.0, reveal_gap=4.0,
        ))
    elif kind == "weather":
        spec = _base(kind, "corridor", EGO_CORRIDOR_ROUTE, seed, weather=WeatherSpec(condition="rain"),
                     perception="lidar")
    else:
        raise FormatError(f"Unknown scenario kind {kind!r}")
    return spec.model_copy(update=overrides) if overrides else spec


def density_scenario(count: int, seed: int) -> ScenarioSpec:
    return builtin_scenario("intersection", seed, name=f"density-{count}-{seed}", npc_spawns=through_traffic(count))


def ndt_scenario(seed: int = 0, **overrides: Any) -> ScenarioSpec:
    """Corridor drive localized by NDT, with a GPS-denied stretch between the buildings."""
    loc = LocalizationSpec(mode="ndt", denial_zones=(((-40.0, -8.0), (20.0, -8.0), (20.0, 8.0), (-40.0, 8.0)),))
    return builtin_scenario("free_run", seed, name=f"ndt-{seed}", perception="lidar", localization=loc, **overrides)


def occlusion_scenario(smart_circle: bool, seed: int = 0) -> ScenarioSpec:
    """
    Parked ego on the east approach of the circle; one vehicle comes down the
    north approach behind the corner building and only shows up in the ego's
    lidar once it is on the ring.
    """
    lanes = _circle_pass(201, 0.0, 203, 180.0)
    lanes = (lanes[0].model_copy(update={"s_from": 70.0}), *lanes[1:])
    npc = NpcSpawnSpec(
        lanes=_circle_pass(202, 90.0, 204, 270.0),
        count=1,
        entry_time=Range(low=0.0, high=0.0),
        speed=Range(low=5.0, high=5.0),
    )
    return _base(
        "traffic_circle", "circle", lanes, seed,
        name=f"occlusion-{'smart' if smart_circle else 'lidar'}-{seed}",
        npc_spawns=(npc,),
        perception="lidar",
        smart_circle=SmartCircleSpec(enabled=smart_circle),
        ego_start_delay=1000.0,
        duration_limit=30.0,
    )
