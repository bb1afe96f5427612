from __future__ import annotations

import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Final, Literal, Mapping, Optional

from lxml import etree
from shapely.geometry import LinearRing, LineString, Polygon, mapping

from app.core.errors import (
    DanglingReferenceError,
    EmptyNetworkError,
    OsmParseError,
    ProjectionDomainError,
)
from app.core.geometry import Polyline


logger = logging.getLogger(__name__)


EARTH_RADIUS: Final[float] = 6_371_000.0
DEFAULT_SPEED_LIMIT: Final[float] = 11.18  # 25 mph
DEFAULT_CROSSWALK_WIDTH: Final[float] = 3.0
MPH: Final[float] = 0.44704
BOUNDS_TOLERANCE: Final[float] = 1e-6

IssueKind = Literal[
    "missing_lane_count",
    "missing_speed_limit",
    "dangling_way_ref",
    "degenerate_way",
    "unclosed_building",
    "out_of_bounds",
    "arclength_out_of_range",
    "self_intersecting_building",
    "asymmetric_intersection",
]
Control = Literal["none", "stop_sign", "circle"]

_TRUE_VALUES = {"yes", "true", "1"}
_MAXSPEED_RE = re.compile(r"^\s*([0-9]+(?:\.[0-9]+)?)\s*(mph|km/h|kmh|kph)?\s*$", re.IGNORECASE)


# ---------------------------------------------------------------------------
# Document
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class OsmNode:
    id: int
    lat: float
    lon: float
    tags: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True, slots=True)
class OsmWay:
    id: int
    node_refs: tuple[int, ...]
    tags: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True, slots=True)
class OsmBounds:
    min_lat: float
    min_lon: float
    max_lat: float
    max_lon: float


@dataclass(frozen=True, slots=True)
class DanglingWay:
    way_id: int
    missing_ids: tuple[int, ...]


@dataclass(frozen=True, slots=True)
class OsmDocument:
    nodes: tuple[OsmNode, ...] = ()
    ways: tuple[OsmWay, ...] = ()
    bounds: Optional[OsmBounds] = None
    # Ways with fewer than two refs; kept aside so the network can report them.
    skipped_ways: tuple[OsmWay, ...] = ()
    # Only populated by lenient parsing.
    dangling_ways: tuple[DanglingWay, ...] = ()

    def node_index(self) -> dict[int, OsmNode]:
        return {n.id: n for n in self.nodes}


def _attr(el: Any, name: str, cast: Any) -> Any:
    raw = el.get(name)
    if raw is None:
        raise OsmParseError(f"<{el.tag}> is missing attribute '{name}'", line=el.sourceline)
    try:
        return cast(raw)
    except ValueError:
        raise OsmParseError(f"<{el.tag}> has invalid {name}={raw!r}", line=el.sourceline)


def _tags(el: Any) -> dict[str, str]:
    tags: dict[str, str] = {}
    for t in el.iterchildren("tag"):
        k = t.get("k")
        if k is None:
            raise OsmParseError("<tag> without 'k'", line=t.sourceline)
        tags[k] = t.get("v", "")
    return tags


def parse_osm(xml_text: str | bytes, *, strict: bool = True) -> OsmDocument:
    """
    Parse an OSM XML v0.6 extract (node, way, tag, nd, bounds).

    With strict=False, ways referencing unknown nodes are dropped and recorded
    in `dangling_ways` instead of raising.
    """
    data = xml_text.encode("utf-8") if isinstance(xml_text, str) else xml_text
    parser = etree.XMLParser(resolve_entities=False, no_network=True, huge_tree=True)
    try:
        root = etree.fromstring(data, parser)
    except etree.XMLSyntaxError as e:
        raise OsmParseError(f"Malformed OSM XML: {e.msg}", line=e.lineno) from e

    if root is None or root.tag != "osm":
        raise OsmParseError(f"Expected <osm> root element, found <{getattr(root, 'tag', None)}>", line=1)

    bounds: Optional[OsmBounds] = None
    b = root.find("bounds")
    if b is not None:
        bounds = OsmBounds(
            min_lat=_attr(b, "minlat", float),
            min_lon=_attr(b, "minlon", float),
            max_lat=_attr(b, "maxlat", float),
            max_lon=_attr(b, "maxlon", float),
        )

    nodes: dict[int, OsmNode] = {}
    for el in root.iterchildren("node"):
        node_id = _attr(el, "id", int)
        if node_id in nodes:
            raise OsmParseError(f"Duplicate node id {node_id}", line=el.sourceline)
        nodes[node_id] = OsmNode(
            id=node_id,
            lat=_attr(el, "lat", float),
            lon=_attr(el, "lon", float),
            tags=_tags(el),
        )

    ways: dict[int, OsmWay] = {}
    for el in root.iterchildren("way"):
        way_id = _attr(el, "id", int)
        if way_id in ways:
            raise OsmParseError(f"Duplicate way id {way_id}", line=el.sourceline)
        refs = tuple(_attr(nd, "ref", int) for nd in el.iterchildren("nd"))
        ways[way_id] = OsmWay(id=way_id, node_refs=refs, tags=_tags(el))

    missing_all: set[int] = set()
    dangling: list[DanglingWay] = []
    for way in ways.values():
        missing = sorted({r for r in way.node_refs if r not in nodes})
        if missing:
            missing_all.update(missing)
            dangling.append(DanglingWay(way_id=way.id, missing_ids=tuple(missing)))
    if dangling and strict:
        raise DanglingReferenceError(missing_all)

    dangling_ids = {d.way_id for d in dangling}
    kept = [w for w in ways.values() if w.id not in dangling_ids]
    good = tuple(sorted((w for w in kept if len(w.node_refs) >= 2), key=lambda w: w.id))
    skipped = tuple(sorted((w for w in kept if len(w.node_refs) < 2), key=lambda w: w.id))

    doc = OsmDocument(
        nodes=tuple(sorted(nodes.values(), key=lambda n: n.id)),
        ways=good,
        bounds=bounds,
        skipped_ways=skipped,
        dangling_ways=tuple(sorted(dangling, key=lambda d: d.way_id)),
    )
    logger.debug("Parsed OSM document: %d nodes, %d ways", len(doc.nodes), len(doc.ways))
    return doc


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Projection:
    ref_lat: float
    ref_lon: float
    earth_radius: float = EARTH_RADIUS

    def __post_init__(self) -> None:
        _check_domain(self.ref_lat, self.ref_lon)
        if abs(self.ref_lat) >= 90.0:
            raise ProjectionDomainError("Reference latitude must be strictly inside (-90, 90)")

    @classmethod
    def from_document(cls, doc: OsmDocument) -> Projection:
        """Reference at the centre of <bounds>, or of the node bounding box."""
        if doc.bounds is not None:
            b = doc.bounds
            return cls((b.min_lat + b.max_lat) / 2.0, (b.min_lon + b.max_lon) / 2.0)
        if not doc.nodes:
            return cls(0.0, 0.0)
        lats = [n.lat for n in doc.nodes]
        lons = [n.lon for n in doc.nodes]
        return cls((min(lats) + max(lats)) / 2.0, (min(lons) + max(lons)) / 2.0)


def _check_domain(lat: float, lon: float) -> None:
    if not (math.isfinite(lat) and math.isfinite(lon)) or abs(lat) > 90.0 or abs(lon) > 180.0:
        raise ProjectionDomainError(f"Coordinate out of range: lat={lat}, lon={lon}")


def project(lat: float, lon: float, proj: Projection) -> tuple[float, float]:
    """Equirectangular local tangent plane: x east, y north, meters."""
    _check_domain(lat, lon)
    x = proj.earth_radius * math.cos(math.radians(proj.ref_lat)) * math.radians(lon - proj.ref_lon)
    y = proj.earth_radius * math.radians(lat - proj.ref_lat)
    return x, y


def unproject(x: float, y: float, proj: Projection) -> tuple[float, float]:
    lat = proj.ref_lat + math.degrees(y / proj.earth_radius)
    lon = proj.ref_lon + math.degrees(x / (proj.earth_radius * math.cos(math.radians(proj.ref_lat))))
    return lat, lon


# ---------------------------------------------------------------------------
# Road network
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ValidationIssue:
    kind: IssueKind
    subject_id: int
    message: str


@dataclass(frozen=True, slots=True)
class Segment:
    id: int
    centerline: tuple[tuple[float, float], ...]
    lane_count: int
    speed_limit: float
    oneway: bool = False
    highway: str = "residential"
    node_ids: tuple[int, ...] = ()
    node_arclengths: tuple[float, ...] = ()
    intersection_ids: tuple[int, ...] = ()
    roundabout: bool = False
    tags: Mapping[str, str] = field(default_factory=dict)

    @property
    def closed(self) -> bool:
        return len(self.node_ids) > 2 and self.node_ids[0] == self.node_ids[-1]

    def polyline(self) -> Polyline:
        return Polyline(self.centerline)

    @property
    def length(self) -> float:
        return self.polyline().length


@dataclass(frozen=True, slots=True)
class Intersection:
    id: int
    position: tuple[float, float]
    segment_ids: tuple[int, ...]
    control: Control = "none"
    radius: float = 0.0
    node_ids: tuple[int, ...] = ()


@dataclass(frozen=True, slots=True)
class StopLine:
    segment_id: int
    arclength: float
    node_id: int = 0
    # +1 along the centerline, -1 against it, None for both directions.
    direction: Optional[int] = None
    intersection_id: Optional[int] = None


@dataclass(frozen=True, slots=True)
class Crosswalk:
    segment_id: int
    arclength: float
    width: float = DEFAULT_CROSSWALK_WIDTH
    node_id: int = 0


@dataclass(frozen=True, slots=True)
class Building:
    id: int
    polygon: tuple[tuple[float, float], ...]

    @property
    def closed(self) -> bool:
        return len(self.polygon) >= 4 and self.polygon[0] == self.polygon[-1]


@dataclass(frozen=True, slots=True)
class RoadNetwork:
    segments: tuple[Segment, ...]
    intersections: tuple[Intersection, ...] = ()
    stop_lines: tuple[StopLine, ...] = ()
    crosswalks: tuple[Crosswalk, ...] = ()
    buildings: tuple[Building, ...] = ()
    bounds: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)  # min_x, min_y, max_x, max_y
    projection: Projection = field(default_factory=lambda: Projection(0.0, 0.0))
    ingest_issues: tuple[ValidationIssue, ...] = ()

    def segment(self, segment_id: int) -> Segment:
        for seg in self.segments:
            if seg.id == segment_id:
                return seg
        raise KeyError(segment_id)

    def intersection(self, intersection_id: int) -> Intersection:
        for inter in self.intersections:
            if inter.id == intersection_id:
                return inter
        raise KeyError(intersection_id)


def parse_lanes(raw: Optional[str]) -> Optional[int]:
    if raw is None:
        return None
    try:
        lanes = int(raw.strip())
    except ValueError:
        return None
    return lanes if lanes >= 1 else None


def parse_maxspeed(raw: Optional[str]) -> Optional[float]:
    """Return m/s. Bare numbers are km/h, as in OSM."""
    if raw is None:
        return None
    m = _MAXSPEED_RE.match(raw)
    if not m:
        return None
    value = float(m.group(1))
    if value <= 0:
        return None
    unit = (m.group(2) or "km/h").lower()
    if unit == "mph":
        return value * MPH
    return value / 3.6


def _oneway(tags: Mapping[str, str]) -> tuple[bool, bool]:
    """(oneway, reversed)."""
    raw = tags.get("oneway", "").strip().lower()
    if raw == "-1":
        return True, True
    if raw in _TRUE_VALUES:
        return True, False
    if tags.get("junction") == "roundabout":
        return True, False
    return False, False


def _arclengths(points: list[tuple[float, float]]) -> list[float]:
    out = [0.0]
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        out.append(out[-1] + math.hypot(x1 - x0, y1 - y0))
    return out


def _dedupe(points: list[tuple[float, float]]) -> list[tuple[float, float]]:
    out: list[tuple[float, float]] = []
    for p in points:
        if not out or out[-1] != p:
            out.append(p)
    return out


def build_network(doc: OsmDocument, proj: Projection) -> RoadNetwork:
    """Compile a parsed document into the planar road network."""
    node_by_id = doc.node_index()
    xy = {n.id: project(n.lat, n.lon, proj) for n in doc.nodes}
    issues: list[ValidationIssue] = []

    for d in doc.dangling_ways:
        for missing in d.missing_ids:
            issues.append(ValidationIssue(
                kind="dangling_way_ref",
                subject_id=missing,
                message=f"Way {d.way_id} references missing node {missing}",
            ))
    for way in doc.skipped_ways:
        issues.append(ValidationIssue(
            kind="degenerate_way",
            subject_id=way.id,
            message=f"Way {way.id} has {len(way.node_refs)} node ref(s); at least 2 required",
        ))

    raw_segments: list[dict[str, Any]] = []
    buildings: list[Building] = []
    for way in doc.ways:
        if "highway" in way.tags:
            oneway, reverse = _oneway(way.tags)
            refs = list(reversed(way.node_refs)) if reverse else list(way.node_refs)
            points = [xy[r] for r in refs]
            if len(_dedupe(points)) < 2:
                issues.append(ValidationIssue(
                    kind="degenerate_way",
                    subject_id=way.id,
                    message=f"Way {way.id} collapses to a single point",
                ))
                continue

            lanes = parse_lanes(way.tags.get("lanes"))
            if lanes is None:
                lanes = 1 if oneway else 2
                issues.append(ValidationIssue(
                    kind="missing_lane_count",
                    subject_id=way.id,
                    message=f"Segment {way.id} has no usable lanes tag; defaulted to {lanes}",
                ))
            speed = parse_maxspeed(way.tags.get("maxspeed"))
            if speed is None:
                speed = DEFAULT_SPEED_LIMIT
                issues.append(ValidationIssue(
                    kind="missing_speed_limit",
                    subject_id=way.id,
                    message=f"Segment {way.id} has no usable maxspeed tag; defaulted to {DEFAULT_SPEED_LIMIT} m/s",
                ))
            raw_segments.append({
                "id": way.id,
                "refs": refs,
                "points": points,
                "arclengths": _arclengths(points),
                "lanes": lanes,
                "speed": speed,
                "oneway": oneway,
                "reversed": reverse,
                "highway": way.tags["highway"],
                "roundabout": way.tags.get("junction") == "roundabout",
                "tags": dict(way.tags),
            })
        elif "building" in way.tags:
            buildings.append(Building(id=way.id, polygon=tuple(xy[r] for r in way.node_refs)))

    if not raw_segments:
        raise EmptyNetworkError("Document contains no usable highway ways")

    # Intersections: shared nodes, with roundabout rings collapsed into one circle each.
    ways_at_node: dict[int, set[int]] = defaultdict(set)
    for seg in raw_segments:
        for r in seg["refs"]:
            ways_at_node[r].add(seg["id"])

    ring_of_node: dict[int, int] = {}
    circles: list[dict[str, Any]] = []
    for seg in raw_segments:
        if not seg["roundabout"]:
            continue
        ring_nodes = list(dict.fromkeys(seg["refs"]))
        members: set[int] = set()
        for r in ring_nodes:
            ring_of_node[r] = seg["id"]
            members |= ways_at_node[r]
        pts = [xy[r] for r in ring_nodes]
        cx = sum(p[0] for p in pts) / len(pts)
        cy = sum(p[1] for p in pts) / len(pts)
        radius = sum(math.hypot(p[0] - cx, p[1] - cy) for p in pts) / len(pts)
        circles.append({
            "id": seg["id"],
            "position": (cx, cy),
            "segments": members,
            "radius": radius,
            "nodes": tuple(sorted(r for r in ring_nodes if len(ways_at_node[r]) >= 2)),
        })

    intersections: dict[int, dict[str, Any]] = {}
    inter_of_node: dict[int, int] = {}
    for node_id in sorted(ways_at_node):
        if len(ways_at_node[node_id]) < 2:
            continue
        if node_id in ring_of_node:
            inter_of_node[node_id] = ring_of_node[node_id]
            continue
        intersections[node_id] = {
            "id": node_id,
            "position": xy[node_id],
            "segments": set(ways_at_node[node_id]),
            "control": "none",
            "radius": 0.0,
            "nodes": (node_id,),
        }
        inter_of_node[node_id] = node_id
    for c in circles:
        if c["id"] in intersections:
            raise OsmParseError(f"Roundabout way {c['id']} collides with intersection node id")
        intersections[c["id"]] = {**c, "control": "circle"}
        for r in c["nodes"]:
            inter_of_node[r] = c["id"]

    # Stop lines and crosswalks from tagged nodes on highway ways.
    stop_lines: list[StopLine] = []
    crosswalks: list[Crosswalk] = []
    for seg in raw_segments:
        for idx, r in enumerate(seg["refs"]):
            node = node_by_id[r]
            kind = node.tags.get("highway")
            s = seg["arclengths"][idx]
            if kind == "stop" and not seg["roundabout"]:
                direction = {"forward": 1, "backward": -1}.get(node.tags.get("direction", ""))
                if direction is not None and seg["reversed"]:
                    direction = -direction
                stop_lines.append(StopLine(
                    segment_id=seg["id"],
                    arclength=s,
                    node_id=r,
                    direction=direction,
                    intersection_id=_nearest_intersection(seg, s, direction, inter_of_node),
                ))
            elif kind == "crossing":
                try:
                    width = float(node.tags.get("width", DEFAULT_CROSSWALK_WIDTH))
                except ValueError:
                    width = DEFAULT_CROSSWALK_WIDTH
                crosswalks.append(Crosswalk(segment_id=seg["id"], arclength=s, width=width, node_id=r))

    for sl in stop_lines:
        if sl.intersection_id is not None and intersections[sl.intersection_id]["control"] == "none":
            intersections[sl.intersection_id]["control"] = "stop_sign"

    seg_inters: dict[int, set[int]] = defaultdict(set)
    for inter in intersections.values():
        for sid in inter["segments"]:
            seg_inters[sid].add(inter["id"])

    segments = tuple(
        Segment(
            id=seg["id"],
            centerline=tuple(_dedupe(seg["points"])),
            lane_count=seg["lanes"],
            speed_limit=seg["speed"],
            oneway=seg["oneway"],
            highway=seg["highway"],
            node_ids=tuple(seg["refs"]),
            node_arclengths=tuple(seg["arclengths"]),
            intersection_ids=tuple(sorted(seg_inters[seg["id"]])),
            roundabout=seg["roundabout"],
            tags=seg["tags"],
        )
        for seg in raw_segments
    )

    if doc.bounds is not None:
        x0, y0 = project(doc.bounds.min_lat, doc.bounds.min_lon, proj)
        x1, y1 = project(doc.bounds.max_lat, doc.bounds.max_lon, proj)
        bounds = (min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))
    else:
        xs = [p[0] for p in xy.values()]
        ys = [p[1] for p in xy.values()]
        bounds = (min(xs), min(ys), max(xs), max(ys))

    net = RoadNetwork(
        segments=segments,
        intersections=tuple(
            Intersection(
                id=i["id"],
                position=i["position"],
                segment_ids=tuple(sorted(i["segments"])),
                control=i["control"],
                radius=i["radius"],
                node_ids=tuple(i["nodes"]),
            )
            for i in sorted(intersections.values(), key=lambda i: i["id"])
        ),
        stop_lines=tuple(sorted(stop_lines, key=lambda s: (s.segment_id, s.arclength, s.node_id))),
        crosswalks=tuple(sorted(crosswalks, key=lambda c: (c.segment_id, c.arclength, c.node_id))),
        buildings=tuple(sorted(buildings, key=lambda b: b.id)),
        bounds=bounds,
        projection=proj,
        ingest_issues=tuple(issues),
    )
    logger.info(
        "Built road network: %d segments, %d intersections, %d stop lines, %d crosswalks, %d buildings",
        len(net.segments), len(net.intersections), len(net.stop_lines), len(net.crosswalks), len(net.buildings),
    )
    if issues:
        logger.warning("Ingest applied %d default(s) or skipped element(s)", len(issues))
    return net


def _nearest_intersection(
    seg: dict[str, Any], s: float, direction: Optional[int], inter_of_node: dict[int, int]
) -> Optional[int]:
    candidates = [
        (seg["arclengths"][i], inter_of_node[r])
        for i, r in enumerate(seg["refs"])
        if r in inter_of_node
    ]
    if direction == 1:
        candidates = [c for c in candidates if c[0] >= s]
    elif direction == -1:
        candidates = [c for c in candidates if c[0] <= s]
    if not candidates:
        return None
    return min(candidates, key=lambda c: (abs(c[0] - s), c[1]))[1]


def validate_network(net: RoadNetwork) -> list[ValidationIssue]:
    """Every rule violation in the network, ingest defaults included."""
    issues = list(net.ingest_issues)
    min_x, min_y, max_x, max_y = net.bounds
    seg_by_id = {s.id: s for s in net.segments}

    for seg in net.segments:
        outside = [
            p for p in seg.centerline
            if p[0] < min_x - BOUNDS_TOLERANCE or p[0] > max_x + BOUNDS_TOLERANCE
            or p[1] < min_y - BOUNDS_TOLERANCE or p[1] > max_y + BOUNDS_TOLERANCE
        ]
        if outside:
            issues.append(ValidationIssue(
                kind="out_of_bounds",
                subject_id=seg.id,
                message=f"Segment {seg.id} has {len(outside)} vertex(es) outside world bounds",
            ))

    for kind, items in (("stop line", net.stop_lines), ("crosswalk", net.crosswalks)):
        for item in items:
            seg = seg_by_id.get(item.segment_id)
            length = seg.length if seg is not None else 0.0
            if seg is None or not (0.0 <= item.arclength <= length + BOUNDS_TOLERANCE):
                issues.append(ValidationIssue(
                    kind="arclength_out_of_range",
                    subject_id=item.segment_id,
                    message=f"{kind} at s={item.arclength:.3f} outside segment {item.segment_id} (length {length:.3f})",
                ))

    for b in net.buildings:
        if not b.closed:
            issues.append(ValidationIssue(
                kind="unclosed_building",
                subject_id=b.id,
                message=f"Building {b.id} polygon is not closed (first vertex != last vertex)",
            ))
            continue
        if not LinearRing(b.polygon).is_simple:
            issues.append(ValidationIssue(
                kind="self_intersecting_building",
                subject_id=b.id,
                message=f"Building {b.id} polygon self-intersects",
            ))

    inter_by_id = {i.id: i for i in net.intersections}
    for inter in net.intersections:
        for sid in inter.segment_ids:
            seg = seg_by_id.get(sid)
            if seg is None or inter.id not in seg.intersection_ids:
                issues.append(ValidationIssue(
                    kind="asymmetric_intersection",
                    subject_id=inter.id,
                    message=f"Intersection {inter.id} lists segment {sid} which does not list it back",
                ))
    for seg in net.segments:
        for iid in seg.intersection_ids:
            inter = inter_by_id.get(iid)
            if inter is None or seg.id not in inter.segment_ids:
                issues.append(ValidationIssue(
                    kind="asymmetric_intersection",
                    subject_id=seg.id,
                    message=f"Segment {seg.id} lists intersection {iid} which does not list it back",
                ))
    return issues


def ingest_osm(xml_text: str | bytes, *, strict: bool = True) -> tuple[RoadNetwork, list[ValidationIssue]]:
    doc = parse_osm(xml_text, strict=strict)
    net = build_network(doc, Projection.from_document(doc))
    return net, validate_network(net)


def network_to_geojson(net: RoadNetwork) -> dict[str, Any]:
    """Centerlines and buildings in lon/lat for inspection."""

    def lonlat(points: tuple[tuple[float, float], ...]) -> list[tuple[float, float]]:
        out = []
        for x, y in points:
            lat, lon = unproject(x, y, net.projection)
            out.append((lon, lat))
        return out

    features: list[dict[str, Any]] = []
    for seg in net.segments:
        features.append({
            "type": "Feature",
            "geometry": mapping(LineString(lonlat(seg.centerline))),
            "properties": {
                "kind": "segment",
                "id": seg.id,
                "lanes": seg.lane_count,
                "speed_limit": seg.speed_limit,
                "oneway": seg.oneway,
            },
        })
    for b in net.buildings:
        coords = lonlat(b.polygon)
        geometry = Polygon(coords) if b.closed else LineString(coords)
        features.append({"type": "Feature", "geometry": mapping(geometry), "properties": {"kind": "building", "id": b.id}})
    for inter in net.intersections:
        lat, lon = unproject(*inter.position, net.projection)
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": (lon, lat)},
            "properties": {"kind": "intersection", "id": inter.id, "control": inter.control},
        })
    return {"type": "FeatureCollection", "features": features}
