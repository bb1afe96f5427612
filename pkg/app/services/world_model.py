from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Final, Iterable, Literal, Optional, Sequence, Union

import numpy as np
from shapely.geometry import LineString, MultiLineString, Polygon, mapping

from app.core.geometry import Polyline, point_segment_distance, segment_intersects_segment
from app.services.map_ingest import RoadNetwork


logger = logging.getLogger(__name__)


DEFAULT_LANE_WIDTH: Final[float] = 3.5

# Target codes used by the vectorised fan; agent ids are >= 0.
TARGET_NONE: Final[int] = -1
TARGET_STATIC: Final[int] = -2

Target = Union[Literal["static", "none"], int]


class LanePath(Polyline):
    """Drivable lane centerline; direction is +1 along the segment centerline, -1 against it."""

    __slots__ = ("segment_id", "direction", "lane", "speed_limit")

    def __init__(
        self,
        points: Any,
        *,
        segment_id: Optional[int] = None,
        direction: int = 1,
        lane: int = 0,
        speed_limit: float = 0.0,
    ) -> None:
        super().__init__(points)
        self.segment_id = segment_id
        self.direction = direction
        self.lane = lane
        self.speed_limit = speed_limit

    def slice(self, s0: float, s1: float) -> LanePath:
        part = Polyline.slice(self, s0, s1)
        return LanePath(
            part.points,
            segment_id=self.segment_id,
            direction=self.direction,
            lane=self.lane,
            speed_limit=self.speed_limit,
        )

    @classmethod
    def concat(cls, parts: Sequence[Polyline], *, speed_limit: Optional[float] = None) -> LanePath:
        """Join slices end to start. Leading points of a part that are not ahead of the path so far are dropped."""
        if not parts:
            raise ValueError("Nothing to concatenate")
        pts: list[np.ndarray] = list(parts[0].points)
        for part in parts[1:]:
            headings = part.segment_headings()
            leading = True
            for i, p in enumerate(part.points):
                last, prev = pts[-1], pts[-2]
                delta = p - last
                if math.hypot(delta[0], delta[1]) < 1e-6:
                    continue
                if leading:
                    h = headings[min(i, len(headings) - 1)]
                    back = last - prev
                    same_way = math.cos(h) * back[0] + math.sin(h) * back[1] > 0.5 * math.hypot(back[0], back[1])
                    # overlapping continuation of the same direction of travel
                    if same_way and float(np.dot(delta, back)) <= 0.0:
                        continue
                leading = False
                pts.append(p)
        limits = [getattr(p, "speed_limit", 0.0) for p in parts]
        return cls(
            np.vstack(pts),
            segment_id=None,
            direction=1,
            lane=0,
            speed_limit=speed_limit if speed_limit is not None else min(limits),
        )


@dataclass(frozen=True, slots=True)
class StopLineGeom:
    segment_id: int
    arclength: float
    position: tuple[float, float]
    direction: Optional[int]
    intersection_id: Optional[int]
    node_id: int


@dataclass(frozen=True, slots=True)
class CrosswalkGeom:
    segment_id: int
    arclength: float
    position: tuple[float, float]
    heading: float  # road direction at the crossing
    width: float  # along the road
    half_span: float  # across the road, from the centerline
    node_id: int

    def polygon(self) -> Polygon:
        c, s = math.cos(self.heading), math.sin(self.heading)
        hw, hs = self.width / 2.0, self.half_span
        cx, cy = self.position
        corners = [(-hw, -hs), (hw, -hs), (hw, hs), (-hw, hs)]
        return Polygon([(cx + c * a - s * b, cy + s * a + c * b) for a, b in corners])


@dataclass(frozen=True, slots=True)
class StaticWorld:
    obstacle_segments: np.ndarray  # (M, 4) rows of x0, y0, x1, y1
    lane_paths: tuple[LanePath, ...]
    stop_lines: tuple[StopLineGeom, ...]
    crosswalks: tuple[CrosswalkGeom, ...]
    bounds: tuple[float, float, float, float]
    lane_width: float = DEFAULT_LANE_WIDTH
    network: Optional[RoadNetwork] = None

    def lane_paths_for(self, segment_id: int, direction: int) -> list[LanePath]:
        return sorted(
            (p for p in self.lane_paths if p.segment_id == segment_id and p.direction == direction),
            key=lambda p: p.lane,
        )


@dataclass(frozen=True, slots=True)
class Footprint:
    center: tuple[float, float]
    yaw: float
    half_length: float
    half_width: float

    def __post_init__(self) -> None:
        if self.half_length <= 0 or self.half_width <= 0:
            raise ValueError("Footprint extents must be positive")

    @property
    def circumradius(self) -> float:
        return math.hypot(self.half_length, self.half_width)

    def axes(self) -> tuple[tuple[float, float], tuple[float, float]]:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return (c, s), (-s, c)

    def corners(self) -> list[tuple[float, float]]:
        (ux, uy), (vx, vy) = self.axes()
        cx, cy = self.center
        out = []
        for a, b in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
            out.append((
                cx + a * self.half_length * ux + b * self.half_width * vx,
                cy + a * self.half_length * uy + b * self.half_width * vy,
            ))
        return out

    def edges(self) -> list[tuple[float, float, float, float]]:
        c = self.corners()
        return [(*c[i], *c[(i + 1) % 4]) for i in range(4)]

    def contains_point(self, x: float, y: float) -> bool:
        (ux, uy), (vx, vy) = self.axes()
        dx, dy = x - self.center[0], y - self.center[1]
        return abs(dx * ux + dy * uy) <= self.half_length and abs(dx * vx + dy * vy) <= self.half_width

    def distance_to_point(self, x: float, y: float) -> float:
        (ux, uy), (vx, vy) = self.axes()
        dx, dy = x - self.center[0], y - self.center[1]
        a = max(abs(dx * ux + dy * uy) - self.half_length, 0.0)
        b = max(abs(dx * vx + dy * vy) - self.half_width, 0.0)
        return math.hypot(a, b)


@dataclass(frozen=True, slots=True)
class RayHit:
    distance: float
    hit_point: tuple[float, float]
    target: Target


@dataclass(frozen=True, slots=True)
class RayFan:
    """Vectorised raycast result, one entry per angle."""

    angles: np.ndarray
    distances: np.ndarray
    targets: np.ndarray  # TARGET_NONE, TARGET_STATIC or an agent id
    hit_points: np.ndarray  # (A, 2)

    def hit(self, i: int) -> RayHit:
        code = int(self.targets[i])
        target: Target = "none" if code == TARGET_NONE else "static" if code == TARGET_STATIC else code
        return RayHit(
            distance=float(self.distances[i]),
            hit_point=(float(self.hit_points[i, 0]), float(self.hit_points[i, 1])),
            target=target,
        )


# ---------------------------------------------------------------------------
# Compilation
# ---------------------------------------------------------------------------


def _offset(line: LineString, right: float) -> LineString:
    if right == 0.0:
        return line
    out = line.offset_curve(-right, join_style="mitre", mitre_limit=5.0)
    if isinstance(out, MultiLineString):
        out = max(out.geoms, key=lambda g: g.length)
    return out


def compile_world(net: RoadNetwork, *, lane_width: float = DEFAULT_LANE_WIDTH) -> StaticWorld:
    walls: list[tuple[float, float, float, float]] = []
    for b in net.buildings:
        ring = list(b.polygon)
        if not b.closed:
            ring.append(ring[0])
        for (x0, y0), (x1, y1) in zip(ring, ring[1:]):
            if (x0, y0) != (x1, y1):
                walls.append((x0, y0, x1, y1))
    obstacle_segments = np.array(walls, dtype=float).reshape(-1, 4)

    lane_paths: list[LanePath] = []
    for seg in net.segments:
        line = LineString(seg.centerline)
        if seg.oneway:
            n = seg.lane_count
            for i in range(n):
                off = _offset(line, (i + 0.5 - n / 2.0) * lane_width)
                lane_paths.append(LanePath(
                    np.asarray(off.coords), segment_id=seg.id, direction=1, lane=i, speed_limit=seg.speed_limit
                ))
            continue
        forward = max(1, math.ceil(seg.lane_count / 2))
        backward = max(1, seg.lane_count // 2)
        reverse = LineString(list(reversed(seg.centerline)))
        for direction, base, count in ((1, line, forward), (-1, reverse, backward)):
            for i in range(count):
                off = _offset(base, (i + 0.5) * lane_width)
                lane_paths.append(LanePath(
                    np.asarray(off.coords), segment_id=seg.id, direction=direction, lane=i,
                    speed_limit=seg.speed_limit,
                ))

    seg_by_id = {s.id: s for s in net.segments}
    stop_lines = []
    for sl in net.stop_lines:
        pl = seg_by_id[sl.segment_id].polyline()
        stop_lines.append(StopLineGeom(
            segment_id=sl.segment_id,
            arclength=sl.arclength,
            position=pl.point_at(sl.arclength),
            direction=sl.direction,
            intersection_id=sl.intersection_id,
            node_id=sl.node_id,
        ))
    crosswalks = []
    for cw in net.crosswalks:
        seg = seg_by_id[cw.segment_id]
        pl = seg.polyline()
        crosswalks.append(CrosswalkGeom(
            segment_id=cw.segment_id,
            arclength=cw.arclength,
            position=pl.point_at(cw.arclength),
            heading=pl.heading_at(cw.arclength),
            width=cw.width,
            half_span=seg.lane_count * lane_width / 2.0,
            node_id=cw.node_id,
        ))

    min_x, min_y, max_x, max_y = net.bounds
    if len(obstacle_segments):
        xs = obstacle_segments[:, [0, 2]]
        ys = obstacle_segments[:, [1, 3]]
        min_x, max_x = min(min_x, float(xs.min())), max(max_x, float(xs.max()))
        min_y, max_y = min(min_y, float(ys.min())), max(max_y, float(ys.max()))

    world = StaticWorld(
        obstacle_segments=obstacle_segments,
        lane_paths=tuple(lane_paths),
        stop_lines=tuple(stop_lines),
        crosswalks=tuple(crosswalks),
        bounds=(min_x, min_y, max_x, max_y),
        lane_width=lane_width,
        network=net,
    )
    logger.info("Compiled world: %d obstacle segments, %d lane paths", len(obstacle_segments), len(lane_paths))
    return world


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------


def _agent_segments(agents: Sequence[tuple[int, Footprint]]) -> tuple[np.ndarray, np.ndarray]:
    rows: list[tuple[float, float, float, float]] = []
    ids: list[int] = []
    for agent_id, fp in agents:
        for e in fp.edges():
            rows.append(e)
            ids.append(agent_id)
    return np.array(rows, dtype=float).reshape(-1, 4), np.array(ids, dtype=np.int64)


def raycast_many(
    world: StaticWorld,
    agents: Sequence[tuple[int, Footprint]],
    origin: tuple[float, float],
    angles: Iterable[float],
    max_range: float,
) -> RayFan:
    """Nearest intersection per angle among walls and agent rectangle edges."""
    if max_range <= 0:
        raise ValueError("max_range must be positive")
    angle_list = [float(a) for a in angles]
    agent_segs, agent_ids = _agent_segments(agents)
    segs = np.vstack([world.obstacle_segments, agent_segs])
    codes = np.concatenate([np.full(len(world.obstacle_segments), TARGET_STATIC, dtype=np.int64), agent_ids])

    n = len(angle_list)
    ox, oy = float(origin[0]), float(origin[1])
    dirs = np.array([(math.cos(a), math.sin(a)) for a in angle_list], dtype=float).reshape(-1, 2)
    distances = np.full(n, float(max_range))
    targets = np.full(n, TARGET_NONE, dtype=np.int64)

    if len(segs) and n:
        dx = dirs[:, 0:1]
        dy = dirs[:, 1:2]
        ex = (segs[:, 2] - segs[:, 0])[None, :]
        ey = (segs[:, 3] - segs[:, 1])[None, :]
        wx = (segs[:, 0] - ox)[None, :]
        wy = (segs[:, 1] - oy)[None, :]
        denom = dx * ey - dy * ex
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (wx * ey - wy * ex) / denom
            u = (wx * dy - wy * dx) / denom
        valid = (denom != 0.0) & (t > 0.0) & (u >= 0.0) & (u <= 1.0) & (t <= max_range)
        t = np.where(valid, t, np.inf)
        best = np.argmin(t, axis=1)
        best_t = t[np.arange(n), best]
        hit = np.isfinite(best_t)
        distances[hit] = best_t[hit]
        targets[hit] = codes[best[hit]]

    hit_points = np.column_stack([ox + distances * dirs[:, 0], oy + distances * dirs[:, 1]]) if n else np.zeros((0, 2))
    return RayFan(angles=np.array(angle_list), distances=distances, targets=targets, hit_points=hit_points)


def raycast(
    world: StaticWorld,
    agents: Sequence[tuple[int, Footprint]],
    origin: tuple[float, float],
    angle: float,
    max_range: float,
) -> RayHit:
    return raycast_many(world, agents, origin, [angle], max_range).hit(0)


# ---------------------------------------------------------------------------
# Footprint geometry
# ---------------------------------------------------------------------------


def overlap(a: Footprint, b: Footprint) -> bool:
    """Separating-axis test on oriented rectangles. Touching counts as overlap."""
    dx, dy = b.center[0] - a.center[0], b.center[1] - a.center[1]
    if math.hypot(dx, dy) > a.circumradius + b.circumradius:
        return False
    a_axes, b_axes = a.axes(), b.axes()
    for ax, ay in (*a_axes, *b_axes):
        dist = abs(dx * ax + dy * ay)
        ra = a.half_length * abs(a_axes[0][0] * ax + a_axes[0][1] * ay) + a.half_width * abs(a_axes[1][0] * ax + a_axes[1][1] * ay)
        rb = b.half_length * abs(b_axes[0][0] * ax + b_axes[0][1] * ay) + b.half_width * abs(b_axes[1][0] * ax + b_axes[1][1] * ay)
        if dist > ra + rb:
            return False
    return True


def footprint_distance(a: Footprint, b: Footprint) -> float:
    """Exact gap between two rectangles, 0 when they overlap."""
    if overlap(a, b):
        return 0.0
    ea, eb = a.edges(), b.edges()
    for p1x, p1y, p2x, p2y in ea:
        for q1x, q1y, q2x, q2y in eb:
            if segment_intersects_segment((p1x, p1y), (p2x, p2y), (q1x, q1y), (q2x, q2y)):
                return 0.0
    best = math.inf
    for px, py in a.corners():
        for e in eb:
            best = min(best, point_segment_distance(px, py, *e))
    for px, py in b.corners():
        for e in ea:
            best = min(best, point_segment_distance(px, py, *e))
    return best


def world_to_geojson(world: StaticWorld) -> dict[str, Any]:
    """Obstacle segments and lane paths in the local metric frame."""
    features: list[dict[str, Any]] = []
    for i, (x0, y0, x1, y1) in enumerate(world.obstacle_segments.tolist()):
        features.append({
            "type": "Feature",
            "geometry": mapping(LineString([(x0, y0), (x1, y1)])),
            "properties": {"kind": "obstacle", "index": i},
        })
    for p in world.lane_paths:
        features.append({
            "type": "Feature",
            "geometry": mapping(LineString(p.points.tolist())),
            "properties": {"kind": "lane", "segment_id": p.segment_id, "direction": p.direction, "lane": p.lane},
        })
    for cw in world.crosswalks:
        features.append({
            "type": "Feature",
            "geometry": mapping(cw.polygon()),
            "properties": {"kind": "crosswalk", "segment_id": cw.segment_id},
        })
    return {"type": "FeatureCollection", "features": features}
