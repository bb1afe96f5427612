from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from heapq import heappop, heappush
from typing import Final, Literal, Optional, Sequence

import numpy as np
from scipy.ndimage import binary_dilation
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from app.core.geometry import Polyline, Pose
from app.services.sensors import PointCloud
from app.services.world_model import Footprint


logger = logging.getLogger(__name__)


UNKNOWN: Final[int] = -1
FREE: Final[int] = 0
OCCUPIED: Final[int] = 1

DIAGONAL_COST: Final[float] = math.sqrt(2.0)
TTC_EPS: Final[float] = 1e-6

_MOVES: Final[tuple[tuple[int, int, float], ...]] = (
    (1, 0, 1.0),
    (-1, 0, 1.0),
    (0, 1, 1.0),
    (0, -1, 1.0),
    (1, 1, DIAGONAL_COST),
    (1, -1, DIAGONAL_COST),
    (-1, 1, DIAGONAL_COST),
    (-1, -1, DIAGONAL_COST),
)


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Cluster:
    id: int
    points: np.ndarray  # (k, 2), ego frame
    centroid: tuple[float, float]
    radius: float
    indices: tuple[int, ...] = ()
    source: str = "lidar"  # lidar | truth | broadcast | fused
    agent_id: Optional[int] = None

    def __len__(self) -> int:
        return len(self.points)


def _make_cluster(cid: int, pts: np.ndarray, indices: Sequence[int] = ()) -> Cluster:
    c = pts.mean(axis=0)
    radius = float(np.max(np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1]))) if len(pts) else 0.0
    return Cluster(id=cid, points=pts, centroid=(float(c[0]), float(c[1])), radius=radius, indices=tuple(indices))


def cluster_points(cloud: PointCloud | np.ndarray, tolerance: float, min_size: int = 3) -> list[Cluster]:
    """Single-linkage components of the distance <= tolerance graph, ordered by centroid angle."""
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return []
    pairs = cKDTree(pts).query_pairs(r=tolerance, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)

    groups: list[np.ndarray] = []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        if len(members) >= min_size:
            groups.append(members)

    def order(members: np.ndarray) -> tuple[float, float, int]:
        c = pts[members].mean(axis=0)
        return (math.atan2(c[1], c[0]), math.hypot(c[0], c[1]), int(members[0]))

    groups.sort(key=order)
    return [_make_cluster(i, pts[m], m.tolist()) for i, m in enumerate(groups)]


def footprint_points(fp: Footprint, spacing: float = 0.25) -> np.ndarray:
    """Perimeter samples of a footprint."""
    out = []
    for x0, y0, x1, y1 in fp.edges():
        n = max(1, int(math.ceil(math.hypot(x1 - x0, y1 - y0) / spacing)))
        t = np.arange(n) / n
        out.append(np.column_stack([x0 + t * (x1 - x0), y0 + t * (y1 - y0)]))
    return np.vstack(out)


def clusters_from_footprints(agents: Sequence[tuple[int, Footprint]], ego_pose: Pose) -> list[Cluster]:
    """Ground-truth stand-in for lidar clusters; cluster ids are the agent ids."""
    out = []
    for agent_id, fp in agents:
        pts = ego_pose.inverse_transform_points(footprint_points(fp))
        c = _make_cluster(agent_id, pts)
        out.append(replace(c, source="truth", agent_id=agent_id))
    return out


# ---------------------------------------------------------------------------
# Occupancy grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class GridConfig:
    resolution: float = 0.5
    width: int = 60
    height: int = 60
    origin: tuple[float, float] = (-5.0, -15.0)  # ego frame, lower-left corner

    def __post_init__(self) -> None:
        if self.resolution <= 0 or self.width < 1 or self.height < 1:
            raise ValueError("grid resolution and size must be positive")


@dataclass(frozen=True, slots=True)
class OccupancyGrid:
    resolution: float
    width: int
    height: int
    origin: tuple[float, float]
    cells: np.ndarray  # (height, width) int8, indexed [iy, ix]

    @classmethod
    def blank(cls, cfg: GridConfig = GridConfig(), fill: int = UNKNOWN) -> OccupancyGrid:
        return cls(cfg.resolution, cfg.width, cfg.height, cfg.origin, np.full((cfg.height, cfg.width), fill, dtype=np.int8))

    def cell_of(self, x: float, y: float) -> Optional[tuple[int, int]]:
        ix = math.floor((x - self.origin[0]) / self.resolution)
        iy = math.floor((y - self.origin[1]) / self.resolution)
        if 0 <= ix < self.width and 0 <= iy < self.height:
            return ix, iy
        return None

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.origin[0] + (ix + 0.5) * self.resolution,
            self.origin[1] + (iy + 0.5) * self.resolution,
        )

    def count(self, value: int) -> int:
        return int(np.count_nonzero(self.cells == value))


def _cells(grid: OccupancyGrid, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ix = np.floor((pts[:, 0] - grid.origin[0]) / grid.resolution).astype(np.int64)
    iy = np.floor((pts[:, 1] - grid.origin[1]) / grid.resolution).astype(np.int64)
    inside = (ix >= 0) & (ix < grid.width) & (iy >= 0) & (iy < grid.height)
    return ix, iy, inside


def build_grid(
    cloud: PointCloud,
    clusters: Sequence[Cluster],
    cfg: GridConfig = GridConfig(),
    *,
    sensor_pose: Pose = Pose.identity(),
) -> OccupancyGrid:
    """
    Ray-trace every beam into an ego-frame grid.

    Cells before a return are free; the return cell is occupied when the return
    belongs to a cluster and unknown otherwise; cells past a return stay unknown
    unless another beam frees them. Beams with no return free the grid out to
    max_range; dropped beams (NaN) contribute nothing.
    """
    grid = OccupancyGrid.blank(cfg)
    res = cfg.resolution
    if cloud.ranges is not None and cloud.beam_angles is not None:
        angles = np.asarray(cloud.beam_angles, dtype=float)
        ranges = np.asarray(cloud.ranges, dtype=float)
    else:
        angles = np.arctan2(cloud.points[:, 1], cloud.points[:, 0])
        ranges = np.hypot(cloud.points[:, 0], cloud.points[:, 1])

    corners = np.array(
        [[cfg.origin[0], cfg.origin[1]], [cfg.origin[0] + cfg.width * res, cfg.origin[1]],
         [cfg.origin[0], cfg.origin[1] + cfg.height * res], [cfg.origin[0] + cfg.width * res, cfg.origin[1] + cfg.height * res]]
    )
    reach = float(np.max(np.hypot(corners[:, 0] - sensor_pose.x, corners[:, 1] - sensor_pose.y))) + res
    step = res / 4.0

    free_pts: list[np.ndarray] = []
    return_pts: list[np.ndarray] = []
    for angle, r in zip(angles, ranges):
        if math.isnan(r):
            continue
        hit = math.isfinite(r)
        limit = min(r if hit else cloud.max_range, reach)
        if not math.isfinite(limit):
            limit = reach
        t = np.arange(0.0, limit, step)
        c, s = math.cos(angle), math.sin(angle)
        local = np.column_stack([t * c, t * s])
        if hit:
            ret = np.array([[r * c, r * s]])
            ret_ego = sensor_pose.transform_points(ret)
            return_pts.append(ret_ego)
            samples = sensor_pose.transform_points(local)
            rix, riy, _ = _cells(grid, ret_ego)
            six, siy, _ = _cells(grid, samples)
            samples = samples[(six != rix[0]) | (siy != riy[0])]
        else:
            samples = sensor_pose.transform_points(np.vstack([local, [[limit * c, limit * s]]]))
        free_pts.append(samples)

    if free_pts:
        pts = np.vstack(free_pts)
        ix, iy, inside = _cells(grid, pts)
        grid.cells[iy[inside], ix[inside]] = FREE
    if return_pts:
        pts = np.vstack(return_pts)
        ix, iy, inside = _cells(grid, pts)
        grid.cells[iy[inside], ix[inside]] = UNKNOWN
    for cluster in clusters:
        if len(cluster.points) == 0:
            continue
        ix, iy, inside = _cells(grid, cluster.points)
        grid.cells[iy[inside], ix[inside]] = OCCUPIED
    return grid


def inflate(grid: OccupancyGrid, radius: float) -> np.ndarray:
    """Occupied cells dilated by a disk of `radius` meters."""
    occupied = grid.cells == OCCUPIED
    k = int(math.ceil(radius / grid.resolution))
    if k <= 0:
        return occupied
    yy, xx = np.mgrid[-k : k + 1, -k : k + 1]
    disk = (xx * xx + yy * yy) <= k * k
    return binary_dilation(occupied, structure=disk)


def grid_to_pgm(grid: OccupancyGrid) -> str:
    """Plain PGM (P2): occupied 0, unknown 1, free 2; top row is max y."""
    shade = {OCCUPIED: 0, UNKNOWN: 1, FREE: 2}
    lines = ["P2", f"{grid.width} {grid.height}", "2"]
    for iy in range(grid.height - 1, -1, -1):
        lines.append(" ".join(str(shade[int(v)]) for v in grid.cells[iy]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# A* avoidance
# ---------------------------------------------------------------------------

AvoidanceStatus = Literal["clear", "blocked", "detour"]


@dataclass(frozen=True, slots=True)
class AvoidanceResult:
    status: AvoidanceStatus
    cells: tuple[tuple[int, int], ...] = ()
    cost: float = 0.0
    points: Optional[np.ndarray] = None  # ego-frame cell centres of the detour


def astar(blocked: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> Optional[tuple[list[tuple[int, int]], float]]:
    """8-connected A*, straight 1 and diagonal sqrt(2), no corner cutting. Cells are (ix, iy)."""
    height, width = blocked.shape

    def free(ix: int, iy: int) -> bool:
        return 0 <= ix < width and 0 <= iy < height and not blocked[iy, ix]

    if not free(*goal):
        return None
    counter = 0
    queue: list[tuple[float, int, tuple[int, int]]] = [(0.0, counter, start)]
    g_cost = {start: 0.0}
    parent: dict[tuple[int, int], tuple[int, int]] = {}
    closed: set[tuple[int, int]] = set()
    while queue:
        _, _, curr = heappop(queue)
        if curr in closed:
            continue
        if curr == goal:
            path = [curr]
            while path[-1] in parent:
                path.append(parent[path[-1]])
            path.reverse()
            return path, g_cost[curr]
        closed.add(curr)
        for dx, dy, cost in _MOVES:
            nxt = (curr[0] + dx, curr[1] + dy)
            if not free(*nxt) or nxt in closed:
                continue
            if dx and dy and not (free(curr[0] + dx, curr[1]) and free(curr[0], curr[1] + dy)):
                continue
            new_g = g_cost[curr] + cost
            if new_g < g_cost.get(nxt, math.inf):
                g_cost[nxt] = new_g
                parent[nxt] = curr
                counter += 1
                heappush(queue, (new_g + math.hypot(goal[0] - nxt[0], goal[1] - nxt[1]), counter, nxt))
    return None


def astar_check(grid: OccupancyGrid, window: np.ndarray, *, inflation_radius: float = 1.0) -> AvoidanceResult:
    """Clear when the window crosses no inflated obstacle, otherwise search a detour with unknown cells blocked."""
    inflated = inflate(grid, inflation_radius)
    ix, iy, inside = _cells(grid, np.asarray(window, dtype=float).reshape(-1, 2))
    ix, iy = ix[inside], iy[inside]
    if len(ix) == 0:
        return AvoidanceResult("clear")
    if not inflated[iy, ix].any():
        return AvoidanceResult("clear")

    blocked = inflated | (grid.cells == UNKNOWN)
    start = (int(ix[0]), int(iy[0]))
    goal = (int(ix[-1]), int(iy[-1]))
    blocked = blocked.copy()
    blocked[start[1], start[0]] = False
    found = astar(blocked, start, goal)
    if found is None:
        return AvoidanceResult("blocked")
    path, cost = found
    pts = np.array([grid.cell_center(cx, cy) for cx, cy in path])
    return AvoidanceResult("detour", tuple(path), cost, pts)


# ---------------------------------------------------------------------------
# Path corridor and emergency braking
# ---------------------------------------------------------------------------


def path_window(route_line: Polyline, pose: Pose, s_start: float, length: float, *, spacing: float = 0.25, cyclic: bool = False) -> np.ndarray:
    """Route ahead of the ego from arclength `s_start`, in the ego frame."""
    n = max(1, int(math.ceil(length / spacing)))
    total = route_line.length
    stations = s_start + np.arange(n + 1) * (length / n)
    if cyclic:
        stations = np.mod(stations, total)
    else:
        stations = stations[stations <= total + 1e-9]
        if len(stations) == 0:
            stations = np.array([total])
    world = np.array([route_line.point_at(float(s)) for s in stations])
    return pose.inverse_transform_points(world)


def obstacle_distance_on_path(
    points: np.ndarray, window: np.ndarray, half_width: float, *, min_s: float = 0.0
) -> Optional[float]:
    """Smallest along-window arclength (>= min_s) of a point inside the corridor; None when the corridor is empty."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0 or len(window) < 2:
        return None
    try:
        line = Polyline(window)
    except ValueError:
        return None
    best: Optional[float] = None
    for x, y in pts:
        proj = line.project(float(x), float(y))
        if proj.distance > half_width:
            continue
        # clamped to an end: the point is behind the start or past the end of the window
        if proj.s <= 0.0 or proj.s >= line.length:
            continue
        if proj.s < min_s:
            continue
        if best is None or proj.s < best:
            best = proj.s
    return best


@dataclass(frozen=True, slots=True)
class BrakeConfig:
    corridor_half_width: float = 1.3
    margin: float = 2.0
    ttc_threshold: float = 3.0
    front_overhang: float = 4.0


@dataclass(frozen=True, slots=True)
class BrakeDecision:
    engage: bool
    time_to_collision: Optional[float] = None
    trigger: Optional[int] = None
    distance: Optional[float] = None


def nearest_in_corridor(
    clusters: Sequence[Cluster], window: np.ndarray, half_width: float, front_overhang: float
) -> tuple[Optional[int], Optional[float]]:
    """Nearest cluster in the corridor and its gap measured from the front bumper."""
    best_id: Optional[int] = None
    best: Optional[float] = None
    for c in clusters:
        d = obstacle_distance_on_path(c.points, window, half_width, min_s=front_overhang - 0.5)
        if d is None:
            continue
        gap = d - front_overhang
        if best is None or gap < best:
            best, best_id = gap, c.id
    return best_id, best


def brake_check(
    clusters: Sequence[Cluster],
    speed: float,
    window: np.ndarray,
    decel: float,
    cfg: BrakeConfig = BrakeConfig(),
) -> BrakeDecision:
    if decel <= 0:
        raise ValueError("decel must be positive")
    trigger, gap = nearest_in_corridor(clusters, window, cfg.corridor_half_width, cfg.front_overhang)
    if gap is None:
        return BrakeDecision(engage=False)
    gap = max(gap, 0.0)
    ttc = gap / max(speed, TTC_EPS)
    stopping = speed * speed / (2.0 * decel)
    engage = stopping + cfg.margin >= gap and ttc < cfg.ttc_threshold
    if engage:
        logger.debug("Emergency brake: gap %.2f m, speed %.2f m/s, ttc %.2f s", gap, speed, ttc)
    return BrakeDecision(engage=engage, time_to_collision=ttc, trigger=trigger, distance=gap)
