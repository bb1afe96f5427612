import math
import unittest
from heapq import heappop, heappush

import numpy as np

from app.core.geometry import Polyline, Pose
from app.services.perception_planning import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    BrakeConfig,
    Cluster,
    GridConfig,
    OccupancyGrid,
    astar,
    astar_check,
    brake_check,
    build_grid,
    cluster_points,
    clusters_from_footprints,
    grid_to_pgm,
    inflate,
    obstacle_distance_on_path,
    path_window,
)
from app.services.sensors import PointCloud
from app.services.world_model import Footprint
from tests._support import seeds


def union_find_groups(pts: np.ndarray, tol: float, min_size: int) -> set[frozenset[int]]:
    parent = list(range(len(pts)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            if math.dist(pts[i], pts[j]) <= tol:
                parent[find(i)] = find(j)
    groups: dict[int, set[int]] = {}
    for i in range(len(pts)):
        groups.setdefault(find(i), set()).add(i)
    return {frozenset(g) for g in groups.values() if len(g) >= min_size}


def dijkstra_cost(blocked: np.ndarray, start, goal):
    height, width = blocked.shape

    def free(ix, iy):
        return 0 <= ix < width and 0 <= iy < height and not blocked[iy, ix]

    if not free(*goal):
        return None
    best = {start: 0.0}
    queue = [(0.0, start)]
    while queue:
        cost, curr = heappop(queue)
        if curr == goal:
            return cost
        if cost > best[curr]:
            continue
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if not dx and not dy:
                    continue
                nxt = (curr[0] + dx, curr[1] + dy)
                if not free(*nxt):
                    continue
                if dx and dy and not (free(curr[0] + dx, curr[1]) and free(curr[0], curr[1] + dy)):
                    continue
                c = cost + (math.sqrt(2.0) if dx and dy else 1.0)
                if c < best.get(nxt, math.inf):
                    best[nxt] = c
                    heappush(queue, (c, nxt))
    return None


class TestClustering(unittest.TestCase):

    def test_matches_union_find(self):
        for seed in seeds(50, 10):
            rng = np.random.default_rng(seed)
            centers = rng.uniform(-20, 20, size=(6, 2))
            pts = np.vstack([c + rng.normal(0, 0.4, size=(15, 2)) for c in centers] + [rng.uniform(-25, 25, size=(10, 2))])
            clusters = cluster_points(pts, 0.8, min_size=3)
            got = {frozenset(c.indices) for c in clusters}
            self.assertEqual(got, union_find_groups(pts, 0.8, 3))
            angles = [math.atan2(c.centroid[1], c.centroid[0]) for c in clusters]
            self.assertEqual(angles, sorted(angles))
            self.assertEqual([c.id for c in clusters], list(range(len(clusters))))

    def test_empty_and_bad_tolerance(self):
        self.assertEqual(cluster_points(np.zeros((0, 2)), 0.5), [])
        with self.assertRaises(ValueError):
            cluster_points(np.zeros((3, 2)), 0.0)

    def test_truth_clusters_in_ego_frame(self):
        fp = Footprint((10.0, 5.0), 0.0, 1.0, 1.0)
        (c,) = clusters_from_footprints([(4, fp)], Pose(10.0, 0.0, math.pi / 2))
        self.assertEqual((c.id, c.agent_id, c.source), (4, 4, "truth"))
        self.assertAlmostEqual(c.centroid[0], 5.0)
        self.assertAlmostEqual(c.centroid[1], 0.0, places=9)


class TestGrid(unittest.TestCase):

    def _cloud(self):
        return PointCloud(
            np.array([[5.2, 0.0]]),
            beam_angles=np.array([0.0, math.pi / 2, math.pi]),
            ranges=np.array([5.2, np.inf, np.nan]),
            max_range=20.0,
        )

    def test_ray_tracing(self):
        cloud = self._cloud()
        cluster = Cluster(id=0, points=np.array([[5.2, 0.0]]), centroid=(5.2, 0.0), radius=0.0)
        grid = build_grid(cloud, [cluster])
        self.assertEqual(grid.cells[grid.cell_of(5.2, 0.0)[::-1]], OCCUPIED)
        self.assertEqual(grid.cells[grid.cell_of(2.0, 0.0)[::-1]], FREE)
        self.assertEqual(grid.cells[grid.cell_of(10.0, 0.0)[::-1]], UNKNOWN)
        self.assertEqual(grid.cells[grid.cell_of(0.0, 10.0)[::-1]], FREE)
        self.assertEqual(grid.cells[grid.cell_of(-3.0, 0.0)[::-1]], UNKNOWN)

    def test_unclustered_return_is_unknown(self):
        grid = build_grid(self._cloud(), [])
        self.assertEqual(grid.cells[grid.cell_of(5.2, 0.0)[::-1]], UNKNOWN)
        self.assertEqual(grid.count(OCCUPIED), 0)

    def test_inflate_disk(self):
        grid = OccupancyGrid.blank(GridConfig(), fill=FREE)
        grid.cells[10, 10] = OCCUPIED
        self.assertEqual(int(inflate(grid, 1.0).sum()), 13)
        self.assertEqual(int(inflate(grid, 0.0).sum()), 1)

    def test_pgm_header(self):
        grid = OccupancyGrid.blank(GridConfig(width=3, height=2), fill=FREE)
        grid.cells[0, 0] = OCCUPIED
        self.assertEqual(grid_to_pgm(grid), "P2\n3 2\n2\n2 2 2\n0 2 2\n")


class TestAstar(unittest.TestCase):

    def test_cost_matches_dijkstra(self):
        for seed in seeds(100, 20):
            rng = np.random.default_rng(seed)
            blocked = rng.random((25, 25)) < 0.3
            blocked[0, 0] = False
            goal = (int(rng.integers(25)), int(rng.integers(25)))
            found = astar(blocked, (0, 0), goal)
            expected = dijkstra_cost(blocked, (0, 0), goal)
            if expected is None:
                self.assertIsNone(found)
                continue
            path, cost = found
            self.assertAlmostEqual(cost, expected, places=9)
            self.assertEqual((path[0], path[-1]), ((0, 0), goal))
            for (ax, ay), (bx, by) in zip(path, path[1:]):
                self.assertLessEqual(max(abs(ax - bx), abs(ay - by)), 1)
                self.assertFalse(blocked[by, bx])

    def _window(self):
        return np.column_stack([np.arange(0.0, 15.0, 0.25), np.zeros(60)])

    def test_clear_detour_blocked(self):
        grid = OccupancyGrid.blank(GridConfig(), fill=FREE)
        self.assertEqual(astar_check(grid, self._window()).status, "clear")

        ix, iy = grid.cell_of(8.0, 0.0)
        grid.cells[iy, ix] = OCCUPIED
        result = astar_check(grid, self._window())
        self.assertEqual(result.status, "detour")
        self.assertEqual(result.cells[0], grid.cell_of(0.0, 0.0))
        self.assertEqual(result.cells[-1], grid.cell_of(14.75, 0.0))
        self.assertGreater(result.cost, result.cells[-1][0] - result.cells[0][0])

        grid.cells[:, ix] = OCCUPIED
        self.assertEqual(astar_check(grid, self._window()).status, "blocked")


class TestBraking(unittest.TestCase):

    window = np.column_stack([np.linspace(0.0, 30.0, 121), np.zeros(121)])

    def _cluster(self, x, y):
        pts = np.array([[x, y - 0.5], [x, y], [x, y + 0.5]])
        return Cluster(id=5, points=pts, centroid=(x, y), radius=0.5)

    def test_distance_on_path(self):
        self.assertAlmostEqual(obstacle_distance_on_path(np.array([[10.0, 0.3], [12.0, 0.0]]), self.window, 1.0), 10.0)
        self.assertIsNone(obstacle_distance_on_path(np.array([[10.0, 3.0]]), self.window, 1.0))
        self.assertIsNone(obstacle_distance_on_path(np.array([[-2.0, 0.0]]), self.window, 1.0))

    def test_engages_when_stopping_distance_runs_out(self):
        cfg = BrakeConfig(front_overhang=4.0)
        fast = brake_check([self._cluster(10.0, 0.0)], 8.0, self.window, 6.0, cfg)
        self.assertTrue(fast.engage)
        self.assertEqual(fast.trigger, 5)
        self.assertAlmostEqual(fast.distance, 6.0)
        self.assertAlmostEqual(fast.time_to_collision, 0.75)
        self.assertFalse(brake_check([self._cluster(10.0, 0.0)], 2.0, self.window, 6.0, cfg).engage)
        self.assertIsNone(brake_check([self._cluster(10.0, 4.0)], 8.0, self.window, 6.0, cfg).trigger)

    def test_path_window_in_ego_frame(self):
        line = Polyline([(0.0, 0.0), (100.0, 0.0)])
        window = path_window(line, Pose(10.0, 0.0, 0.0), 10.0, 20.0)
        np.testing.assert_allclose(window[0], [0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(window[-1], [20.0, 0.0], atol=1e-12)
        tail = path_window(line, Pose(0.0, 0.0, 0.0), 95.0, 20.0)
        self.assertAlmostEqual(tail[-1][0], 100.0)


if __name__ == "__main__":
    unittest.main()
