import math
import unittest
from pathlib import Path

import numpy as np

from app.services.map_ingest import ingest_osm
from app.services.world_model import (
    TARGET_NONE,
    TARGET_STATIC,
    Footprint,
    LanePath,
    StaticWorld,
    compile_world,
    footprint_distance,
    overlap,
    raycast,
    raycast_many,
    world_to_geojson,
)
from tests._support import FULL_SUITE, seeds

FIXTURE = Path(__file__).resolve().parents[1] / "fixtures" / "linden_min.osm"


def random_world(rng: np.random.Generator, n: int = 12) -> StaticWorld:
    a = rng.uniform(-40, 40, size=(n, 2))
    b = a + rng.uniform(-15, 15, size=(n, 2))
    segs = np.hstack([a, b])
    return StaticWorld(obstacle_segments=segs, lane_paths=(), stop_lines=(), crosswalks=(), bounds=(-60, -60, 60, 60))


def brute_force(world, agents, origin, angle, max_range):
    """Nearest hit by looping over every segment in order, walls first."""
    rows = [(tuple(s), TARGET_STATIC) for s in world.obstacle_segments.tolist()]
    for agent_id, fp in agents:
        rows += [(e, agent_id) for e in fp.edges()]
    dx, dy = math.cos(angle), math.sin(angle)
    best, target = float(max_range), TARGET_NONE
    best_t = math.inf
    for (x0, y0, x1, y1), code in rows:
        ex, ey = x1 - x0, y1 - y0
        wx, wy = x0 - origin[0], y0 - origin[1]
        denom = dx * ey - dy * ex
        if denom == 0.0:
            continue
        t = (wx * ey - wy * ex) / denom
        u = (wx * dy - wy * dx) / denom
        if t > 0.0 and 0.0 <= u <= 1.0 and t <= max_range and t < best_t:
            best_t, best, target = t, t, code
    return best, target


class TestRaycast(unittest.TestCase):

    def test_matches_brute_force(self):
        for seed in seeds(50, 8):
            rng = np.random.default_rng(seed)
            world = random_world(rng)
            agents = [(1, Footprint((rng.uniform(-20, 20), rng.uniform(-20, 20)), rng.uniform(-3, 3), 2.5, 1.0))]
            origin = (float(rng.uniform(-5, 5)), float(rng.uniform(-5, 5)))
            angles = rng.uniform(-math.pi, math.pi, size=1000 if FULL_SUITE else 200)
            fan = raycast_many(world, agents, origin, angles, 60.0)
            for i, a in enumerate(angles):
                dist, target = brute_force(world, agents, origin, float(a), 60.0)
                self.assertEqual(fan.distances[i], dist)
                self.assertEqual(int(fan.targets[i]), target)

    def test_single_ray(self):
        world = StaticWorld(np.array([[10.0, -5.0, 10.0, 5.0]]), (), (), (), (0, 0, 20, 20))
        hit = raycast(world, [], (0.0, 0.0), 0.0, 30.0)
        self.assertEqual(hit.target, "static")
        self.assertAlmostEqual(hit.distance, 10.0)
        miss = raycast(world, [], (0.0, 0.0), math.pi, 30.0)
        self.assertEqual(miss.target, "none")
        self.assertEqual(miss.distance, 30.0)

    def test_agent_occludes_wall(self):
        world = StaticWorld(np.array([[10.0, -5.0, 10.0, 5.0]]), (), (), (), (0, 0, 20, 20))
        car = Footprint((5.0, 0.0), 0.0, 1.0, 1.0)
        hit = raycast(world, [(7, car)], (0.0, 0.0), 0.0, 30.0)
        self.assertEqual(hit.target, 7)
        self.assertAlmostEqual(hit.distance, 4.0)

    def test_bad_range(self):
        world = random_world(np.random.default_rng(0))
        with self.assertRaises(ValueError):
            raycast_many(world, [], (0, 0), [0.0], 0.0)


class TestCompile(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        net, _ = ingest_osm(FIXTURE.read_bytes())
        cls.world = compile_world(net, lane_width=3.5)

    def test_lane_offsets(self):
        (east,) = self.world.lane_paths_for(10, 1)
        (west,) = self.world.lane_paths_for(10, -1)
        self.assertAlmostEqual(east.point_at(5.0)[1], -1.75, places=6)
        self.assertAlmostEqual(west.point_at(5.0)[1], 1.75, places=6)
        self.assertAlmostEqual(east.heading_at(1.0), 0.0, places=9)
        self.assertAlmostEqual(abs(west.heading_at(1.0)), math.pi, places=9)

    def test_building_walls_and_features(self):
        self.assertEqual(len(self.world.obstacle_segments), 4)
        self.assertEqual(len(self.world.stop_lines), 1)
        (cw,) = self.world.crosswalks
        self.assertAlmostEqual(cw.half_span, 3.5)
        self.assertAlmostEqual(cw.polygon().area, 3.5 * 7.0, places=6)
        kinds = {f["properties"]["kind"] for f in world_to_geojson(self.world)["features"]}
        self.assertEqual(kinds, {"obstacle", "lane", "crosswalk"})

    def test_concat_drops_overlap(self):
        a = LanePath([(0.0, 0.0), (10.0, 0.0)], speed_limit=5.0)
        b = LanePath([(8.0, 0.0), (10.0, 0.0), (20.0, 0.0)], speed_limit=3.0)
        joined = LanePath.concat([a, b])
        self.assertAlmostEqual(joined.length, 20.0)
        self.assertEqual(joined.speed_limit, 3.0)


class TestFootprints(unittest.TestCase):

    def test_gap_between_boxes(self):
        a = Footprint((0.0, 0.0), 0.0, 2.0, 1.0)
        b = Footprint((5.0, 0.0), 0.0, 2.0, 1.0)
        self.assertFalse(overlap(a, b))
        self.assertAlmostEqual(footprint_distance(a, b), 1.0)

    def test_touching_and_rotated_overlap(self):
        a = Footprint((0.0, 0.0), 0.0, 1.0, 1.0)
        self.assertTrue(overlap(a, Footprint((2.0, 0.0), 0.0, 1.0, 1.0)))
        rotated = Footprint((2.3, 0.0), math.pi / 4, 1.0, 1.0)
        self.assertTrue(overlap(a, rotated))
        self.assertEqual(footprint_distance(a, rotated), 0.0)
        apart = Footprint((2.5, 0.0), math.pi / 4, 1.0, 1.0)
        self.assertFalse(overlap(a, apart))
        self.assertAlmostEqual(footprint_distance(a, apart), 1.5 - math.sqrt(2.0), places=9)

    def test_point_distance_and_contains(self):
        fp = Footprint((0.0, 0.0), math.pi / 2, 2.0, 1.0)
        self.assertTrue(fp.contains_point(0.5, 1.9))
        self.assertAlmostEqual(fp.distance_to_point(0.0, 5.0), 3.0)
        with self.assertRaises(ValueError):
            Footprint((0, 0), 0.0, 0.0, 1.0)


if __name__ == "__main__":
    unittest.main()
