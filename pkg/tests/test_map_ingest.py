import math
import unittest
from pathlib import Path

from app.core.errors import DanglingReferenceError, EmptyNetworkError, OsmParseError, ProjectionDomainError
from app.services.formats import network_from_json, network_to_json
from app.services.map_ingest import (
    EARTH_RADIUS,
    Projection,
    ingest_osm,
    network_to_geojson,
    parse_maxspeed,
    parse_osm,
    project,
    unproject,
)

FIXTURE = Path(__file__).resolve().parents[1] / "fixtures" / "linden_min.osm"
REF_LAT, REF_LON = 40.622, -74.2445


def osm(body: str, bounds: str = "") -> str:
    return f'<?xml version="1.0"?>\n<osm version="0.6">{bounds}{body}</osm>'


SQUARE_WAY = (
    '<node id="1" lat="0.0" lon="0.0"/><node id="2" lat="0.0" lon="0.001"/>'
    '<node id="3" lat="0.001" lon="0.001"/><node id="4" lat="0.001" lon="0.0"/>'
    '<way id="9"><nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="4"/>'
    '<tag k="highway" v="residential"/></way>'
)


class TestParse(unittest.TestCase):

    def test_four_node_way(self):
        doc = parse_osm(osm(SQUARE_WAY))
        self.assertEqual(len(doc.nodes), 4)
        self.assertEqual(len(doc.ways), 1)
        self.assertEqual(doc.ways[0].tags["highway"], "residential")

    def test_malformed_xml_reports_line(self):
        with self.assertRaises(OsmParseError) as ctx:
            parse_osm('<?xml version="1.0"?>\n<osm>\n<node id="1" lat="0" lon="0">\n</osm>')
        self.assertIsNotNone(ctx.exception.line)

    def test_missing_attribute(self):
        with self.assertRaises(OsmParseError):
            parse_osm(osm('<node id="1" lat="0"/>'))

    def test_dangling_reference_strict_and_lenient(self):
        body = '<node id="1" lat="0" lon="0"/><way id="5"><nd ref="1"/><nd ref="77"/><tag k="highway" v="service"/></way>'
        with self.assertRaises(DanglingReferenceError) as ctx:
            parse_osm(osm(body))
        self.assertEqual(ctx.exception.missing_ids, [77])
        doc = parse_osm(osm(body), strict=False)
        self.assertEqual(doc.ways, ())
        self.assertEqual(doc.dangling_ways[0].missing_ids, (77,))


class TestProjection(unittest.TestCase):

    def test_round_trip(self):
        proj = Projection(REF_LAT, REF_LON)
        for lat, lon in ((40.6201, -74.2466), (40.6239, -74.2421), (REF_LAT, REF_LON)):
            back = unproject(*project(lat, lon, proj), proj)
            self.assertAlmostEqual(back[0], lat, places=10)
            self.assertAlmostEqual(back[1], lon, places=10)

    def test_domain(self):
        proj = Projection(0.0, 0.0)
        with self.assertRaises(ProjectionDomainError):
            project(91.0, 0.0, proj)
        with self.assertRaises(ProjectionDomainError):
            project(0.0, float("nan"), proj)
        with self.assertRaises(ProjectionDomainError):
            Projection(90.0, 0.0)

    def test_maxspeed_units(self):
        self.assertAlmostEqual(parse_maxspeed("25 mph"), 25 * 0.44704)
        self.assertAlmostEqual(parse_maxspeed("36"), 10.0)
        self.assertAlmostEqual(parse_maxspeed("54 km/h"), 15.0)
        self.assertIsNone(parse_maxspeed("fast"))
        self.assertIsNone(parse_maxspeed(None))


class TestLindenFixture(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.text = FIXTURE.read_bytes()
        cls.net, cls.issues = ingest_osm(cls.text)

    def test_clean(self):
        self.assertEqual(self.issues, [])

    def test_counts(self):
        doc = parse_osm(self.text)
        self.assertEqual(len(doc.nodes), 11)
        self.assertEqual(len(doc.ways), 3)
        self.assertEqual(len(self.net.segments), 2)
        self.assertEqual(len(self.net.buildings), 1)
        self.assertEqual([i.id for i in self.net.intersections], [2])

    def test_segment_lengths_match_formula(self):
        ns = self.net.segment(11)
        expected_ns = EARTH_RADIUS * math.radians(40.623 - 40.621)
        self.assertAlmostEqual(ns.length, expected_ns, delta=1e-6)
        ew = self.net.segment(10)
        expected_ew = EARTH_RADIUS * math.cos(math.radians(REF_LAT)) * math.radians(0.003)
        self.assertAlmostEqual(ew.length, expected_ew, delta=1e-6)

    def test_tags(self):
        ew, ns = self.net.segment(10), self.net.segment(11)
        self.assertEqual(ew.lane_count, 2)
        self.assertAlmostEqual(ew.speed_limit, 25 * 0.44704)
        self.assertAlmostEqual(ns.speed_limit, 40 / 3.6)
        self.assertFalse(ew.oneway)

    def test_stop_line_and_crosswalk(self):
        (stop,) = self.net.stop_lines
        self.assertEqual((stop.segment_id, stop.node_id, stop.direction, stop.intersection_id), (10, 6, 1, 2))
        scale = EARTH_RADIUS * math.cos(math.radians(REF_LAT))
        self.assertAlmostEqual(stop.arclength, scale * math.radians(0.0013), delta=1e-6)
        self.assertEqual(self.net.intersection(2).control, "stop_sign")
        (cw,) = self.net.crosswalks
        self.assertEqual(cw.width, 3.5)

    def test_bounds_from_document(self):
        min_x, min_y, max_x, max_y = self.net.bounds
        self.assertLess(min_x, 0.0)
        self.assertGreater(max_x, 0.0)
        self.assertAlmostEqual(max_y - min_y, EARTH_RADIUS * math.radians(0.004), delta=1e-6)

    def test_json_round_trip_is_byte_identical(self):
        text = network_to_json(self.net)
        self.assertEqual(network_to_json(network_from_json(text)), text)

    def test_geojson_in_lon_lat(self):
        gj = network_to_geojson(self.net)
        seg = next(f for f in gj["features"] if f["properties"].get("id") == 11)
        lon, lat = seg["geometry"]["coordinates"][0]
        self.assertAlmostEqual(lat, 40.621, places=9)
        self.assertAlmostEqual(lon, -74.2445, places=9)


class TestValidation(unittest.TestCase):

    def test_missing_tags_are_defaulted_and_reported(self):
        net, issues = ingest_osm(osm(SQUARE_WAY))
        kinds = sorted(i.kind for i in issues)
        self.assertEqual(kinds, ["missing_lane_count", "missing_speed_limit"])
        self.assertEqual(net.segments[0].lane_count, 2)

    def test_unclosed_and_self_intersecting_buildings(self):
        body = SQUARE_WAY.replace('<tag k="highway" v="residential"/>',
                                  '<tag k="highway" v="residential"/><tag k="lanes" v="2"/><tag k="maxspeed" v="30"/>')
        body += '<node id="5" lat="0.0003" lon="0.0003"/><node id="6" lat="0.0006" lon="0.0006"/>'
        body += '<node id="7" lat="0.0003" lon="0.0006"/><node id="8" lat="0.0006" lon="0.0003"/>'
        body += '<way id="20"><nd ref="5"/><nd ref="7"/><nd ref="6"/><tag k="building" v="yes"/></way>'
        body += ('<way id="21"><nd ref="5"/><nd ref="6"/><nd ref="7"/><nd ref="8"/><nd ref="5"/>'
                 '<tag k="building" v="yes"/></way>')
        _, issues = ingest_osm(osm(body))
        found = {(i.kind, i.subject_id) for i in issues}
        self.assertIn(("unclosed_building", 20), found)
        self.assertIn(("self_intersecting_building", 21), found)

    def test_oneway_reverse(self):
        body = SQUARE_WAY.replace('<tag k="highway" v="residential"/>',
                                  '<tag k="highway" v="residential"/><tag k="oneway" v="-1"/>')
        net, _ = ingest_osm(osm(body))
        seg = net.segments[0]
        self.assertTrue(seg.oneway)
        self.assertEqual(seg.node_ids, (4, 3, 2, 1))

    def test_no_highways(self):
        with self.assertRaises(EmptyNetworkError):
            ingest_osm(osm('<node id="1" lat="0" lon="0"/><node id="2" lat="0" lon="0.001"/>'
                           '<way id="3"><nd ref="1"/><nd ref="2"/><tag k="building" v="yes"/></way>'))


if __name__ == "__main__":
    unittest.main()
