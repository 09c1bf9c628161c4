import io
import json
import math
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jitterfit.geo import (
    AdminRegion,
    ClusterRecord,
    PlanarPoint,
    contains,
    ingest_clusters,
    project,
    region_of,
    synthetic_grid_regions,
    unproject,
)

# one degree of arc on the 6371 km sphere
ARC_KM_PER_DEG = 6371.0 * math.pi / 180.0


class TestProject:
    def test_origin_maps_to_origin(self):
        p = project((36.8, -1.3), origin=(36.8, -1.3))
        assert p.x == 0.0 and p.y == 0.0

    def test_one_degree_lon_at_equator(self):
        p = project((37.8, 0.0), origin=(36.8, 0.0))
        assert p.x == pytest.approx(ARC_KM_PER_DEG, rel=1e-12)
        assert p.y == 0.0

    def test_one_degree_lat(self):
        p = project((36.8, -0.3), origin=(36.8, -1.3))
        assert p.y == pytest.approx(ARC_KM_PER_DEG, rel=1e-12)
        assert p.x == 0.0

    def test_lon_shrinks_with_latitude(self):
        p = project((37.8, 60.0), origin=(36.8, 60.0))
        assert p.x == pytest.approx(ARC_KM_PER_DEG * math.cos(math.radians(60.0)), rel=1e-12)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            project((math.nan, 0.0), origin=(0.0, 0.0))

    def test_rejects_polar_latitudes(self):
        with pytest.raises(ValueError):
            project((0.0, 89.5), origin=(0.0, 0.0))

    @given(st.floats(-30, 30), st.floats(-60, 60),
           st.floats(-29, 29), st.floats(-28, 28))
    def test_round_trip(self, lon0, lat0, dlon, dlat):
        origin = (lon0, lat0)
        lon, lat = lon0 + dlon, lat0 + dlat
        back = unproject(project((lon, lat), origin), origin)
        assert back[0] == pytest.approx(lon, abs=1e-9)
        assert back[1] == pytest.approx(lat, abs=1e-9)


def _winding_inside(point, ring):
    """Independent oracle: nonzero winding number test."""
    x, y = point
    wn = 0
    n = len(ring)
    for i in range(n):
        x1, y1 = ring[i]
        x2, y2 = ring[(i + 1) % n]
        if y1 <= y < y2 and (x2 - x1) * (y - y1) - (x - x1) * (y2 - y1) > 0:
            wn += 1
        elif y2 <= y < y1 and (x2 - x1) * (y - y1) - (x - x1) * (y2 - y1) < 0:
            wn -= 1
    return wn != 0


class TestContains:
    def test_inside_unit_square(self, unit_square):
        assert contains(unit_square, PlanarPoint(0.5, 0.5))

    def test_outside_unit_square(self, unit_square):
        assert not contains(unit_square, PlanarPoint(1.5, 0.5))

    def test_boundary_counts_as_inside(self, unit_square):
        assert contains(unit_square, PlanarPoint(1.0, 0.5))
        assert contains(unit_square, PlanarPoint(0.0, 0.0))

    def test_hole_matches_winding_oracle(self):
        outer = np.array([[0, 0], [4, 0], [4, 4], [0, 4]], float)
        hole = np.array([[1, 1], [3, 1], [3, 3], [1, 3]], float)
        reg = AdminRegion("donut", [outer, hole])
        in_hole = (2.0, 2.0)
        in_ring = (0.5, 2.0)
        assert _winding_inside(in_hole, outer) and _winding_inside(in_hole, hole)
        assert not contains(reg, PlanarPoint(*in_hole))
        assert _winding_inside(in_ring, outer) and not _winding_inside(in_ring, hole)
        assert contains(reg, PlanarPoint(*in_ring))

    def test_multipolygon_union(self):
        a = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
        b = np.array([[5, 5], [6, 5], [6, 6], [5, 6]], float)
        reg = AdminRegion("two", [a, b])
        assert contains(reg, PlanarPoint(0.5, 0.5))
        assert contains(reg, PlanarPoint(5.5, 5.5))
        assert not contains(reg, PlanarPoint(3.0, 3.0))

    def test_degenerate_polygon_rejected(self):
        with pytest.raises(ValueError):
            AdminRegion("bad", [np.array([[0, 0], [1, 1]], float)])

    @given(st.floats(-50, 50), st.floats(-50, 50),
           st.floats(-0.4, 1.4), st.floats(-0.4, 1.4))
    def test_translation_invariance(self, tx, ty, px, py):
        base = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
        reg0 = AdminRegion("a", [base])
        reg1 = AdminRegion("b", [base + [tx, ty]])
        assert contains(reg0, PlanarPoint(px, py)) == \
            contains(reg1, PlanarPoint(px + tx, py + ty))

    @given(st.integers(6, 40), st.integers(0, 10_000))
    def test_convex_polygon_contains_centroid(self, npts, seed):
        from scipy.spatial import ConvexHull

        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(npts, 2)) * [3.0, 1.5] + rng.normal(size=2)
        hull = ConvexHull(pts)
        ring = pts[hull.vertices]
        reg = AdminRegion("cvx", [ring])
        c = ring.mean(axis=0)
        assert contains(reg, PlanarPoint(*c))


GEOJSON = {
    "type": "FeatureCollection",
    "features": [
        {"type": "Feature", "properties": {"region": "A"},
         "geometry": {"type": "Polygon",
                      "coordinates": [[[0, 0], [0.5, 0], [0.5, 0.5], [0, 0.5], [0, 0]]]}},
        {"type": "Feature", "properties": {"region": "B"},
         "geometry": {"type": "Polygon",
                      "coordinates": [[[0.5, 0], [1, 0], [1, 0.5], [0.5, 0.5], [0.5, 0]]]}},
    ],
}


def _csv(rows):
    head = "id,lon,lat,urban,y,n,region\n"
    return io.StringIO(head + "\n".join(rows))


class TestIngest:
    def test_all_consistent(self):
        res = ingest_clusters(
            _csv(["c1,0.1,0.1,U,3,10,A", "c2,0.2,0.3,R,5,10,A", "c3,0.7,0.2,U,1,10,B"]),
            io.StringIO(json.dumps(GEOJSON)))
        assert len(res.records) == 3 and not res.dropped

    def test_outside_region_dropped(self):
        res = ingest_clusters(
            _csv(["c1,0.1,0.1,U,3,10,A", "c2,0.7,0.2,R,5,10,A", "c3,0.7,0.2,U,1,10,B"]),
            io.StringIO(json.dumps(GEOJSON)))
        assert len(res.records) == 2
        assert res.dropped == ["c2"]

    def test_missing_column(self):
        bad = io.StringIO("id,lon,lat,urban,y,region\nc1,0.1,0.1,U,3,A\n")
        with pytest.raises(ValueError, match="missing columns"):
            ingest_clusters(bad, io.StringIO(json.dumps(GEOJSON)))

    def test_unknown_region(self):
        with pytest.raises(ValueError, match="unknown region"):
            ingest_clusters(_csv(["c1,0.1,0.1,U,3,10,Z"]),
                            io.StringIO(json.dumps(GEOJSON)))

    def test_bad_urban_flag(self):
        with pytest.raises(ValueError, match="urban"):
            ingest_clusters(_csv(["c1,0.1,0.1,X,3,10,A"]),
                            io.StringIO(json.dumps(GEOJSON)))

    def test_bad_geometry(self):
        doc = {"type": "FeatureCollection",
               "features": [{"type": "Feature", "properties": {"region": "A"},
                             "geometry": {"type": "Point", "coordinates": [0, 0]}}]}
        with pytest.raises(ValueError, match="geometry"):
            ingest_clusters(_csv(["c1,0.1,0.1,U,3,10,A"]), io.StringIO(json.dumps(doc)))

    def test_planar_columns(self):
        doc = {"type": "FeatureCollection",
               "features": [{"type": "Feature", "properties": {"region": "A"},
                             "geometry": {"type": "Polygon",
                                          "coordinates": [[[0, 0], [10, 0], [10, 10],
                                                           [0, 10], [0, 0]]]}}]}
        csv_txt = io.StringIO("id,x_km,y_km,urban,y,n,region\nc1,5,5,U,3,10,A\n")
        res = ingest_clusters(csv_txt, io.StringIO(json.dumps(doc)), planar=True)
        assert res.records[0].location.x == 5.0

    @pytest.mark.skipif(
        not os.path.exists(os.environ.get("JITTERFIT_SURVEY_EXTRACT", "/nonexistent")),
        reason="restricted survey extract not available; with it, 1594 rows "
               "ingest to 1583 retained")
    def test_survey_extract_counts(self):
        path = os.environ["JITTERFIT_SURVEY_EXTRACT"]
        res = ingest_clusters(os.path.join(path, "clusters.csv"),
                              os.path.join(path, "counties.geojson"))
        assert len(res.records) + len(res.dropped) == 1594
        assert len(res.records) == 1583


class TestSyntheticRegions:
    def test_grid_count_and_lookup(self):
        regs = synthetic_grid_regions(100.0, 4)
        assert len(regs) == 16
        assert region_of(regs, PlanarPoint(10.0, 10.0)) == "r00"
        assert region_of(regs, PlanarPoint(99.0, 1.0)) == "r30"
        assert region_of(regs, PlanarPoint(-5.0, 0.0)) is None


class TestClusterRecord:
    def test_binomial_validation(self):
        rec = ClusterRecord("c", PlanarPoint(0, 0), True, 11, 10, "A")
        with pytest.raises(ValueError):
            rec.check_binomial()

    def test_bad_n(self):
        with pytest.raises(ValueError):
            ClusterRecord("c", PlanarPoint(0, 0), True, 0, 0, "A")
