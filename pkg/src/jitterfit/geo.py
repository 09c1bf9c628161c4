"""Planar coordinates, administrative regions, and cluster ingestion.

All downstream computation works in kilometers on a local planar chart.
Longitude/latitude input is projected with a local equirectangular map
about a chosen origin; at the few-degree extents this library targets,
metric distortion is far below the displacement radii being modelled.
UTM (or any other planar CRS) can be substituted by ingesting ``x_km`` /
``y_km`` columns directly.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class PlanarPoint:
    """A location on the local planar chart, in kilometers east/north."""

    x: float
    y: float

    def __post_init__(self):
        # normalize numpy scalars so serialization and equality are plain
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite planar coordinates ({self.x}, {self.y})")

    def offset(self, dx: float, dy: float) -> "PlanarPoint":
        return PlanarPoint(self.x + dx, self.y + dy)


def project(lonlat: tuple[float, float], origin: tuple[float, float]) -> PlanarPoint:
    """Project (lon, lat) degrees to local planar km about ``origin``.

    Equirectangular: x = R * cos(lat0) * dlon, y = R * dlat, with angles in
    radians and R = 6371 km.
    """
    lon, lat = float(lonlat[0]), float(lonlat[1])
    lon0, lat0 = float(origin[0]), float(origin[1])
    for v in (lon, lat, lon0, lat0):
        if not math.isfinite(v):
            raise ValueError("non-finite lon/lat input")
    if abs(lat) >= 89.0 or abs(lat0) >= 89.0:
        raise ValueError(f"latitude {max(abs(lat), abs(lat0))} out of supported range (|lat| < 89)")
    x = EARTH_RADIUS_KM * math.cos(math.radians(lat0)) * math.radians(lon - lon0)
    y = EARTH_RADIUS_KM * math.radians(lat - lat0)
    return PlanarPoint(x, y)


def unproject(p: PlanarPoint, origin: tuple[float, float]) -> tuple[float, float]:
    """Inverse of :func:`project`; returns (lon, lat) in degrees."""
    lon0, lat0 = float(origin[0]), float(origin[1])
    lon = lon0 + math.degrees(p.x / (EARTH_RADIUS_KM * math.cos(math.radians(lat0))))
    lat = lat0 + math.degrees(p.y / EARTH_RADIUS_KM)
    return lon, lat


class AdminRegion:
    """An administrative region as a set of polygon rings in planar km.

    Rings are (n, 2) float arrays holding polygon vertices.  Outer rings
    and holes are stored together; point membership uses even-odd parity
    across all rings, which handles holes and multi-polygons uniformly.
    Points exactly on an edge count as inside, so displaced coordinates
    sitting on a boundary are never spuriously rejected.
    """

    def __init__(self, id: str, rings: list[np.ndarray]):
        if not rings:
            raise ValueError(f"region {id!r} has no rings")
        clean = []
        for i, ring in enumerate(rings):
            arr = np.asarray(ring, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != 2:
                raise ValueError(f"region {id!r} ring {i} is not an (n, 2) vertex array")
            # drop an explicit closing vertex; closure is implicit
            if arr.shape[0] >= 2 and np.allclose(arr[0], arr[-1]):
                arr = arr[:-1]
            if arr.shape[0] < 3:
                raise ValueError(f"region {id!r} ring {i} is degenerate (<3 vertices)")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"region {id!r} ring {i} has non-finite vertices")
            clean.append(arr)
        self.id = str(id)
        self.rings = clean
        # edge arrays cached for vectorized membership tests
        ax, ay, bx, by = [], [], [], []
        for arr in clean:
            nxt = np.roll(arr, -1, axis=0)
            ax.append(arr[:, 0])
            ay.append(arr[:, 1])
            bx.append(nxt[:, 0])
            by.append(nxt[:, 1])
        self._ax = np.concatenate(ax)
        self._ay = np.concatenate(ay)
        self._bx = np.concatenate(bx)
        self._by = np.concatenate(by)

    def __repr__(self):
        return f"AdminRegion(id={self.id!r}, rings={len(self.rings)})"

    def bounds(self) -> tuple[float, float, float, float]:
        xs = np.concatenate([r[:, 0] for r in self.rings])
        ys = np.concatenate([r[:, 1] for r in self.rings])
        return float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max())

    def contains_many(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Even-odd membership test for arrays of coordinates."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ax, ay, bx, by = self._ax, self._ay, self._bx, self._by
        xs = x[..., None]
        ys = y[..., None]
        # ray-cast east: edge straddles the horizontal line through the point
        straddle = (ay > ys) != (by > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = (bx - ax) * (ys - ay) / (by - ay) + ax
        crossings = straddle & (xs < x_cross)
        inside = crossings.sum(axis=-1) % 2 == 1

        # on-edge points count as inside
        ex, ey = bx - ax, by - ay
        px, py = xs - ax, ys - ay
        seg_len2 = ex * ex + ey * ey
        cross = ex * py - ey * px
        dot = ex * px + ey * py
        scale = np.maximum(seg_len2, 1e-300)
        on_edge = (np.abs(cross) <= 1e-9 * np.sqrt(scale)) & (dot >= 0) & (dot <= seg_len2)
        return inside | on_edge.any(axis=-1)

    def distance_to_boundary(self, p: PlanarPoint) -> float:
        """Distance from ``p`` to the nearest ring edge (sign-free)."""
        ex, ey = self._bx - self._ax, self._by - self._ay
        px, py = p.x - self._ax, p.y - self._ay
        seg_len2 = np.maximum(ex * ex + ey * ey, 1e-300)
        t = np.clip((ex * px + ey * py) / seg_len2, 0.0, 1.0)
        dx = px - t * ex
        dy = py - t * ey
        return float(np.sqrt(np.min(dx * dx + dy * dy)))


def contains(region: AdminRegion, p: PlanarPoint) -> bool:
    """True if ``p`` lies inside ``region`` (boundary counts as inside)."""
    return bool(region.contains_many(np.array([p.x]), np.array([p.y]))[0])


@dataclass(frozen=True)
class ClusterRecord:
    """One observed survey cluster.

    ``location`` is the published (displaced) coordinate.  ``y`` holds the
    response: a success count for binomial data, or a real-valued response
    for the Gaussian observation model (in which case the 0 <= y <= n count
    constraint does not apply and ``n`` is ignored).
    """

    id: str
    location: PlanarPoint
    urban: bool
    y: float
    n: int
    region: str

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"cluster {self.id}: trial count n={self.n} must be >= 1")
        if not math.isfinite(self.y):
            raise ValueError(f"cluster {self.id}: non-finite response")

    def check_binomial(self):
        if not (0 <= self.y <= self.n) or self.y != int(self.y):
            raise ValueError(
                f"cluster {self.id}: y={self.y} must be an integer in [0, n={self.n}]"
            )


@dataclass
class IngestResult:
    records: list[ClusterRecord]
    regions: dict[str, AdminRegion]
    dropped: list[str] = field(default_factory=list)
    origin: tuple[float, float] | None = None


def _rings_from_geometry(geom: dict, feature_label: str) -> list[np.ndarray]:
    gtype = geom.get("type")
    coords = geom.get("coordinates")
    if gtype == "Polygon":
        polys = [coords]
    elif gtype == "MultiPolygon":
        polys = coords
    else:
        raise ValueError(f"{feature_label}: unsupported geometry type {gtype!r}")
    try:
        return [np.asarray(ring, dtype=float) for poly in polys for ring in poly]
    except (TypeError, ValueError) as e:
        raise ValueError(f"{feature_label}: unparsable geometry ({e})") from e


def load_regions(boundary_file, planar: bool = False,
                 origin: tuple[float, float] | None = None
                 ) -> tuple[dict[str, AdminRegion], tuple[float, float] | None]:
    """Read a GeoJSON FeatureCollection of admin regions.

    Each feature must carry a ``region`` property.  With ``planar=False``
    coordinates are (lon, lat) degrees and are projected about ``origin``
    (default: mean vertex of all features).  With ``planar=True``
    coordinates are taken as km directly.
    """
    if hasattr(boundary_file, "read"):
        doc = json.load(boundary_file)
    else:
        with open(boundary_file) as f:
            doc = json.load(f)
    features = doc.get("features")
    if features is None:
        raise ValueError("boundary file is not a GeoJSON FeatureCollection")

    raw = []
    for i, feat in enumerate(features):
        props = feat.get("properties") or {}
        rid = props.get("region")
        if rid is None:
            raise ValueError(f"feature {i}: missing 'region' property")
        rings = _rings_from_geometry(feat.get("geometry") or {}, f"feature {i} ({rid})")
        raw.append((str(rid), rings))

    if planar:
        origin = None
    elif origin is None:
        allv = np.concatenate([r for _, rings in raw for r in rings])
        origin = (float(allv[:, 0].mean()), float(allv[:, 1].mean()))

    regions = {}
    for rid, rings in raw:
        if not planar:
            proj = []
            for ring in rings:
                pts = [project((lon, lat), origin) for lon, lat in ring]
                proj.append(np.array([[p.x, p.y] for p in pts]))
            rings = proj
        if rid in regions:
            regions[rid] = AdminRegion(rid, regions[rid].rings + list(rings))
        else:
            regions[rid] = AdminRegion(rid, list(rings))
    return regions, origin


_CSV_COLUMNS_LONLAT = {"id", "lon", "lat", "urban", "y", "n", "region"}
_CSV_COLUMNS_PLANAR = {"id", "x_km", "y_km", "urban", "y", "n", "region"}


def ingest_clusters(csv_file, boundary_file, planar: bool = False) -> IngestResult:
    """Read clusters and regions; drop clusters outside their declared region.

    Mirrors the data-cleaning step in which clusters whose published
    coordinates do not fall in their designated region are excluded.
    Dropped ids are returned (and logged), not raised.
    """
    regions, origin = load_regions(boundary_file, planar=planar)

    if hasattr(csv_file, "read"):
        reader = csv.DictReader(csv_file)
    else:
        reader = csv.DictReader(io.StringIO(open(csv_file).read()))
    cols = set(reader.fieldnames or [])
    want = _CSV_COLUMNS_PLANAR if planar else _CSV_COLUMNS_LONLAT
    missing = want - cols
    if missing:
        raise ValueError(f"cluster CSV missing columns: {sorted(missing)}")

    records, dropped = [], []
    for rownum, row in enumerate(reader, start=2):
        rid = row["region"]
        if rid not in regions:
            raise ValueError(f"row {rownum} (id={row['id']}): unknown region {rid!r}")
        urban = row["urban"].strip().upper()
        if urban not in ("U", "R"):
            raise ValueError(f"row {rownum} (id={row['id']}): urban must be U or R, got {row['urban']!r}")
        if planar:
            loc = PlanarPoint(float(row["x_km"]), float(row["y_km"]))
        else:
            loc = project((float(row["lon"]), float(row["lat"])), origin)
        rec = ClusterRecord(
            id=row["id"], location=loc, urban=(urban == "U"),
            y=float(row["y"]), n=int(row["n"]), region=rid,
        )
        rec.check_binomial()
        if contains(regions[rid], loc):
            records.append(rec)
        else:
            dropped.append(rec.id)

    if dropped:
        log.info("dropped %d clusters outside their declared region: %s",
                 len(dropped), ", ".join(dropped[:10]))
    return IngestResult(records=records, regions=regions, dropped=dropped, origin=origin)


def synthetic_grid_regions(extent_km: float, n_side: int) -> dict[str, AdminRegion]:
    """A square domain split into an ``n_side`` x ``n_side`` grid of regions.

    Used as the default geography for simulation studies so that boundary
    effects are exercised without real shapefiles.  Region ids are
    ``r{i}{j}`` with the lower-left cell at ``r00``.
    """
    cell = extent_km / n_side
    regions = {}
    for i in range(n_side):
        for j in range(n_side):
            x0, y0 = i * cell, j * cell
            ring = np.array([[x0, y0], [x0 + cell, y0], [x0 + cell, y0 + cell], [x0, y0 + cell]])
            rid = f"r{i}{j}"
            regions[rid] = AdminRegion(rid, [ring])
    return regions


def region_of(regions: dict[str, AdminRegion], p: PlanarPoint) -> str | None:
    """Id of the first region containing ``p``, or None."""
    for rid, reg in regions.items():
        if contains(reg, p):
            return rid
    return None
