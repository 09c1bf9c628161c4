"""Polar quadrature for integrating over possible true cluster locations.

Around each published coordinate we place a center point plus concentric
rings of angularly equidistant points.  Ring radii are chosen so that plain
(interior) integration weights come out equal within each branch of the
displacement density: urban rings split the disc into equal-mass annuli;
rural rings do the same separately inside and outside the density's
discontinuity radius.  Each point sits at the center of mass of its annular
sector under the 1/r displacement density, which shrinks the radial
midpoint by sqrt(2*(1 - cos(da)))/da for sector width da.

Weights of sectors cut by an admin boundary are corrected by subdividing
the sector into a 10x10 polar grid of secondary points and keeping the
fraction that falls inside the region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geo import AdminRegion, ClusterRecord, PlanarPoint, contains
from .jitter import JitterScheme

POINTS_PER_RING = 15
URBAN_RINGS = 5
RURAL_INNER_RINGS = 5
RURAL_OUTER_RINGS = 5
SECONDARY_DIV = 10


def com_shrink(delta_a: float) -> float:
    """Radial shrink factor placing a sector's point at its center of mass.

    For the 1/r displacement density, the mass center of the annular sector
    [r_lo, r_hi] x [a, a + delta_a] sits at radius
    (r_lo + r_hi)/2 * sqrt(2*(1 - cos(delta_a)))/delta_a.
    """
    if delta_a == 0.0:
        return 1.0
    return math.sqrt(2.0 * (1.0 - math.cos(delta_a))) / delta_a


@dataclass(frozen=True)
class RingSpec:
    """One quadrature ring: radial band, point count, angular layout."""

    index: int            # 1-based ring number
    m: int                # points in this ring
    r_lo: float           # km
    r_hi: float           # km
    angular_offset: float # radians added to the sector boundaries
    com_radius: float     # km, radius at which points are placed

    def point_angles(self) -> np.ndarray:
        """Angles of the ring's points (sector midpoints)."""
        if self.index == 1:
            return np.zeros(1)
        k = np.arange(self.m)
        da = 2.0 * math.pi / self.m
        return self.angular_offset + da * (k + 0.5)


def _cumulative_radii(total: float, m_per_ring: list[int]) -> list[float]:
    # radii proportional to cumulative point counts -> equal per-point mass
    csum = np.cumsum(m_per_ring)
    return [total * c / csum[-1] for c in csum]


def build_rings(urban: bool, scheme: JitterScheme) -> list[RingSpec]:
    """Ring layout for one cluster class under ``scheme``.

    Urban: 5 rings (1 + 4*15 = 61 points) out to the urban radius.
    Rural: 5 inner rings out to the short radius plus 5 outer rings out to
    the long radius (1 + 9*15 = 136 points).  The angular boundaries of
    rings 5, 7, 9 are interspersed by half a sector width.
    """
    if urban:
        m_per_ring = [1] + [POINTS_PER_RING] * (URBAN_RINGS - 1)
        radii = _cumulative_radii(scheme.urban_radius, m_per_ring)
    else:
        m_inner = [1] + [POINTS_PER_RING] * (RURAL_INNER_RINGS - 1)
        inner = _cumulative_radii(scheme.rural_short, m_inner)
        m_outer = [POINTS_PER_RING] * RURAL_OUTER_RINGS
        span = scheme.rural_long - scheme.rural_short
        outer = [scheme.rural_short + r for r in _cumulative_radii(span, m_outer)]
        m_per_ring = m_inner + m_outer
        radii = inner + outer

    rings = []
    r_lo = 0.0
    for j, (m, r_hi) in enumerate(zip(m_per_ring, radii), start=1):
        da = 2.0 * math.pi / m
        offset = math.pi / m if (j % 2 == 1 and j >= 5) else 0.0
        com = 0.0 if j == 1 else 0.5 * (r_lo + r_hi) * com_shrink(da)
        rings.append(RingSpec(index=j, m=m, r_lo=r_lo, r_hi=r_hi,
                              angular_offset=offset, com_radius=com))
        r_lo = r_hi
    return rings


def base_weights(rings: list[RingSpec], urban: bool, scheme: JitterScheme) -> np.ndarray:
    """Interior (boundary-free) per-point weights, normalized to sum 1.

    Point order matches :func:`build_rings`: the center point, then each
    ring's points in angular order.
    """
    per_ring = []
    for ring in rings:
        dr = ring.r_hi - ring.r_lo
        if urban:
            w = (dr / scheme.urban_radius) / ring.m
        else:
            short, long_ = scheme.rural_short, scheme.rural_long
            p = scheme.rural_outer_prob
            if ring.r_hi <= short + 1e-12:
                factor = (1.0 - p) / short + p / long_
            else:
                factor = p / long_
            w = dr * factor / ring.m
        per_ring.append(np.full(ring.m, w))
    w = np.concatenate(per_ring)
    return w / w.sum()


@dataclass
class IntegrationScheme:
    """All quadrature data for one cluster.

    ``weights`` are boundary-corrected and sum to 1; ``uncorrected_weights``
    are the interior weights kept for diagnostics.  ``ring_index`` / ``k``
    label each point by ring number and position within the ring.
    """

    cluster: str
    points: np.ndarray               # (n, 2) planar km
    weights: np.ndarray              # (n,)
    rings: list[RingSpec]
    uncorrected_weights: np.ndarray  # (n,)
    ring_index: np.ndarray           # (n,) int
    k: np.ndarray                    # (n,) int

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def validate(self):
        expected = 1 + sum(r.m for r in self.rings if r.index > 1)
        if self.n_points != expected and len(self.rings) > 0:
            raise AssertionError("point count does not match ring layout")
        if np.any(self.weights < 0):
            raise AssertionError("negative quadrature weight")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise AssertionError("weights do not sum to 1")


def _place_points(center: PlanarPoint, rings: list[RingSpec]):
    pts, ring_idx, ks = [], [], []
    for ring in rings:
        angles = ring.point_angles()
        r = ring.com_radius
        for k, a in enumerate(angles):
            pts.append((center.x + r * math.cos(a), center.y + r * math.sin(a)))
            ring_idx.append(ring.index)
            ks.append(k)
    return np.array(pts), np.array(ring_idx), np.array(ks)


def _secondary_points(center: PlanarPoint, ring: RingSpec, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Centers of mass of the 10x10 polar subdivision of one sector."""
    da = 2.0 * math.pi / ring.m
    a_lo = ring.angular_offset + da * k
    dr = (ring.r_hi - ring.r_lo) / SECONDARY_DIV
    sub_da = da / SECONDARY_DIV
    shrink = com_shrink(sub_da)
    r_mid = (ring.r_lo + dr * (np.arange(SECONDARY_DIV) + 0.5)) * shrink
    a_mid = a_lo + sub_da * (np.arange(SECONDARY_DIV) + 0.5)
    rr, aa = np.meshgrid(r_mid, a_mid, indexing="ij")
    return center.x + rr.ravel() * np.cos(aa.ravel()), center.y + rr.ravel() * np.sin(aa.ravel())


def boundary_correct(scheme_pts: IntegrationScheme, cluster: ClusterRecord,
                     region: AdminRegion | None, jitter: JitterScheme) -> IntegrationScheme:
    """Rescale weights of sectors that stick out of the cluster's region.

    Each sector's weight is multiplied by the fraction of its 100 secondary
    center-of-mass points lying inside the region (treating all secondary
    points of a sector as equally weighted), then the scheme is
    renormalized.  The center point is scaled by the membership of the
    published coordinate itself, which holds by precondition.
    """
    if region is None:
        return scheme_pts
    if not contains(region, cluster.location):
        raise ValueError(f"cluster {cluster.id} is not inside region {region.id}")

    max_r = max((r.r_hi for r in scheme_pts.rings), default=0.0)
    if scheme_pts.n_points <= 1 or region.distance_to_boundary(cluster.location) > max_r:
        return scheme_pts

    factors = np.ones(scheme_pts.n_points)
    clearance = region.distance_to_boundary(cluster.location)
    by_ring = {r.index: r for r in scheme_pts.rings}
    for i in range(scheme_pts.n_points):
        ring = by_ring[int(scheme_pts.ring_index[i])]
        if ring.index == 1:
            continue  # center: membership of the published point, true by precondition
        if ring.r_hi <= clearance:
            continue  # whole ring is clear of the boundary
        sx, sy = _secondary_points(cluster.location, ring, int(scheme_pts.k[i]))
        inside = region.contains_many(sx, sy)
        factors[i] = inside.sum() / inside.size

    corrected = scheme_pts.uncorrected_weights * factors
    total = corrected.sum()
    if total <= 0.0:
        raise ValueError(f"cluster {cluster.id}: all quadrature weights vanished "
                         f"after boundary correction")
    return replace(scheme_pts, weights=corrected / total)


def single_point_scheme(cluster: ClusterRecord) -> IntegrationScheme:
    """Degenerate scheme: all mass at the published coordinate."""
    pts = np.array([[cluster.location.x, cluster.location.y]])
    w = np.ones(1)
    return IntegrationScheme(cluster=cluster.id, points=pts, weights=w,
                             rings=[], uncorrected_weights=w.copy(),
                             ring_index=np.array([1]), k=np.array([0]))


def build_scheme(cluster: ClusterRecord, region: AdminRegion | None,
                 jitter: JitterScheme) -> IntegrationScheme:
    """Full per-cluster quadrature: rings, placement, weights, correction."""
    if jitter.max_radius(cluster.urban) == 0.0:
        return single_point_scheme(cluster)
    rings = build_rings(cluster.urban, jitter)
    pts, ring_idx, ks = _place_points(cluster.location, rings)
    w = base_weights(rings, cluster.urban, jitter)
    scheme = IntegrationScheme(cluster=cluster.id, points=pts, weights=w.copy(),
                               rings=rings, uncorrected_weights=w,
                               ring_index=ring_idx, k=ks)
    return boundary_correct(scheme, cluster, region, jitter)


def scheme_rows(scheme: IntegrationScheme):
    """Rows for the CSV dump: (cluster, ring, k, x, y, weight, weight_uncorrected)."""
    for i in range(scheme.n_points):
        yield (scheme.cluster, int(scheme.ring_index[i]), int(scheme.k[i]),
               float(scheme.points[i, 0]), float(scheme.points[i, 1]),
               float(scheme.weights[i]), float(scheme.uncorrected_weights[i]))
