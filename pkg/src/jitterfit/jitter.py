"""The survey displacement (geomasking) model.

Published cluster coordinates are displaced from the true ones by drawing
an angle uniformly on (0, 2*pi) and a distance uniformly on (0, D), with D
the class-dependent maximum radius, redrawing until the displaced point
stays in the cluster's admin region.  Urban clusters use a single radius;
rural clusters use a short radius with high probability and a long one
with small probability, the branch being a property of the cluster (fixed
before any boundary redraws).

A uniform distance is equivalent to a planar density proportional to
1/r on the disc, which is what the quadrature weights integrate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geo import AdminRegion, PlanarPoint, contains

MAX_REJECTIONS = 10_000


@dataclass(frozen=True)
class JitterScheme:
    """Displacement radii in km and the long-branch probability.

    ``scale`` multiplies every radius (1 for the standard scheme, 4 for the
    inflated variant).  All radii equal to zero is the degenerate
    "no displacement" scheme.
    """

    urban_max: float = 2.0
    rural_inner: float = 5.0
    rural_outer: float = 10.0
    rural_outer_prob: float = 0.01
    scale: float = 1.0

    def __post_init__(self):
        if self.rural_inner < 0 or self.rural_outer < self.rural_inner:
            raise ValueError("need 0 <= rural_inner <= rural_outer")
        if not 0.0 <= self.rural_outer_prob <= 1.0:
            raise ValueError("rural_outer_prob must be in [0, 1]")
        if self.urban_max < 0 or self.scale <= 0:
            raise ValueError("urban_max must be >= 0 and scale > 0")

    @property
    def urban_radius(self) -> float:
        return self.urban_max * self.scale

    @property
    def rural_short(self) -> float:
        return self.rural_inner * self.scale

    @property
    def rural_long(self) -> float:
        return self.rural_outer * self.scale

    def max_radius(self, urban: bool) -> float:
        return self.urban_radius if urban else self.rural_long


PRESETS = {
    "dhs": JitterScheme(),
    "dhs4x": JitterScheme(scale=4.0),
    "none": JitterScheme(urban_max=0.0, rural_inner=0.0, rural_outer=0.0),
}


def preset(name: str) -> JitterScheme:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown jitter preset {name!r}; have {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class JitterDraw:
    jittered: PlanarPoint
    distance: float
    angle: float
    rejections: int


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_jitter(true_loc: PlanarPoint, urban: bool, scheme: JitterScheme,
                  region: AdminRegion | None, seed) -> JitterDraw:
    """Displace ``true_loc`` once under ``scheme``.

    ``region=None`` means the whole plane (no boundary rejection).  The
    rural long/short branch is drawn once; only angle and distance are
    redrawn when a proposal leaves the region.
    """
    rng = _as_rng(seed)
    if urban:
        d_max = scheme.urban_radius
    elif rng.random() < scheme.rural_outer_prob:
        d_max = scheme.rural_long
    else:
        d_max = scheme.rural_short

    if d_max == 0.0:
        return JitterDraw(jittered=true_loc, distance=0.0, angle=0.0, rejections=0)

    rejections = 0
    while True:
        angle = rng.uniform(0.0, 2.0 * math.pi)
        dist = rng.uniform(0.0, d_max)
        p = true_loc.offset(dist * math.cos(angle), dist * math.sin(angle))
        if region is None or contains(region, p):
            return JitterDraw(jittered=p, distance=dist, angle=angle, rejections=rejections)
        rejections += 1
        if rejections > MAX_REJECTIONS:
            raise RuntimeError(
                f"jitter rejection count exceeded {MAX_REJECTIONS}; "
                f"region {region.id!r} is degenerate around ({true_loc.x:.3f}, {true_loc.y:.3f})"
            )


def sample_jitter_many(true_loc: PlanarPoint, urban: bool, scheme: JitterScheme,
                       region: AdminRegion | None, n: int, seed) -> np.ndarray:
    """Vectorized version of :func:`sample_jitter` for Monte-Carlo work.

    Returns an (n, 2) array of displaced coordinates.  Branches are drawn
    per draw, then rejected proposals are redrawn in bulk.
    """
    rng = _as_rng(seed)
    if urban:
        d_max = np.full(n, scheme.urban_radius)
    else:
        outer = rng.random(n) < scheme.rural_outer_prob
        d_max = np.where(outer, scheme.rural_long, scheme.rural_short)

    out = np.empty((n, 2))
    out[:, 0] = true_loc.x
    out[:, 1] = true_loc.y
    pending = np.arange(n)[d_max > 0]
    rounds = 0
    while pending.size:
        angle = rng.uniform(0.0, 2.0 * math.pi, size=pending.size)
        dist = rng.uniform(0.0, 1.0, size=pending.size) * d_max[pending]
        px = true_loc.x + dist * np.cos(angle)
        py = true_loc.y + dist * np.sin(angle)
        if region is None:
            ok = np.ones(pending.size, dtype=bool)
        else:
            ok = region.contains_many(px, py)
        idx = pending[ok]
        out[idx, 0] = px[ok]
        out[idx, 1] = py[ok]
        pending = pending[~ok]
        rounds += 1
        if rounds > MAX_REJECTIONS:
            raise RuntimeError("jitter rejection rounds exceeded limit; degenerate region")
    return out


def jitter_density(offset: tuple[float, float], urban: bool, scheme: JitterScheme) -> float:
    """Unnormalized, region-free displacement density at a planar offset.

    Urban: 1/(2*pi*D*r) on r < D.  Rural: the two-branch mixture with the
    discontinuity at the short radius.  Consumers normalize per cluster;
    the overall scaling cancels in the posterior.  r = 0 returns inf (the
    density's integrable singularity; the quadrature's center point carries
    its mass analytically).
    """
    r = math.hypot(float(offset[0]), float(offset[1]))
    if urban:
        d = scheme.urban_radius
        if r >= d:
            return 0.0
        if r == 0.0:
            return math.inf
        return 1.0 / (2.0 * math.pi * d * r)

    short, long_ = scheme.rural_short, scheme.rural_long
    p = scheme.rural_outer_prob
    if r >= long_:
        return 0.0
    if r == 0.0:
        return math.inf
    dens = p / (2.0 * math.pi * long_ * r)
    if r < short:
        dens += (1.0 - p) / (2.0 * math.pi * short * r)
    return dens
