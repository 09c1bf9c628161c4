#!/usr/bin/env python3
"""Print the reference quadrature layout: per-ring displacement, point
count, and interior weight for the standard displacement radii."""

from jitterfit.jitter import preset
from jitterfit.quadrature import base_weights, build_rings


def main():
    scheme = preset("dhs")
    print(f"{'class':<6} {'ring':>4} {'displacement (km)':>18} "
          f"{'points':>7} {'weight':>9}")
    for label, urban in (("urban", True), ("rural", False)):
        rings = build_rings(urban, scheme)
        weights = base_weights(rings, urban, scheme)
        pos = 0
        for ring in rings:
            w = weights[pos]
            pos += ring.m
            print(f"{label:<6} {ring.index:>4} {ring.com_radius:>18.2f} "
                  f"{ring.m:>7} {w:>9.4f}")


if __name__ == "__main__":
    main()
