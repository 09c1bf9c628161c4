"""Matern covariance, tent-basis latent field, and GRF simulation.

The latent spatial effect is a linear combination of bilinear tent
functions on a regular knot grid, with the knot-weight covariance set to
the Matern covariance evaluated between knots (a fixed-rank field, dense
at desk scale).  Evaluating the field at a point touches at most the four
knots of the enclosing cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import kv

JITTER_REL = 1e-8  # diagonal lift applied to knot covariances, times sigma2


@dataclass(frozen=True)
class MaternParams:
    """Marginal variance, spatial range (km), and smoothness (fixed at 1)."""

    sigma2: float
    range: float
    nu: float = 1.0

    def __post_init__(self):
        if self.sigma2 <= 0 or self.range <= 0:
            raise ValueError("sigma2 and range must be positive")
        if self.nu != 1.0:
            raise ValueError("only smoothness nu = 1 is supported")

    @property
    def kappa(self) -> float:
        # sqrt(8*nu)/range: the range convention under which correlation
        # drops to ~0.14 at distance `range`
        return math.sqrt(8.0 * self.nu) / self.range


def matern_cov(d, p: MaternParams):
    """Matern covariance at distance ``d`` km (scalar or array), nu = 1."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    x = p.kappa * d
    out = np.empty_like(x)
    small = x < 1e-12
    with np.errstate(invalid="ignore", over="ignore"):
        out[~small] = p.sigma2 * x[~small] * kv(1, x[~small])
    out[small] = p.sigma2
    out[~np.isfinite(out)] = 0.0  # kv underflow at huge distances
    return out if out.ndim else float(out)


def pairwise_cov(a: np.ndarray, b: np.ndarray, p: MaternParams) -> np.ndarray:
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return matern_cov(d, p)


class BasisField:
    """Bilinear tent basis on a regular grid of knots.

    Knots are ordered row-major: knot (i, j) -> index i*ny + j with i the
    x index.  Basis values at any interior point are the four bilinear
    interpolation weights of the enclosing cell (a partition of unity).
    """

    def __init__(self, x0: float, y0: float, dx: float, dy: float, nx: int, ny: int):
        if nx < 2 or ny < 2 or dx <= 0 or dy <= 0:
            raise ValueError("grid needs nx, ny >= 2 and positive spacing")
        self.x0, self.y0, self.dx, self.dy, self.nx, self.ny = x0, y0, dx, dy, nx, ny

    @classmethod
    def cover(cls, xmin: float, ymin: float, xmax: float, ymax: float,
              n_side: int, buffer_km: float) -> "BasisField":
        """Grid of ``n_side**2`` knots covering a buffered bounding box."""
        x0, x1 = xmin - buffer_km, xmax + buffer_km
        y0, y1 = ymin - buffer_km, ymax + buffer_km
        return cls(x0, y0, (x1 - x0) / (n_side - 1), (y1 - y0) / (n_side - 1),
                   n_side, n_side)

    @property
    def n_knots(self) -> int:
        return self.nx * self.ny

    def knots(self) -> np.ndarray:
        xs = self.x0 + self.dx * np.arange(self.nx)
        ys = self.y0 + self.dy * np.arange(self.ny)
        xx, yy = np.meshgrid(xs, ys, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def hull(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0,
                self.x0 + self.dx * (self.nx - 1), self.y0 + self.dy * (self.ny - 1))

    def eval_many(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Basis indices and values for an (n, 2) array of points.

        Returns (idx, val), each (n, 4); values in each row sum to 1.
        Raises if any point falls outside the grid hull (the caller must
        size the grid to cover the domain plus the maximum displacement).
        """
        pts = np.asarray(points, dtype=float)
        u = (pts[:, 0] - self.x0) / self.dx
        v = (pts[:, 1] - self.y0) / self.dy
        eps = 1e-9
        bad = (u < -eps) | (u > self.nx - 1 + eps) | (v < -eps) | (v > self.ny - 1 + eps)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise ValueError(
                f"point ({pts[i, 0]:.2f}, {pts[i, 1]:.2f}) outside basis hull "
                f"{self.hull()}; enlarge the grid or its buffer"
            )
        iu = np.clip(np.floor(u).astype(int), 0, self.nx - 2)
        iv = np.clip(np.floor(v).astype(int), 0, self.ny - 2)
        fu = np.clip(u - iu, 0.0, 1.0)
        fv = np.clip(v - iv, 0.0, 1.0)
        base = iu * self.ny + iv
        idx = np.column_stack([base, base + 1, base + self.ny, base + self.ny + 1])
        val = np.column_stack([(1 - fu) * (1 - fv), (1 - fu) * fv,
                               fu * (1 - fv), fu * fv])
        return idx, val

    def eval_basis(self, p) -> tuple[np.ndarray, np.ndarray]:
        """Basis (indices, values) at a single point; <=4 nonzeros, sum 1."""
        arr = np.array([[p.x, p.y]]) if hasattr(p, "x") else np.asarray([p], dtype=float)
        idx, val = self.eval_many(arr)
        return idx[0], val[0]

    def design_matrix(self, points: np.ndarray) -> np.ndarray:
        """Dense (n, K) basis matrix; convenient for small oracles."""
        idx, val = self.eval_many(points)
        out = np.zeros((len(points), self.n_knots))
        np.put_along_axis(out, idx, val, axis=1)
        return out

    def weight_cov(self, p: MaternParams) -> np.ndarray:
        """Dense Matern covariance between knot weights, diagonally lifted."""
        k = self.knots()
        cov = pairwise_cov(k, k, p)
        cov[np.diag_indices_from(cov)] += JITTER_REL * p.sigma2
        return cov


def simulate_grf(p: MaternParams, at: np.ndarray, seed) -> np.ndarray:
    """Exact zero-mean GRF draw at the given (n, 2) points.

    Dense Cholesky; intended for n up to a few thousand.  Coincident points
    make the covariance singular and are rejected.
    """
    at = np.asarray(at, dtype=float)
    cov = pairwise_cov(at, at, p)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise ValueError("covariance factorization failed (duplicate points?)") from e
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return chol @ rng.standard_normal(len(at))
