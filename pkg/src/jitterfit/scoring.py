"""Proper scoring rules, interval coverage, and bias aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import FitResult


def crps_samples(samples, truth: float) -> float:
    """Sample-based CRPS: mean|X - y| - 0.5 * mean|X - X'|.

    The second term uses the unbiased pairwise estimator over distinct
    pairs.  Lower is better; zero when all samples equal the truth.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    m = x.size
    if m < 2:
        raise ValueError("need at least 2 samples for CRPS")
    term1 = np.abs(x - truth).mean()
    # sum of |x_i - x_j| over i<j for sorted x: sum_i x_i * (2i - m + 1)
    i = np.arange(m)
    pair_sum = 2.0 * float(x @ (2 * i - m + 1))
    term2 = pair_sum / (m * (m - 1))
    return float(term1 - 0.5 * term2)


def crps_samples_batch(samples: np.ndarray, truths: np.ndarray) -> np.ndarray:
    """CRPS per row: ``samples`` is (n_points, m), ``truths`` is (n_points,)."""
    x = np.sort(np.asarray(samples, dtype=float), axis=1)
    m = x.shape[1]
    term1 = np.abs(x - np.asarray(truths, dtype=float)[:, None]).mean(axis=1)
    i = np.arange(m)
    pair_sum = 2.0 * (x @ (2 * i - m + 1))
    return term1 - 0.5 * pair_sum / (m * (m - 1))


def log_score(samples, truth: float, rule: str = "gaussian") -> float:
    """Negative log predictive density of ``truth`` under the sample cloud.

    The predictive density is approximated by a Gaussian with the sample
    mean and variance (computed on whatever scale the samples are given;
    use the latent scale for bounded predictands).  Lower is better.
    """
    if rule != "gaussian":
        raise ValueError(f"unknown log-score rule {rule!r}")
    x = np.asarray(samples, dtype=float)
    if x.size < 30:
        raise ValueError("need at least 30 samples for the Gaussian log score")
    var = float(x.var(ddof=1))
    if var <= 0.0:
        raise ValueError("zero sample variance; log score undefined")
    mean = float(x.mean())
    return 0.5 * math.log(2.0 * math.pi * var) + 0.5 * (truth - mean) ** 2 / var


def log_score_batch(samples: np.ndarray, truths: np.ndarray,
                    rule: str = "gaussian") -> np.ndarray:
    if rule != "gaussian":
        raise ValueError(f"unknown log-score rule {rule!r}")
    x = np.asarray(samples, dtype=float)
    var = x.var(axis=1, ddof=1)
    if np.any(var <= 0):
        raise ValueError("zero sample variance; log score undefined")
    mean = x.mean(axis=1)
    t = np.asarray(truths, dtype=float)
    return 0.5 * np.log(2.0 * math.pi * var) + 0.5 * (t - mean) ** 2 / var


def coverage(intervals, truths) -> float:
    """Fraction of (lo, hi) intervals containing their truth."""
    lo = np.array([iv[0] for iv in intervals], dtype=float)
    hi = np.array([iv[1] for iv in intervals], dtype=float)
    t = np.asarray(truths, dtype=float)
    if lo.size != t.size:
        raise ValueError("intervals and truths must have equal length")
    return float(((lo <= t) & (t <= hi)).mean())


@dataclass
class BiasRow:
    parameter: str
    truth: float
    bias_j: float            # absolute for mu, relative otherwise
    bias_s: float | None
    ci_length_j: float
    ci_length_s: float | None
    relative: bool


def bias_table(fits_j: list[FitResult], truth,
               fits_s: list[FitResult] | None = None) -> list[BiasRow]:
    """Average parameter biases and CI lengths, paired J with S.

    Absolute bias for the intercept, relative bias for range and
    variances, following the usual presentation for these studies.
    """
    if len(fits_j) < 2:
        raise ValueError("need at least 2 fits to average")
    truths = {"mu": truth.mu, "rho": truth.rho, "sigma2_s": truth.sigma2_s}
    if truth.log_sigma_n is not None:
        truths["sigma2_n"] = truth.sigma2_n

    def stats(fits, name):
        est = np.array([f.params[name].median for f in fits])
        ci = np.array([f.params[name].ci_length for f in fits])
        t = truths[name]
        bias = float((est - t).mean()) if name == "mu" else float(((est - t) / t).mean())
        return bias, float(ci.mean())

    rows = []
    for name, t in truths.items():
        bj, cj = stats(fits_j, name)
        bs, cs = stats(fits_s, name) if fits_s else (None, None)
        rows.append(BiasRow(parameter=name, truth=t, bias_j=bj, bias_s=bs,
                            ci_length_j=cj, ci_length_s=cs, relative=name != "mu"))
    return rows


@dataclass
class ScoreReport:
    """Per-location scores and their paired aggregation for one scenario."""

    crps_j: np.ndarray = field(default_factory=lambda: np.empty(0))
    crps_s: np.ndarray = field(default_factory=lambda: np.empty(0))
    logscore_j: np.ndarray = field(default_factory=lambda: np.empty(0))
    logscore_s: np.ndarray = field(default_factory=lambda: np.empty(0))
    coverage_j: list[float] = field(default_factory=list)
    coverage_s: list[float] = field(default_factory=list)
    bias_rows: list[BiasRow] = field(default_factory=list)

    @property
    def mean_crps_j(self) -> float:
        return float(self.crps_j.mean())

    @property
    def mean_crps_s(self) -> float:
        return float(self.crps_s.mean())

    def crps_rel_diff_pct(self) -> float:
        """100 * (CRPS_J - CRPS_S) / CRPS_S on scenario means."""
        return 100.0 * (self.mean_crps_j - self.mean_crps_s) / self.mean_crps_s

    def logscore_diff(self) -> float:
        return float(self.logscore_j.mean() - self.logscore_s.mean())
