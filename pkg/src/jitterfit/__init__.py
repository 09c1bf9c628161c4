"""Geostatistical inference for surveys with jittered cluster coordinates."""

__version__ = "0.1.0"

from .field import BasisField, MaternParams, matern_cov, simulate_grf
from .geo import (
    AdminRegion,
    ClusterRecord,
    PlanarPoint,
    contains,
    ingest_clusters,
    project,
    synthetic_grid_regions,
    unproject,
)
from .jitter import JitterDraw, JitterScheme, jitter_density, preset, sample_jitter
from .model import (
    FitConfig,
    FitResult,
    HyperParams,
    PriorSpec,
    cluster_mixture_loglik,
    fit,
    joint_neg_logpost,
    laplace_marginal,
    obs_loglik,
    pc_prior_logdensity,
    predict,
)
from .quadrature import (
    IntegrationScheme,
    RingSpec,
    base_weights,
    boundary_correct,
    build_rings,
    build_scheme,
    single_point_scheme,
)
from .scoring import ScoreReport, bias_table, coverage, crps_samples, log_score
from .study import StudyConfig, run_study

__all__ = [
    "AdminRegion", "BasisField", "ClusterRecord", "FitConfig", "FitResult",
    "HyperParams", "IntegrationScheme", "JitterDraw", "JitterScheme",
    "MaternParams", "PlanarPoint", "PriorSpec", "RingSpec", "ScoreReport",
    "StudyConfig", "base_weights", "bias_table", "boundary_correct",
    "build_rings", "build_scheme", "cluster_mixture_loglik", "contains",
    "coverage", "crps_samples", "fit", "ingest_clusters", "jitter_density",
    "joint_neg_logpost", "laplace_marginal", "log_score", "matern_cov",
    "obs_loglik", "pc_prior_logdensity", "predict", "preset", "project",
    "run_study", "sample_jitter", "simulate_grf", "single_point_scheme",
    "synthetic_grid_regions", "unproject",
]
