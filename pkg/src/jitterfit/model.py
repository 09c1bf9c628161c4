"""Priors, observation likelihoods, the marginalized mixture objective,
Laplace approximation over the latent weights, and hyperparameter fitting.

The observation likelihood for each cluster is a quadrature mixture over
its possible true locations.  Latent basis weights are integrated out with
a Laplace approximation at their conditional mode (found by damped Newton
with the exact dense Hessian); the remaining hyperparameters are optimized
by BFGS on the internal scale (intercept plus logs of the positive
parameters), with finite-difference gradients.

Accumulation over clusters is single-threaded and in fixed order, so
objective values are bit-stable; parallelism belongs at the replicate
level.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import expit, gammaln
from threadpoolctl import threadpool_limits

from .field import BasisField, MaternParams
from .geo import AdminRegion, ClusterRecord
from .jitter import JitterScheme
from .optim import NewtonResult, bfgs_minimize, fd_gradient, fd_hessian, newton_minimize
from .quadrature import IntegrationScheme, build_scheme, single_point_scheme

log = logging.getLogger(__name__)

BINOMIAL = "binomial"
GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class HyperParams:
    """Inference-scale parameter vector: intercept and log-scale positives."""

    mu: float
    log_rho: float
    log_sigma_s: float
    log_sigma_n: float | None = None  # Gaussian observation model only

    def __post_init__(self):
        vals = [self.mu, self.log_rho, self.log_sigma_s]
        if self.log_sigma_n is not None:
            vals.append(self.log_sigma_n)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite hyperparameters: {self}")

    @property
    def rho(self) -> float:
        return math.exp(self.log_rho)

    @property
    def sigma_s(self) -> float:
        return math.exp(self.log_sigma_s)

    @property
    def sigma2_s(self) -> float:
        return math.exp(2.0 * self.log_sigma_s)

    @property
    def sigma_n(self) -> float:
        if self.log_sigma_n is None:
            raise ValueError("no nugget in this parameterization")
        return math.exp(self.log_sigma_n)

    @property
    def sigma2_n(self) -> float:
        return self.sigma_n ** 2

    def matern(self) -> MaternParams:
        return MaternParams(sigma2=self.sigma2_s, range=self.rho)

    def to_vector(self) -> np.ndarray:
        v = [self.mu, self.log_rho, self.log_sigma_s]
        if self.log_sigma_n is not None:
            v.append(self.log_sigma_n)
        return np.array(v)

    @classmethod
    def from_vector(cls, v: np.ndarray, family: str) -> "HyperParams":
        if family == GAUSSIAN:
            return cls(mu=v[0], log_rho=v[1], log_sigma_s=v[2], log_sigma_n=v[3])
        return cls(mu=v[0], log_rho=v[1], log_sigma_s=v[2])


@dataclass(frozen=True)
class PriorSpec:
    """Prior hyperparameters: vague Gaussian intercept, penalized-complexity
    tail statements for the field, exponential tail prior for the nugget."""

    rho_0: float
    rho_alpha: float = 0.5      # P(rho > rho_0)
    sigma_u0: float = 1.0
    sigma_alpha: float = 0.05   # P(sigma_s > sigma_u0)
    mu_var: float = 1000.0
    nugget_u0: float = 1.0
    nugget_alpha: float = 0.05  # P(sigma_n > nugget_u0)

    def __post_init__(self):
        if self.rho_0 <= 0 or self.sigma_u0 <= 0 or self.mu_var <= 0 or self.nugget_u0 <= 0:
            raise ValueError("prior scales must be positive")
        for a in (self.rho_alpha, self.sigma_alpha, self.nugget_alpha):
            if not 0.0 < a < 1.0:
                raise ValueError("prior tail probabilities must be in (0, 1)")

    @property
    def lambda_rho(self) -> float:
        # P(rho > rho_0) = 1 - exp(-lambda/rho_0) = alpha
        return -self.rho_0 * math.log1p(-self.rho_alpha)

    @property
    def lambda_sigma(self) -> float:
        return -math.log(self.sigma_alpha) / self.sigma_u0

    @property
    def lambda_nugget(self) -> float:
        return -math.log(self.nugget_alpha) / self.nugget_u0


def pc_prior_logdensity(rho: float, sigma: float, spec: PriorSpec) -> float:
    """Joint log density of the range/SD prior at natural scale.

    Range: lambda * rho^-2 * exp(-lambda/rho) (the 2-D complexity prior);
    SD: exponential with rate set by the tail statement.
    """
    if rho <= 0 or sigma <= 0:
        return -math.inf
    lr, ls = spec.lambda_rho, spec.lambda_sigma
    return (math.log(lr) - 2.0 * math.log(rho) - lr / rho
            + math.log(ls) - ls * sigma)


def nugget_prior_logdensity(sigma_n: float, spec: PriorSpec) -> float:
    if sigma_n <= 0:
        return -math.inf
    lam = spec.lambda_nugget
    return math.log(lam) - lam * sigma_n


def obs_loglik(y, n, eta, family: str, sigma_n2: float | None = None):
    """Observation log likelihood at linear predictor ``eta`` (vectorized)."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family == BINOMIAL:
        n = np.asarray(n, dtype=float)
        log_comb = gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)
        out = log_comb + y * eta - n * np.logaddexp(0.0, eta)
    elif family == GAUSSIAN:
        if sigma_n2 is None or sigma_n2 <= 0:
            raise ValueError("Gaussian family needs sigma_n2 > 0")
        out = -0.5 * np.log(2.0 * math.pi * sigma_n2) - 0.5 * (y - eta) ** 2 / sigma_n2
    else:
        raise ValueError(f"unknown family {family!r}")
    return out if out.ndim else float(out)


def _obs_derivs(y, n, eta, family: str, sigma_n2: float | None):
    """First and second derivative of the log likelihood in eta."""
    if family == BINOMIAL:
        p = expit(eta)
        return y - n * p, -n * p * (1.0 - p)
    var = sigma_n2
    return (y - eta) / var, np.full_like(eta, -1.0 / var)


# ---------------------------------------------------------------------------
# packed mixture data: everything the inner loop touches, as flat arrays

class PackedData:
    """Flat-array view of (clusters, schemes, basis) for fast evaluation.

    Zero-weight quadrature points are dropped.  Points are stored grouped
    by cluster; ``offsets`` delimits the groups.
    """

    def __init__(self, data: list[ClusterRecord], schemes: list[IntegrationScheme],
                 basis: BasisField):
        if len(data) != len(schemes):
            raise ValueError("one integration scheme per cluster required")
        K = basis.n_knots
        idx_parts, val_parts, loglam_parts, counts = [], [], [], []
        for rec, sch in zip(data, schemes):
            keep = sch.weights > 0.0
            pts = sch.points[keep]
            idx, val = basis.eval_many(pts)
            idx_parts.append(idx)
            val_parts.append(val)
            loglam_parts.append(np.log(sch.weights[keep]))
            counts.append(int(keep.sum()))
        self.K = K
        self.n_clusters = len(data)
        self.idx = np.concatenate(idx_parts)
        self.val = np.concatenate(val_parts)
        self.log_lam = np.concatenate(loglam_parts)
        self.counts = np.array(counts)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])[:-1]
        self.cl_of_pt = np.repeat(np.arange(self.n_clusters), counts)
        self.y = np.array([r.y for r in data], dtype=float)
        self.n = np.array([r.n for r in data], dtype=float)
        self.n_points = self.idx.shape[0]
        self.y_pt = self.y[self.cl_of_pt]
        self.n_pt = self.n[self.cl_of_pt]
        # binomial normalizing constants are parameter-free
        self.log_comb_pt = (gammaln(self.n_pt + 1) - gammaln(self.y_pt + 1)
                            - gammaln(self.n_pt - self.y_pt + 1))
        # flattened scatter targets for the exact Hessian and the
        # per-cluster gradient matrix
        pair = self.idx[:, :, None].astype(np.int64) * K + self.idx[:, None, :]
        self.pair_idx = pair.reshape(self.n_points, 16).ravel()
        self.pair_val = (self.val[:, :, None] * self.val[:, None, :]).reshape(self.n_points, 16)
        self.gmat_idx = (self.cl_of_pt[:, None].astype(np.int64) * K + self.idx).ravel()

    def eta(self, mu: float, w: np.ndarray) -> np.ndarray:
        return mu + np.einsum("pj,pj->p", self.val, w[self.idx])


class CovCache:
    """Correlation-level factorizations shared across hyperparameter
    evaluations: the Matern correlation depends only on the range, and the
    marginal variance enters as an exact scaling."""

    def __init__(self, basis: BasisField, max_entries: int = 8):
        self.basis = basis
        self.max_entries = max_entries
        self._store: dict[float, tuple] = {}

    def get(self, log_rho: float):
        key = round(log_rho, 12)
        hit = self._store.get(key)
        if hit is None:
            corr = self.basis.weight_cov(MaternParams(sigma2=1.0, range=math.exp(log_rho)))
            chol = np.linalg.cholesky(corr)
            logdet = 2.0 * float(np.log(np.diag(chol)).sum())
            tmp = solve_triangular(chol, np.eye(corr.shape[0]), lower=True)
            hit = (chol, logdet, tmp.T @ tmp)
            if len(self._store) >= self.max_entries:
                self._store.pop(next(iter(self._store)))
            self._store[key] = hit
        return hit


class _MixtureObjective:
    """Negative log joint over latent weights at fixed hyperparameters."""

    def __init__(self, packed: PackedData, params: HyperParams, priors: PriorSpec,
                 family: str):
        self.packed = packed
        self.params = params
        self.family = family
        self.sigma_n2 = params.sigma2_n if family == GAUSSIAN else None
        self.theta_const = _theta_logprior_negsum(params, priors, family)
        self._cache_w = None
        self._cache = None

    def set_weight_corr(self, chol_corr, logdet_corr, q_corr):
        s2 = self.params.sigma2_s
        K = q_corr.shape[0]
        self.Q = q_corr / s2
        logdet_cov = K * math.log(s2) + logdet_corr
        self.gauss_const = 0.5 * logdet_cov + 0.5 * K * math.log(2.0 * math.pi)

    def _per_point(self, w: np.ndarray):
        if self._cache_w is not None and np.array_equal(w, self._cache_w):
            return self._cache
        pk = self.packed
        eta = pk.eta(self.params.mu, w)
        if self.family == BINOMIAL:
            ll = pk.log_comb_pt + pk.y_pt * eta - pk.n_pt * np.logaddexp(0.0, eta)
        else:
            ll = (-0.5 * math.log(2.0 * math.pi * self.sigma_n2)
                  - 0.5 * (pk.y_pt - eta) ** 2 / self.sigma_n2)
        t = pk.log_lam + ll
        M = np.maximum.reduceat(t, pk.offsets)
        if not np.all(np.isfinite(M)):
            self._cache_w, self._cache = w.copy(), None
            return None
        ex = np.exp(t - M[pk.cl_of_pt])
        sums = np.add.reduceat(ex, pk.offsets)
        logL = M + np.log(sums)
        gamma = ex / sums[pk.cl_of_pt]
        l1, l2 = _obs_derivs(pk.y_pt, pk.n_pt, eta, self.family, self.sigma_n2)
        self._cache_w = w.copy()
        self._cache = (logL, gamma, l1, l2)
        return self._cache

    def value_grad(self, w: np.ndarray):
        pp = self._per_point(w)
        quad = 0.5 * float(w @ (self.Q @ w))
        if pp is None:
            return math.inf, None
        logL, gamma, l1, l2 = pp
        f = -float(logL.sum()) + quad + self.gauss_const + self.theta_const
        pk = self.packed
        coef = gamma * l1
        grad_lik = np.bincount(pk.idx.ravel(), weights=(coef[:, None] * pk.val).ravel(),
                               minlength=pk.K)
        return f, self.Q @ w - grad_lik

    def hess(self, w: np.ndarray) -> np.ndarray:
        pp = self._per_point(w)
        if pp is None:
            raise ValueError("Hessian requested at an infeasible point")
        _, gamma, l1, l2 = pp
        pk = self.packed
        d = gamma * (l2 + l1 * l1)
        A = np.bincount(pk.pair_idx, weights=(d[:, None] * pk.pair_val).ravel(),
                        minlength=pk.K * pk.K).reshape(pk.K, pk.K)
        coef = gamma * l1
        G = np.bincount(pk.gmat_idx, weights=(coef[:, None] * pk.val).ravel(),
                        minlength=pk.n_clusters * pk.K).reshape(pk.n_clusters, pk.K)
        return self.Q - A + G.T @ G


def _theta_logprior_negsum(params: HyperParams, priors: PriorSpec, family: str) -> float:
    neg = 0.5 * params.mu ** 2 / priors.mu_var + 0.5 * math.log(2.0 * math.pi * priors.mu_var)
    neg -= pc_prior_logdensity(params.rho, params.sigma_s, priors)
    if family == GAUSSIAN:
        neg -= nugget_prior_logdensity(params.sigma_n, priors)
    return neg


def make_objective(data, schemes, basis: BasisField, params: HyperParams,
                   priors: PriorSpec, family: str,
                   packed: PackedData | None = None,
                   cov_cache: CovCache | None = None) -> _MixtureObjective:
    packed = packed if packed is not None else PackedData(data, schemes, basis)
    cov_cache = cov_cache if cov_cache is not None else CovCache(basis)
    obj = _MixtureObjective(packed, params, priors, family)
    obj.set_weight_corr(*cov_cache.get(params.log_rho))
    return obj


# ---------------------------------------------------------------------------
# public objective surfaces

def cluster_mixture_loglik(scheme: IntegrationScheme, cluster: ClusterRecord,
                           w: np.ndarray, params: HyperParams, basis: BasisField,
                           family: str) -> float:
    """Log likelihood of one cluster, marginalized over its true location.

    log sum_k lambda_k exp(loglik at eta(s_k)), with eta(s) = mu + basis(s).w,
    evaluated with log-sum-exp.  A result of -inf (all mixture terms
    underflow) is a value, not an error.
    """
    keep = scheme.weights > 0.0
    idx, val = basis.eval_many(scheme.points[keep])
    eta = params.mu + (val * w[idx]).sum(axis=1)
    sigma_n2 = params.sigma2_n if family == GAUSSIAN else None
    ll = obs_loglik(cluster.y, cluster.n, eta, family, sigma_n2)
    t = np.log(scheme.weights[keep]) + ll
    m = t.max()
    if not np.isfinite(m):
        return -math.inf
    return float(m + np.log(np.exp(t - m).sum()))


def joint_neg_logpost(w: np.ndarray, params: HyperParams, data, schemes,
                      basis: BasisField, priors: PriorSpec, family: str,
                      packed: PackedData | None = None):
    """Negative log joint posterior density and its gradient in ``w``.

    Value is -[sum of cluster mixture log likelihoods + latent Gaussian
    log density + intercept and hyperparameter log priors]; the gradient
    is analytic (responsibility-weighted chain rule).  Returns (inf, None)
    when every mixture term of some cluster underflows, which optimizers
    treat as a rejected step.
    """
    obj = make_objective(data, schemes, basis, params, priors, family, packed)
    return obj.value_grad(np.asarray(w, dtype=float))


@dataclass
class LaplaceResult:
    value: float
    w_hat: np.ndarray
    hess: np.ndarray
    newton: NewtonResult


def laplace_marginal(params: HyperParams, data, schemes, basis: BasisField,
                     priors: PriorSpec, family: str,
                     packed: PackedData | None = None, w0: np.ndarray | None = None,
                     inner_tol: float = 1e-9, inner_maxiter: int = 100,
                     full: bool = False, cov_cache: CovCache | None = None):
    """Negative log marginal posterior of the hyperparameters.

    Finds the conditional mode of the latent weights by damped Newton and
    returns joint(w_hat) + 0.5*logdet H - (K/2)*log(2*pi), H the exact
    dense Hessian at the mode.
    """
    obj = make_objective(data, schemes, basis, params, priors, family, packed,
                         cov_cache)
    K = obj.packed.K
    x0 = np.zeros(K) if w0 is None else np.asarray(w0, dtype=float)
    f0, _ = obj.value_grad(x0)
    if not np.isfinite(f0):
        x0 = np.zeros(K)
    res = newton_minimize(obj.value_grad, obj.hess, x0, tol=inner_tol,
                          maxiter=inner_maxiter)
    if not res.converged:
        raise RuntimeError(
            f"inner Newton failed to converge in {inner_maxiter} iterations "
            f"(|grad|={np.max(np.abs(res.grad)):.2e}) at params {params}"
        )
    c, _ = res.hess_chol
    logdet_h = 2.0 * float(np.log(np.abs(np.diag(c))).sum())
    value = res.f + 0.5 * logdet_h - 0.5 * K * math.log(2.0 * math.pi)
    if not full:
        return value
    return LaplaceResult(value=value, w_hat=res.x, hess=obj.hess(res.x), newton=res)


# ---------------------------------------------------------------------------
# fitting

@dataclass
class FitConfig:
    basis: BasisField | None = None
    grid: int = 15
    buffer_km: float | None = None
    inner_tol: float = 1e-9
    inner_maxiter: int = 100
    gtol: float = 1e-6
    maxiter: int = 200
    fd_step: float = 2e-4
    curvature_step: float = 1e-3
    init: HyperParams | None = None


@dataclass
class ParamSummary:
    median: float
    lower: float
    upper: float

    @property
    def ci_length(self) -> float:
        return self.upper - self.lower


@dataclass
class FitResult:
    map: HyperParams
    curvature: np.ndarray             # internal scale
    params: dict[str, ParamSummary]   # natural scale
    w_mean: np.ndarray
    w_prec: np.ndarray
    converged: bool
    trace: list
    family: str
    basis: BasisField
    priors: PriorSpec
    psi_cov: np.ndarray
    runtime_s: float = 0.0
    n_objective_evals: int = 0
    message: str = ""

    def to_jsonable(self) -> dict:
        return {
            "family": self.family,
            "converged": self.converged,
            "message": self.message,
            "runtime_s": self.runtime_s,
            "n_objective_evals": self.n_objective_evals,
            "map_internal": self.map.to_vector().tolist(),
            "curvature": self.curvature.tolist(),
            "psi_cov": self.psi_cov.tolist(),
            "params": {k: {"median": v.median, "lower": v.lower, "upper": v.upper,
                           "ci_length": v.ci_length}
                       for k, v in self.params.items()},
            "grid": {"x0": self.basis.x0, "y0": self.basis.y0, "dx": self.basis.dx,
                     "dy": self.basis.dy, "nx": self.basis.nx, "ny": self.basis.ny},
            "priors": {"rho_0": self.priors.rho_0, "rho_alpha": self.priors.rho_alpha,
                       "sigma_u0": self.priors.sigma_u0, "sigma_alpha": self.priors.sigma_alpha,
                       "mu_var": self.priors.mu_var, "nugget_u0": self.priors.nugget_u0,
                       "nugget_alpha": self.priors.nugget_alpha},
            "trace": [[int(i), float(f), float(g)] for i, f, g in self.trace],
        }


def default_basis(points: np.ndarray, jitter_scheme: JitterScheme | None,
                  rho_0: float, grid: int = 15, buffer_km: float | None = None) -> BasisField:
    """Knot grid covering the data, the displacement reach, and a range margin."""
    if buffer_km is None:
        max_r = 0.0
        if jitter_scheme is not None:
            max_r = max(jitter_scheme.urban_radius, jitter_scheme.rural_long)
        buffer_km = max_r + 0.5 * rho_0
    return BasisField.cover(points[:, 0].min(), points[:, 1].min(),
                            points[:, 0].max(), points[:, 1].max(),
                            n_side=grid, buffer_km=buffer_km)


def _initial_params(data, family: str, priors: PriorSpec) -> HyperParams:
    y = np.array([r.y for r in data], dtype=float)
    if family == BINOMIAL:
        n = np.array([r.n for r in data], dtype=float)
        p = np.clip(y.sum() / n.sum(), 0.01, 0.99)
        return HyperParams(mu=float(np.log(p / (1 - p))), log_rho=math.log(priors.rho_0),
                           log_sigma_s=0.0)
    sd = max(float(np.std(y)), 0.05)
    return HyperParams(mu=float(np.mean(y)), log_rho=math.log(priors.rho_0),
                       log_sigma_s=math.log(max(0.7 * sd, 0.05)),
                       log_sigma_n=math.log(max(0.3 * sd, 0.02)))


def _log_jacobian(psi: np.ndarray) -> float:
    # internal coords are [mu, log rho, log sigma_s, (log sigma_n)]
    return float(psi[1:].sum())


def fit(data: list[ClusterRecord], regions: dict[str, AdminRegion] | None,
        jitter_scheme: JitterScheme | None, priors: PriorSpec, family: str,
        config: FitConfig | None = None) -> FitResult:
    """Fit the latent Gaussian model, marginalizing locations if asked.

    ``jitter_scheme=None`` fits the standard model that takes published
    coordinates at face value (a single-point scheme per cluster);
    otherwise a full quadrature scheme is built per cluster against its
    admin region.  Optimization runs on the internal scale with the
    change-of-variables Jacobian included, so the reported mode is the
    internal-scale posterior mode.
    """
    config = config or FitConfig()
    t_start = time.perf_counter()
    if family == BINOMIAL:
        for r in data:
            r.check_binomial()

    if jitter_scheme is None:
        schemes = [single_point_scheme(r) for r in data]
    else:
        if regions is None:
            schemes = [build_scheme(r, None, jitter_scheme) for r in data]
        else:
            schemes = [build_scheme(r, regions[r.region], jitter_scheme) for r in data]

    locs = np.array([[r.location.x, r.location.y] for r in data])
    basis = config.basis or default_basis(locs, jitter_scheme, priors.rho_0,
                                          config.grid, config.buffer_km)
    packed = PackedData(data, schemes, basis)
    cov_cache = CovCache(basis)
    init = config.init or _initial_params(data, family, priors)
    psi0 = init.to_vector()

    state = {"w": np.zeros(basis.n_knots), "evals": 0}

    def objective(psi: np.ndarray) -> float:
        if not np.all(np.isfinite(psi)):
            return math.inf
        params = HyperParams.from_vector(psi, family)
        state["evals"] += 1
        try:
            res = laplace_marginal(params, data, schemes, basis, priors, family,
                                   packed=packed, w0=state["w"],
                                   inner_tol=config.inner_tol,
                                   inner_maxiter=config.inner_maxiter, full=True,
                                   cov_cache=cov_cache)
        except (RuntimeError, OverflowError, np.linalg.LinAlgError):
            return math.inf
        state["w"] = res.w_hat
        return res.value - _log_jacobian(psi)

    grad = lambda psi: fd_gradient(objective, psi, h=config.fd_step)
    # single-threaded BLAS: the K x K factorizations are too small to gain
    # from threads, and thread sync stalls badly on shared cores
    with threadpool_limits(limits=1):
        opt = bfgs_minimize(objective, grad, psi0, gtol=config.gtol,
                            maxiter=config.maxiter)

        psi_hat = opt.x
        params_hat = HyperParams.from_vector(psi_hat, family)
        lap = laplace_marginal(params_hat, data, schemes, basis, priors, family,
                               packed=packed, w0=state["w"], inner_tol=config.inner_tol,
                               inner_maxiter=config.inner_maxiter, full=True,
                               cov_cache=cov_cache)

        curv = fd_hessian(objective, psi_hat, h=config.curvature_step)
    psi_cov = _robust_inverse(curv)
    sd = np.sqrt(np.diag(psi_cov))

    def _exp(x: float) -> float:
        # an unidentified parameter can have a huge sd; saturate rather
        # than overflow so the interval is still reportable
        return math.exp(min(x, 700.0))

    names_log = {"rho": 1, "sigma2_s": 2}
    summaries = {"mu": ParamSummary(median=float(psi_hat[0]),
                                    lower=float(psi_hat[0] - 1.96 * sd[0]),
                                    upper=float(psi_hat[0] + 1.96 * sd[0]))}
    for name, i in names_log.items():
        scale = 2.0 if name.startswith("sigma2") else 1.0
        summaries[name] = ParamSummary(
            median=_exp(scale * psi_hat[i]),
            lower=_exp(scale * (psi_hat[i] - 1.96 * sd[i])),
            upper=_exp(scale * (psi_hat[i] + 1.96 * sd[i])))
    if family == GAUSSIAN:
        summaries["sigma2_n"] = ParamSummary(
            median=_exp(2.0 * psi_hat[3]),
            lower=_exp(2.0 * (psi_hat[3] - 1.96 * sd[3])),
            upper=_exp(2.0 * (psi_hat[3] + 1.96 * sd[3])))

    runtime = time.perf_counter() - t_start
    log.info("fit(%s, %s): %d objective evals, %.1f s, converged=%s",
             family, "J" if jitter_scheme is not None else "S",
             state["evals"], runtime, opt.converged)
    return FitResult(map=params_hat, curvature=curv, params=summaries,
                     w_mean=lap.w_hat, w_prec=lap.hess, converged=opt.converged,
                     trace=opt.trace, family=family, basis=basis, priors=priors,
                     psi_cov=psi_cov, runtime_s=runtime,
                     n_objective_evals=state["evals"], message=opt.message)


def _robust_inverse(H: np.ndarray) -> np.ndarray:
    """Inverse through an eigenvalue floor; curvature should be PSD at the
    optimum but finite differencing can leave tiny negative eigenvalues."""
    vals, vecs = np.linalg.eigh(0.5 * (H + H.T))
    floor = max(vals.max(), 1e-8) * 1e-10
    vals = np.maximum(vals, floor)
    return (vecs / vals) @ vecs.T


# ---------------------------------------------------------------------------
# prediction

@dataclass
class Prediction:
    mean: np.ndarray
    sd: np.ndarray
    cv: np.ndarray
    samples: np.ndarray      # predictand scale: probability (binomial) / eta
    eta_samples: np.ndarray  # always the latent (linear predictor) scale


def predict(fit_result: FitResult, at: np.ndarray, n_samples: int = 200,
            seed=0, resolve: bool = False,
            data=None, schemes=None) -> Prediction:
    """Posterior predictive draws of the surface at the given points.

    Hyperparameters are sampled from their Gaussian approximation and the
    latent weights from the mode-conditional Gaussian at the MAP (the fast
    path); ``resolve=True`` re-solves the latent mode for every
    hyperparameter draw instead (needs ``data`` and ``schemes``).
    """
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100 for stable summaries")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    at = np.asarray(at, dtype=float)
    basis = fit_result.basis
    idx, val = basis.eval_many(at)

    psi_hat = fit_result.map.to_vector()
    chol_psi = np.linalg.cholesky(
        fit_result.psi_cov + 1e-12 * np.eye(len(psi_hat)))
    psi_draws = psi_hat[None, :] + rng.standard_normal((n_samples, len(psi_hat))) @ chol_psi.T
    mu_draws = psi_draws[:, 0]

    K = basis.n_knots
    if resolve:
        if data is None or schemes is None:
            raise ValueError("resolve=True needs data and schemes")
        w_draws = np.empty((K, n_samples))
        packed = PackedData(data, schemes, basis)
        for s in range(n_samples):
            params = HyperParams.from_vector(psi_draws[s], fit_result.family)
            lap = laplace_marginal(params, data, schemes, basis, fit_result.priors,
                                   fit_result.family, packed=packed,
                                   w0=fit_result.w_mean, full=True)
            ch = np.linalg.cholesky(lap.hess)
            w_draws[:, s] = lap.w_hat + solve_triangular(
                ch.T, rng.standard_normal(K), lower=False)
    else:
        ch = np.linalg.cholesky(fit_result.w_prec)
        z = rng.standard_normal((K, n_samples))
        w_draws = fit_result.w_mean[:, None] + solve_triangular(ch.T, z, lower=False)

    basis_part = np.einsum("pj,pjs->ps", val, w_draws[idx, :])
    eta = mu_draws[None, :] + basis_part
    if fit_result.family == BINOMIAL:
        samples = expit(eta)
    else:
        samples = eta
    mean = samples.mean(axis=1)
    sd = samples.std(axis=1, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cv = np.where(np.abs(mean) > 1e-12, sd / np.abs(mean), np.inf)
    return Prediction(mean=mean, sd=sd, cv=cv, samples=samples, eta_samples=eta)
