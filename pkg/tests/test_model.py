import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import expit

from jitterfit.field import BasisField, MaternParams
from jitterfit.geo import AdminRegion, ClusterRecord, PlanarPoint
from jitterfit.jitter import JitterScheme, preset, sample_jitter_many
from jitterfit.model import (
    FitConfig,
    FitResult,
    HyperParams,
    PriorSpec,
    cluster_mixture_loglik,
    fit,
    joint_neg_logpost,
    laplace_marginal,
    nugget_prior_logdensity,
    obs_loglik,
    pc_prior_logdensity,
    predict,
)
from jitterfit.quadrature import build_scheme, single_point_scheme

from oracles import gp_neg_log_marginal_posterior, mc_marginal_likelihood, random_instance

LOG_C_100_50_HALF = -2.5308764039771035  # log C(100,50) - 100*log 2


class TestPriors:
    def test_sigma_rate(self):
        spec = PriorSpec(rho_0=160.0)
        assert spec.lambda_sigma == pytest.approx(2.995732273553991, rel=1e-12)

    def test_rho_rate_median_statement(self):
        spec = PriorSpec(rho_0=160.0)
        assert spec.lambda_rho == pytest.approx(110.90354888959125, rel=1e-12)

    def test_sigma_tail_probability(self):
        # P(sigma > 1) under the exponential prior, by quadrature
        spec = PriorSpec(rho_0=100.0)
        lam = spec.lambda_sigma
        tail, _ = integrate.quad(lambda s: lam * math.exp(-lam * s), 1.0, np.inf)
        assert tail == pytest.approx(0.05, abs=1e-10)

    def test_rho_median(self):
        # P(rho > rho_0) = 0.5 under the complexity prior, by quadrature
        spec = PriorSpec(rho_0=77.0)
        dens = lambda r: math.exp(pc_prior_logdensity(r, 1.0, spec)
                                  - math.log(spec.lambda_sigma) + spec.lambda_sigma)
        below, _ = integrate.quad(dens, 1e-9, 77.0)
        assert below == pytest.approx(0.5, abs=1e-7)

    def test_nugget_prior_normalized(self):
        spec = PriorSpec(rho_0=100.0)
        total, _ = integrate.quad(
            lambda s: math.exp(nugget_prior_logdensity(s, spec)), 0, np.inf)
        assert total == pytest.approx(1.0, abs=1e-9)


class TestObsLoglik:
    def test_binomial_single_bernoulli(self):
        assert obs_loglik(1, 1, 0.0, "binomial") == pytest.approx(math.log(0.5), rel=1e-12)

    def test_binomial_closed_form(self):
        assert obs_loglik(50, 100, 0.0, "binomial") == pytest.approx(
            LOG_C_100_50_HALF, rel=1e-12)

    def test_gaussian_at_mean(self):
        s2 = 0.37
        assert obs_loglik(1.3, 1, 1.3, "gaussian", sigma_n2=s2) == pytest.approx(
            -0.5 * math.log(2 * math.pi * s2), rel=1e-12)

    def test_binomial_extreme_eta_stable(self):
        assert np.isfinite(obs_loglik(3, 10, 40.0, "binomial"))
        assert np.isfinite(obs_loglik(3, 10, -40.0, "binomial"))

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            obs_loglik(1, 1, 0.0, "poisson")


@pytest.fixture
def small_instance():
    return random_instance(7, "binomial", "J")


class TestMixture:
    def test_single_point_equals_obs_loglik(self):
        data, schemes, basis, params, priors, w = random_instance(3, "binomial", "S")
        rec, sch = data[0], schemes[0]
        idx, val = basis.eval_basis(rec.location)
        eta = params.mu + float(val @ w[idx])
        direct = obs_loglik(rec.y, rec.n, eta, "binomial")
        assert cluster_mixture_loglik(sch, rec, w, params, basis, "binomial") == \
            pytest.approx(direct, rel=1e-12)

    def test_constant_field_collapses(self):
        # with w = 0 every mixture component sees the same eta = mu
        data, schemes, basis, params, priors, _ = random_instance(4, "binomial", "J")
        w = np.zeros(basis.n_knots)
        for rec, sch in zip(data, schemes):
            expected = obs_loglik(rec.y, rec.n, params.mu, "binomial")
            got = cluster_mixture_loglik(sch, rec, w, params, basis, "binomial")
            assert got == pytest.approx(expected, rel=1e-12)

    def test_mixture_bounded_by_components(self, small_instance):
        data, schemes, basis, params, priors, w = small_instance
        for rec, sch in zip(data, schemes):
            keep = sch.weights > 0
            idx, val = basis.eval_many(sch.points[keep])
            etas = params.mu + (val * w[idx]).sum(axis=1)
            lls = obs_loglik(np.full(keep.sum(), rec.y), np.full(keep.sum(), rec.n),
                             etas, "binomial")
            mix = cluster_mixture_loglik(sch, rec, w, params, basis, "binomial")
            assert lls.min() - 1e-10 <= mix <= lls.max() + 1e-10

    def test_all_terms_underflow_gives_minus_inf(self):
        data, schemes, basis, params, priors, w = random_instance(5, "gaussian", "J")
        params = HyperParams(mu=params.mu, log_rho=params.log_rho,
                             log_sigma_s=params.log_sigma_s,
                             log_sigma_n=math.log(1e-8))
        rec = ClusterRecord("far", data[0].location, True, 1e200, 1, "all")
        got = cluster_mixture_loglik(schemes[0], rec, w, params, basis, "gaussian")
        assert got == -math.inf

    @pytest.mark.parametrize("urban", [True, False])
    def test_against_monte_carlo_integral(self, urban):
        # quadrature vs 1e5-draw MC of the location-marginalized likelihood,
        # with a field smooth at the scale the rings were designed for
        basis = BasisField(x0=-120.0, y0=-120.0, dx=24.0, dy=24.0, nx=11, ny=11)
        mat = MaternParams(sigma2=1.0, range=150.0)
        rng = np.random.default_rng(12)
        w = np.linalg.cholesky(basis.weight_cov(mat)) @ rng.standard_normal(basis.n_knots)
        params = HyperParams(mu=0.2, log_rho=math.log(150.0), log_sigma_s=0.0)
        jit = preset("dhs")
        rec = ClusterRecord("c", PlanarPoint(0.0, 0.0), urban, 55, 100, "all")
        sch = build_scheme(rec, None, jit)
        mix = cluster_mixture_loglik(sch, rec, w, params, basis, "binomial")

        draws = sample_jitter_many(rec.location, urban, jit, None, 100_000, seed=5)

        def field_fn(pts):
            idx, val = basis.eval_many(pts)
            return (val * w[idx]).sum(axis=1)

        mc = mc_marginal_likelihood(rec.y, rec.n, params.mu, field_fn, draws, "binomial")
        assert math.exp(mix) == pytest.approx(mc, rel=0.02)


class TestJointGradient:
    @pytest.mark.parametrize("family", ["binomial", "gaussian"])
    @pytest.mark.parametrize("variant", ["S", "J"])
    def test_gradient_matches_central_differences(self, family, variant):
        data, schemes, basis, params, priors, w = random_instance(11, family, variant)
        f0, g = joint_neg_logpost(w, params, data, schemes, basis, priors, family)
        h = 1e-5
        g_fd = np.empty_like(w)
        for i in range(w.size):
            e = np.zeros_like(w)
            e[i] = h
            fp, _ = joint_neg_logpost(w + e, params, data, schemes, basis, priors, family)
            fm, _ = joint_neg_logpost(w - e, params, data, schemes, basis, priors, family)
            g_fd[i] = (fp - fm) / (2 * h)
        rel = np.max(np.abs(g - g_fd)) / max(1.0, np.max(np.abs(g_fd)))
        assert rel <= 1e-4

    def test_prior_gradient_vanishes_at_zero(self):
        # at w = 0 the latent-prior gradient is Q @ 0 = 0, so the joint
        # gradient must not depend on the prior scale
        data, schemes, basis, params, priors, _ = random_instance(13, "binomial", "J")
        w = np.zeros(basis.n_knots)
        _, g1 = joint_neg_logpost(w, params, data, schemes, basis, priors, "binomial")
        bigger = HyperParams(mu=params.mu, log_rho=params.log_rho,
                             log_sigma_s=params.log_sigma_s + 1.0)
        _, g2 = joint_neg_logpost(w, bigger, data, schemes, basis, priors, "binomial")
        assert np.allclose(g1, g2, atol=1e-12)


class TestLaplace:
    def test_gaussian_single_point_is_exact(self):
        # conjugate linear-Gaussian case: the Laplace approximation equals
        # the closed-form marginal posterior
        for seed in (0, 1):
            data, schemes, basis, params, priors, _ = random_instance(seed, "gaussian", "S")
            val = laplace_marginal(params, data, schemes, basis, priors, "gaussian")
            y = np.array([r.y for r in data])
            locs = np.array([[r.location.x, r.location.y] for r in data])
            Phi = basis.design_matrix(locs)
            cov_w = basis.weight_cov(params.matern())
            logprior = (-0.5 * params.mu ** 2 / priors.mu_var
                        - 0.5 * math.log(2 * math.pi * priors.mu_var)
                        + pc_prior_logdensity(params.rho, params.sigma_s, priors)
                        + nugget_prior_logdensity(params.sigma_n, priors))
            oracle = gp_neg_log_marginal_posterior(y, Phi, cov_w, params.mu,
                                                   params.sigma2_n, logprior)
            assert val == pytest.approx(oracle, rel=1e-6)

    def test_binomial_single_active_weight_matches_quadrature(self):
        # cluster sitting exactly on a knot: the likelihood touches one
        # weight, so the exact marginal reduces to a 1-D integral
        basis = BasisField(x0=0.0, y0=0.0, dx=10.0, dy=10.0, nx=2, ny=2)
        loc = PlanarPoint(0.0, 0.0)
        y, n = 1200, 2000
        rec = ClusterRecord("c", loc, True, y, n, "all")
        schemes = [single_point_scheme(rec)]
        params = HyperParams(mu=0.3, log_rho=math.log(15.0), log_sigma_s=0.1)
        priors = PriorSpec(rho_0=15.0)
        val = laplace_marginal(params, [rec], schemes, basis, priors, "binomial")

        idx, bval = basis.eval_basis(loc)
        k = idx[np.argmax(bval)]
        cov_w = basis.weight_cov(params.matern())
        s_kk = math.sqrt(cov_w[k, k])
        theta_const = (0.5 * params.mu ** 2 / priors.mu_var
                       + 0.5 * math.log(2 * math.pi * priors.mu_var)
                       - pc_prior_logdensity(params.rho, params.sigma_s, priors))

        def integrand(x):
            return (math.exp(obs_loglik(y, n, params.mu + x, "binomial"))
                    * math.exp(-0.5 * (x / s_kk) ** 2) / (s_kk * math.sqrt(2 * math.pi)))

        marg, _ = integrate.quad(integrand, -8 * s_kk, 8 * s_kk, epsabs=1e-14)
        oracle = -math.log(marg) + theta_const
        assert val == pytest.approx(oracle, rel=1e-4)

    def test_per_datum_value_stabilizes(self):
        vals = {}
        for n_cl, seed in ((32, 21), (64, 21)):
            rng = np.random.default_rng(seed)
            basis = BasisField(x0=0.0, y0=0.0, dx=10.0, dy=10.0, nx=4, ny=4)
            params = HyperParams(mu=0.0, log_rho=math.log(20.0), log_sigma_s=0.0)
            priors = PriorSpec(rho_0=20.0)
            data = [ClusterRecord(f"c{i}", PlanarPoint(*rng.uniform(5, 25, 2)),
                                  True, int(rng.binomial(50, 0.5)), 50, "all")
                    for i in range(n_cl)]
            schemes = [single_point_scheme(r) for r in data]
            vals[n_cl] = laplace_marginal(params, data, schemes, basis, priors,
                                          "binomial") / n_cl
        assert vals[64] == pytest.approx(vals[32], rel=0.25)


class TestDegeneracyEquivalence:
    def test_zero_jitter_matches_single_point(self):
        data, _, basis, params, priors, w = random_instance(17, "binomial", "S")
        zero = JitterScheme(urban_max=0.0, rural_inner=0.0, rural_outer=0.0)
        schemes_j = [build_scheme(r, None, zero) for r in data]
        schemes_s = [single_point_scheme(r) for r in data]
        fj, gj = joint_neg_logpost(w, params, data, schemes_j, basis, priors, "binomial")
        fs, gs = joint_neg_logpost(w, params, data, schemes_s, basis, priors, "binomial")
        assert fj == pytest.approx(fs, rel=1e-12)
        assert np.allclose(gj, gs, rtol=1e-12, atol=1e-14)
        vj = laplace_marginal(params, data, schemes_j, basis, priors, "binomial")
        vs = laplace_marginal(params, data, schemes_s, basis, priors, "binomial")
        assert vj == pytest.approx(vs, rel=1e-12)


class TestRotationInvariance:
    def _value(self, rot, variant):
        basis = BasisField(x0=-20.0, y0=-20.0, dx=10.0, dy=10.0, nx=5, ny=5)
        jit = JitterScheme(urban_max=2.0, rural_inner=2.5, rural_outer=4.0,
                           rural_outer_prob=0.01)
        rng = np.random.default_rng(23)
        locs = rng.uniform(-12, 12, size=(5, 2))
        ys = rng.binomial(80, 0.5, size=5)
        params = HyperParams(mu=0.1, log_rho=math.log(25.0), log_sigma_s=0.0)
        priors = PriorSpec(rho_0=25.0)
        pts = locs @ rot.T
        data = [ClusterRecord(f"c{i}", PlanarPoint(*pts[i]), i % 2 == 0,
                              int(ys[i]), 80, "all") for i in range(5)]
        schemes = ([build_scheme(r, None, jit) for r in data] if variant == "J"
                   else [single_point_scheme(r) for r in data])
        return laplace_marginal(params, data, schemes, basis, priors, "binomial")

    QUARTER = np.array([[0.0, -1.0], [1.0, 0.0]])

    def test_quarter_turn_single_point_exact(self):
        # a quarter turn about the (square) grid center maps knots onto
        # knots, and single-point schemes rotate with their clusters
        assert self._value(self.QUARTER, "S") == pytest.approx(
            self._value(np.eye(2), "S"), rel=1e-11)

    def test_quarter_turn_rings_at_discretization_level(self):
        # the ring lattice around each cluster does not itself rotate, so
        # invariance of the marginalized objective holds at the quadrature
        # discretization level rather than to machine precision
        assert self._value(self.QUARTER, "J") == pytest.approx(
            self._value(np.eye(2), "J"), rel=2e-4)


class TestFit:
    def test_standard_model_self_consistency(self):
        # no displacement anywhere, data simulated from the model's own
        # field representation: the standard model must recover the range,
        # within generous per-replicate bounds
        rho_true, domain = 160.0, 1200.0
        basis = BasisField.cover(0, 0, domain, domain, n_side=15, buffer_km=120.0)
        corr_chol = np.linalg.cholesky(
            basis.weight_cov(MaternParams(sigma2=1.0, range=rho_true)))
        rel_errors = []
        for rep in range(5):
            rng = np.random.default_rng(400 + rep)
            w = corr_chol @ rng.standard_normal(basis.n_knots)
            locs = rng.uniform(0, domain, size=(150, 2))
            idx, val = basis.eval_many(locs)
            u = (val * w[idx]).sum(axis=1)
            data = [ClusterRecord(f"c{i}", PlanarPoint(*locs[i]), True,
                                  int(rng.binomial(100, expit(u[i]))), 100, "all")
                    for i in range(150)]
            priors = PriorSpec(rho_0=rho_true)
            res = fit(data, None, None, priors, "binomial", FitConfig(basis=basis))
            rel_errors.append(res.params["rho"].median / rho_true - 1.0)
        rel_errors = np.array(rel_errors)
        assert np.all(np.abs(rel_errors) < 0.40)
        assert abs(np.median(rel_errors)) < 0.15

    def test_fit_result_interval_ordering(self):
        data, schemes, basis, params, priors, _ = random_instance(29, "gaussian", "S")
        res = fit(data, None, None, priors, "gaussian", FitConfig(basis=basis))
        for name, s in res.params.items():
            assert s.lower < s.median < s.upper
        np.linalg.cholesky(res.w_prec)  # conditional precision is PD

    def test_binomial_family_validates_counts(self):
        rec = ClusterRecord("c", PlanarPoint(0, 0), True, 7.5, 10, "all")
        priors = PriorSpec(rho_0=10.0)
        with pytest.raises(ValueError, match="integer"):
            fit([rec], None, None, priors, "binomial", FitConfig())


class TestPredict:
    def _pinned_fit(self, mu=0.0):
        basis = BasisField(x0=0.0, y0=0.0, dx=10.0, dy=10.0, nx=3, ny=3)
        K = basis.n_knots
        params = HyperParams(mu=mu, log_rho=math.log(20.0), log_sigma_s=0.0)
        return FitResult(
            map=params, curvature=np.eye(3) * 1e18, params={},
            w_mean=np.zeros(K), w_prec=np.eye(K) * 1e18, converged=True,
            trace=[], family="binomial", basis=basis,
            priors=PriorSpec(rho_0=20.0), psi_cov=np.eye(3) * 1e-18)

    def test_pinned_zero_field_predicts_half(self):
        res = self._pinned_fit(mu=0.0)
        pred = predict(res, np.array([[5.0, 5.0], [12.0, 17.0]]), n_samples=200, seed=0)
        assert np.allclose(pred.mean, 0.5, atol=1e-6)
        assert np.all(pred.sd < 1e-6)

    def test_heavy_data_pins_knot_probability(self):
        # one huge cluster at a knot: the predictive mean there approaches
        # the empirical proportion
        basis = BasisField(x0=0.0, y0=0.0, dx=10.0, dy=10.0, nx=3, ny=3)
        rec = ClusterRecord("c", PlanarPoint(10.0, 10.0), True, 70_000, 100_000, "all")
        priors = PriorSpec(rho_0=20.0)
        res = fit([rec], None, None, priors, "binomial", FitConfig(basis=basis))
        pred = predict(res, np.array([[10.0, 10.0]]), n_samples=2000, seed=1)
        assert pred.mean[0] == pytest.approx(0.7, abs=0.01)

    def test_needs_min_samples(self):
        res = self._pinned_fit()
        with pytest.raises(ValueError, match="n_samples"):
            predict(res, np.array([[5.0, 5.0]]), n_samples=10)

    def test_resolve_mode_agrees_with_fast_path(self):
        # re-solving the latent mode per hyperparameter draw should give
        # predictions close to the mode-conditional shortcut
        data, schemes, basis, params, priors, _ = random_instance(31, "binomial", "S")
        res = fit(data, None, None, priors, "binomial", FitConfig(basis=basis))
        at = np.array([[10.0, 10.0], [20.0, 15.0]])
        fast = predict(res, at, n_samples=400, seed=3)
        slow = predict(res, at, n_samples=100, seed=3, resolve=True,
                       data=data, schemes=schemes)
        assert np.allclose(fast.mean, slow.mean, atol=0.05)

    def test_resolve_mode_needs_data(self):
        res = self._pinned_fit()
        with pytest.raises(ValueError, match="resolve"):
            predict(res, np.array([[5.0, 5.0]]), n_samples=100, resolve=True)
