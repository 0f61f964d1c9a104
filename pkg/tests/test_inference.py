import math

import numpy as np
import pytest
from scipy import linalg, stats

from modules.errors import DomainError, SkipUpdate, ValidationError
from modules.inference import (
    FitConfig,
    HyperoptConfig,
    SiteParams,
    SigmaSource,
    cavity,
    fit,
    fd_gradient,
    fit_with_hypers,
    hyper_bounds,
    lengthscale_floor,
    optimize_hypers,
    recompute_posterior,
    site_update,
)
from modules.kernel import KernelParams, build_cov
from modules.likelihoods import POISSON_SQ, PROBIT, CavityParams
from modules.lookup import GridAxis, GridSpec, precompute_table
from modules.projection import Method, ProjectedGaussian

NO_HYPEROPT = HyperoptConfig(enabled=False)


def toy_classification(rng, n=20):
    X = rng.standard_normal((n, 2))
    y = np.where(X[:, 0] + 0.3 * rng.standard_normal(n) > 0, 1, -1)
    return X, y


def test_site_round_trip_and_vacuous():
    site = SiteParams.from_moments(0.5, 2.0, log_zt=0.1)
    assert site.tau == 0.5 and site.nu == 0.25
    assert site.mu_t == pytest.approx(0.5) and site.var_t == pytest.approx(2.0)
    vacuous = SiteParams.from_moments(0.0, math.inf)
    assert vacuous.is_vacuous and vacuous.var_t == math.inf
    with pytest.raises(DomainError):
        SiteParams(tau=-1.0)


def test_cavity_removes_site():
    site = SiteParams.from_moments(1.0, 4.0)
    cav = cavity(0.6, 0.8, site)
    assert 1.0 / cav.var == pytest.approx(1.0 / 0.8 - 0.25)
    assert cav.mu / cav.var == pytest.approx(0.6 / 0.8 - 0.25)
    assert cavity(0.3, 1.2, SiteParams.vacuous()) == CavityParams(0.3, 1.2)


def test_cavity_with_nonpositive_precision_is_skipped():
    with pytest.raises(SkipUpdate):
        cavity(0.0, 1.0, SiteParams(tau=2.0))


def test_site_update_recovers_projection():
    cav = CavityParams(0.2, 1.5)
    projected = ProjectedGaussian(0.7, 0.6, Method.EP)
    site = site_update(cav, projected)
    var = 1.0 / (1.0 / cav.var + site.tau)
    mean = var * (cav.mu / cav.var + site.nu)
    assert var == pytest.approx(projected.var)
    assert mean == pytest.approx(projected.mean)


def test_site_update_damping_blends_natural_parameters():
    cav = CavityParams(0.0, 1.0)
    previous = SiteParams(tau=0.4, nu=0.1)
    full = site_update(cav, ProjectedGaussian(0.5, 0.5, Method.EP))
    damped = site_update(cav, ProjectedGaussian(0.5, 0.5, Method.EP), damping=0.5, previous=previous)
    assert damped.tau == pytest.approx(0.5 * full.tau + 0.5 * previous.tau)
    assert damped.nu == pytest.approx(0.5 * full.nu + 0.5 * previous.nu)


def test_site_update_clips_negative_precision():
    cav = CavityParams(0.0, 1.0)
    site = site_update(cav, ProjectedGaussian(0.3, 2.0, Method.EP))
    assert site.clipped
    assert site.tau == pytest.approx(1e-12)
    assert site.nu == pytest.approx(1e-12 * 0.3)


def test_recompute_posterior_matches_direct_inversion(rng):
    X = rng.standard_normal((12, 2))
    K = build_cov(X, KernelParams(1.3, [0.9, 1.4]))
    sites = [SiteParams(tau=t, nu=n) for t, n in zip(rng.uniform(0.1, 3.0, 12), rng.standard_normal(12))]
    sites[3] = SiteParams.vacuous()
    state = recompute_posterior(K, sites)

    tau = np.array([s.tau for s in sites])
    nu = np.array([s.nu for s in sites])
    active = tau > 0
    K_a = K.K[:, active]
    direct_cov = K.K - K_a @ linalg.solve(K.K[np.ix_(active, active)] + np.diag(1.0 / tau[active]), K_a.T)
    np.testing.assert_allclose(state.cov, direct_cov, atol=1e-8)
    np.testing.assert_allclose(state.mu, direct_cov @ nu, atol=1e-8)
    np.testing.assert_array_equal(state.cov, state.cov.T)


def test_recompute_posterior_with_all_vacuous_sites(rng):
    K = build_cov(rng.standard_normal((5, 1)), KernelParams(1.0, [1.0]))
    state = recompute_posterior(K, [SiteParams.vacuous()] * 5)
    np.testing.assert_allclose(state.cov, K.K)
    assert state.log_evidence == pytest.approx(0.0)


@pytest.mark.parametrize("method", ["ep", "qp"])
def test_gaussian_likelihood_gives_exact_evidence(rng, gaussian_likelihood, method):
    X = rng.standard_normal((15, 2))
    y = np.sin(X[:, 0]) + 0.5 * rng.standard_normal(15)
    params = KernelParams(1.0, [1.0, 1.0])
    config = FitConfig(method=method, damping=1.0, hyperopt=NO_HYPEROPT)
    state = fit(X, y, params, config, gaussian_likelihood)

    K = build_cov(X, params).K
    exact = stats.multivariate_normal(np.zeros(15), K + gaussian_likelihood.noise * np.eye(15)).logpdf(y)
    assert state.diagnostics.converged
    assert state.diagnostics.sweeps <= 2
    assert state.log_evidence == pytest.approx(exact, abs=1e-8)
    np.testing.assert_allclose(state.site_var, np.full(15, gaussian_likelihood.noise), rtol=1e-9)


def test_ep_fit_on_classification(rng):
    X, y = toy_classification(rng)
    state = fit(X, y, KernelParams.default(2), FitConfig(hyperopt=NO_HYPEROPT), PROBIT)
    assert state.diagnostics.converged
    assert np.all(state.site_tau > 0)
    assert math.isfinite(state.log_evidence)
    assert np.mean(np.sign(state.mu) == y) > 0.8


def test_qp_fit_agrees_with_ep_on_labels(rng):
    X, y = toy_classification(rng, n=12)
    params = KernelParams.default(2)
    ep = fit(X, y, params, FitConfig(method="ep", hyperopt=NO_HYPEROPT), PROBIT)
    qp = fit(X, y, params, FitConfig(method="qp", hyperopt=NO_HYPEROPT), PROBIT)
    assert qp.diagnostics.converged
    assert np.mean(np.sign(qp.mu) == np.sign(ep.mu)) >= 0.9
    assert math.isfinite(qp.log_evidence)


def test_qp_from_table_matches_quadrature():
    X = np.linspace(0.0, 0.3, 5)[:, None]
    y = np.ones(5, dtype=int)
    params = KernelParams(1.0, [1.0])
    direct = fit(X, y, params, FitConfig(method="qp", hyperopt=NO_HYPEROPT), PROBIT)

    cavities = [cavity(direct.mu[i], direct.cov[i, i], site) for i, site in enumerate(direct.sites)]
    mus = [c.mu for c in cavities]
    log_sigmas = [math.log10(c.std) for c in cavities]
    grid = GridSpec(GridAxis(min(mus) - 0.02, max(mus) + 0.02, 21),
                    GridAxis(min(log_sigmas) - 0.01, max(log_sigmas) + 0.01, 21, log10=True))
    table = precompute_table(PROBIT, [1], grid, progress=False)

    config = FitConfig(method="qp", sigma_source="table", hyperopt=NO_HYPEROPT)
    state = fit(X, y, params, config, PROBIT, table=table)
    assert state.diagnostics.converged
    assert state.diagnostics.lookup_sources["table"] > 0
    np.testing.assert_allclose(state.site_tau, direct.site_tau, atol=1e-4)
    np.testing.assert_allclose(np.diag(state.cov), np.diag(direct.cov), atol=1e-5)
    np.testing.assert_array_equal(np.sign(state.mu), np.sign(direct.mu))


def test_table_source_requires_a_table(rng):
    X, y = toy_classification(rng, n=5)
    with pytest.raises(ValidationError):
        fit(X, y, KernelParams.default(2), FitConfig(method="qp", sigma_source=SigmaSource.TABLE), PROBIT)


def test_poisson_fit_runs(rng):
    X = np.linspace(-2, 2, 15)[:, None]
    y = rng.poisson(np.exp(X[:, 0]))
    state = fit(X, y, KernelParams(1.0, [1.0]), FitConfig(hyperopt=NO_HYPEROPT), POISSON_SQ)
    assert state.diagnostics.converged
    assert math.isfinite(state.log_evidence)


@pytest.mark.parametrize("kwargs", [dict(damping=0.0), dict(damping=1.5), dict(inner_tol=0.0),
                                    dict(max_sweeps=0), dict(order="reverse"), dict(method="lp")])
def test_fit_config_validation(kwargs):
    with pytest.raises(ValidationError):
        FitConfig(**kwargs)


def test_mismatched_inputs_rejected(rng):
    with pytest.raises(ValidationError):
        fit(rng.standard_normal((4, 2)), np.array([1, -1, 1]), KernelParams.default(2), FitConfig(), PROBIT)
    with pytest.raises(ValidationError):
        fit(rng.standard_normal((3, 2)), np.array([1, 0, 1]), KernelParams.default(2), FitConfig(), PROBIT)


def test_hyperparameter_optimization_improves_evidence(rng):
    X, y = toy_classification(rng, n=15)
    init = KernelParams(1.0, [5.0, 5.0])
    config = FitConfig(hyperopt=HyperoptConfig(maxiter=15))
    start = fit(X, y, init, config, PROBIT)
    params, state = optimize_hypers(X, y, init, config, PROBIT)
    assert state.log_evidence >= start.log_evidence - 1e-6
    assert np.all(np.abs(params.to_log()) <= 7.0)


def test_fit_with_hypers_without_optimization(rng):
    X, y = toy_classification(rng, n=10)
    params, state = fit_with_hypers(X, y, FitConfig(hyperopt=NO_HYPEROPT), PROBIT)
    np.testing.assert_allclose(params.lengthscales, [math.sqrt(2)] * 2)
    assert state.diagnostics.sweeps >= 1


def test_fd_gradient_goes_one_sided_around_failed_fits():
    def objective(theta):
        if theta[0] > 0.5:
            return 1e10, None
        return float(theta @ theta), "ok"

    theta = np.array([0.5, 1.0])
    value, _ = objective(theta)
    grad = fd_gradient(objective, theta, value, True, 1e-5)
    assert grad[0] == pytest.approx(1.0, abs=1e-4)
    assert grad[1] == pytest.approx(2.0, abs=1e-6)

    def broken(theta):
        return 1e10, None

    np.testing.assert_array_equal(fd_gradient(broken, theta, 1e10, False, 1e-5), [0.0, 0.0])


def test_lengthscale_floor_follows_input_spacing():
    years = np.arange(1851, 1863, dtype=float)
    X = np.column_stack([(years - years.mean()) / years.std(), np.tile([0.0, 1.0], 6)])
    floors = lengthscale_floor(X)
    assert floors[0] == pytest.approx(1.0 / years.std())
    assert floors[1] is None
    bounds = hyper_bounds(X, HyperoptConfig())
    assert bounds[0] == (-7.0, 7.0)
    assert bounds[1][0] == pytest.approx(math.log(floors[0]))
    assert bounds[2] == (-7.0, 7.0)
    assert hyper_bounds(X, HyperoptConfig(floor_lengthscales=False))[1] == (-7.0, 7.0)


def test_poisson_hyperparameters_stay_above_bin_spacing(rng):
    years = np.arange(1900, 1930, dtype=float)
    X = ((years - years.mean()) / years.std())[:, None]
    y = rng.poisson(2.0, size=years.size)
    config = FitConfig(hyperopt=HyperoptConfig(maxiter=10))
    params, state = optimize_hypers(X, y, KernelParams.default(1), config, POISSON_SQ)
    assert params.lengthscales[0] >= (1.0 / years.std()) * (1.0 - 1e-9)
    assert math.isfinite(state.log_evidence)
