# inference.py
# The EP / QP outer loop: cavity, local projection, site update, posterior
# recomputation, approximate log evidence and hyperparameter optimization.
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from scipy import linalg, optimize

from modules.errors import DomainError, NumericalError, SiteUpdateError, SkipUpdate, ValidationError
from modules.kernel import KernelParams, build_cov, jittered_cholesky
from modules.likelihoods import CavityParams, NumericalEvents
from modules.lookup import interp_sigma
from modules.projection import Method, ProjectedGaussian, project_tilted
from modules.special_fns import LOG_SQRT_2PI

logger = logging.getLogger(__name__)

SITE_PRECISION_FLOOR = 1e-12
ORDERING_SLACK = 1e-9


class SigmaSource(str, Enum):
    QUADRATURE = "quadrature"
    TABLE = "table"


@dataclass(frozen=True)
class SiteParams:
    """Gaussian site stored by its natural parameters; tau == 0 is the vacuous site."""

    tau: float = 0.0
    nu: float = 0.0
    log_zt: float = 0.0
    clipped: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.tau) and self.tau >= 0):
            raise DomainError(f"site precision must be finite and nonnegative, got {self.tau}")
        if not math.isfinite(self.nu):
            raise DomainError("site precision-mean must be finite")

    @classmethod
    def vacuous(cls):
        return cls()

    @classmethod
    def from_moments(cls, mu_t, var_t, log_zt=0.0):
        if var_t == math.inf:
            return cls()
        if not var_t > 0:
            raise DomainError(f"site variance must be positive, got {var_t}")
        return cls(1.0 / var_t, mu_t / var_t, log_zt)

    @property
    def is_vacuous(self):
        return self.tau == 0.0

    @property
    def var_t(self):
        return math.inf if self.is_vacuous else 1.0 / self.tau

    @property
    def mu_t(self):
        return 0.0 if self.is_vacuous else self.nu / self.tau


@dataclass(frozen=True)
class HyperoptConfig:
    enabled: bool = True
    maxiter: int = 1000
    ftol: float = 1e-9
    fd_step: float = 1e-5
    log_bounds: tuple = (-7.0, 7.0)
    penalty: float = 1e10
    floor_lengthscales: bool = True


@dataclass(frozen=True)
class FitConfig:
    method: Method = Method.EP
    sigma_source: SigmaSource = SigmaSource.QUADRATURE
    inner_tol: float = 1e-6
    max_sweeps: int = 100
    damping: float = 0.9
    order: str = "index"
    seed: int = 0
    hyperopt: HyperoptConfig = field(default_factory=HyperoptConfig)

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "sigma_source", SigmaSource(self.sigma_source))
        if self.method not in (Method.EP, Method.QP):
            raise ValidationError(f"fit method must be ep or qp, got {self.method.value}")
        if not self.inner_tol > 0:
            raise ValidationError("inner_tol must be positive")
        if self.max_sweeps < 1:
            raise ValidationError("max_sweeps must be at least 1")
        if not 0 < self.damping <= 1:
            raise ValidationError(f"damping must lie in (0, 1], got {self.damping}")
        if self.order not in ("index", "random"):
            raise ValidationError(f"order must be 'index' or 'random', got {self.order}")


@dataclass
class FitDiagnostics:
    sweeps: int = 0
    converged: bool = False
    rms_change: float = math.inf
    skipped: int = 0
    clipped: int = 0
    ordering_clamps: int = 0
    jitter: float = 0.0
    events: NumericalEvents = field(default_factory=NumericalEvents)
    lookup_sources: Counter = field(default_factory=Counter)

    def as_row(self):
        return {
            "sweeps": self.sweeps,
            "converged": self.converged,
            "skipped": self.skipped,
            "clipped": self.clipped,
            "ordering_clamps": self.ordering_clamps,
            "moment_fallbacks": self.events.moment_fallbacks,
            "cdf_fallbacks": self.events.cdf_fallbacks,
            "table_fallbacks": sum(n for source, n in self.lookup_sources.items() if source != "table"),
            "jitter": self.jitter,
        }


@dataclass
class PosteriorState:
    mu: np.ndarray
    cov: np.ndarray
    sites: list
    log_evidence: float
    kernel: object
    chol: np.ndarray
    sqrt_tau: np.ndarray
    jitter: float = 0.0
    diagnostics: FitDiagnostics = field(default_factory=FitDiagnostics)

    @property
    def site_tau(self):
        return np.array([site.tau for site in self.sites])

    @property
    def site_nu(self):
        return np.array([site.nu for site in self.sites])

    @property
    def site_var(self):
        return np.array([site.var_t for site in self.sites])


def cavity(marginal_mu, marginal_var, site):
    if not marginal_var > 0:
        raise DomainError(f"marginal variance must be positive, got {marginal_var}")
    if site.is_vacuous:
        return CavityParams(marginal_mu, marginal_var)
    tau_c = 1.0 / marginal_var - site.tau
    if not tau_c > 0:
        raise SkipUpdate(f"cavity precision {tau_c:.3g} is not positive")
    nu_c = marginal_mu / marginal_var - site.nu
    return CavityParams(nu_c / tau_c, 1.0 / tau_c)


def _site_log_normalizer(tilted_log_z, cav, tau, nu):
    """log Z~ such that Z~ N(f | mu~, 1/tau) times the cavity integrates to Z."""
    spread = 1.0 + cav.var * tau
    gap = cav.mu * tau - nu
    return tilted_log_z + 0.5 * math.log(2.0 * math.pi * spread / tau) + gap * gap / (2.0 * tau * spread)


def site_update(cav, projected, damping=1.0, previous=None, tilted_log_z=0.0):
    """New site from the projected Gaussian, blended with the previous site in natural parameters."""
    if not projected.var > 0:
        raise DomainError("projected variance must be positive")
    previous = previous or SiteParams.vacuous()
    tau_new = 1.0 / projected.var - 1.0 / cav.var
    nu_new = projected.mean / projected.var - cav.mu / cav.var
    tau = damping * tau_new + (1.0 - damping) * previous.tau
    nu = damping * nu_new + (1.0 - damping) * previous.nu

    if tau == 0.0 and nu == 0.0:
        return SiteParams.vacuous()
    clipped = False
    if tau <= 0.0:
        tau = SITE_PRECISION_FLOOR
        nu = tau * projected.mean
        clipped = True
    return SiteParams(tau, nu, _site_log_normalizer(tilted_log_z, cav, tau, nu), clipped)


def recompute_posterior(K, sites):
    """Posterior mean, covariance and log evidence through B = I + S^1/2 K S^1/2."""
    n = K.n
    if len(sites) != n:
        raise ValidationError(f"{len(sites)} sites for a {n}x{n} covariance")
    tau = np.array([site.tau for site in sites])
    nu = np.array([site.nu for site in sites])
    log_zt = np.array([site.log_zt for site in sites])
    sqrt_tau = np.sqrt(tau)
    scale = np.outer(sqrt_tau, sqrt_tau)

    L, jitter = jittered_cholesky(lambda j: np.eye(n) + scale * K.with_jitter(j), K.gamma)
    Kj = K.with_jitter(jitter) if jitter else K.K
    V = linalg.solve_triangular(L, sqrt_tau[:, None] * Kj, lower=True)
    cov = Kj - V.T @ V
    cov = 0.5 * (cov + cov.T)
    mu = cov @ nu

    active = tau > 0
    b = np.zeros(n)
    b[active] = nu[active] / sqrt_tau[active]
    whitened = linalg.solve_triangular(L, b, lower=True)
    log_evidence = (
        np.sum(log_zt[active] - LOG_SQRT_2PI + 0.5 * np.log(tau[active]))
        - np.sum(np.log(np.diag(L)))
        - 0.5 * whitened @ whitened
    )
    return PosteriorState(mu, cov, list(sites), float(log_evidence), K, L, sqrt_tau, jitter)


def _site_change(old_sites, new_sites):
    """RMS change of (mu~, sigma~) across all sites; a site turning non-vacuous counts as infinite."""
    old_mu = np.array([s.mu_t for s in old_sites])
    new_mu = np.array([s.mu_t for s in new_sites])
    old_sd = np.sqrt([s.var_t for s in old_sites])
    new_sd = np.sqrt([s.var_t for s in new_sites])
    both_vacuous = np.isinf(old_sd) & np.isinf(new_sd)
    with np.errstate(invalid="ignore"):
        d_sd = np.where(both_vacuous, 0.0, np.abs(new_sd - old_sd))
    d_mu = new_mu - old_mu
    return float(np.sqrt(np.mean(np.concatenate((d_mu * d_mu, d_sd * d_sd)))))


def _project_site(likelihood, cav, y, config, table, diagnostics):
    if config.method is Method.EP:
        return project_tilted(likelihood, cav, y, Method.EP, diagnostics.events)
    if config.sigma_source is SigmaSource.QUADRATURE:
        projected, tilted = project_tilted(likelihood, cav, y, Method.QP, diagnostics.events)
    else:
        tilted = likelihood.tilted_moments(cav, y)
        if tilted.fallback:
            diagnostics.events.moment_fallbacks += 1
        sigma, source = interp_sigma(table, cav, y, likelihood, diagnostics.events)
        diagnostics.lookup_sources[source.value] += 1
        projected = ProjectedGaussian(tilted.mean, sigma * sigma, Method.QP)

    if projected.var > tilted.var:
        if projected.var > tilted.var + ORDERING_SLACK:
            logger.debug("QP variance %.6g above EP variance %.6g, clamped", projected.var, tilted.var)
        diagnostics.ordering_clamps += 1
        projected = ProjectedGaussian(projected.mean, tilted.var, Method.QP)
    return projected, tilted


def fit(X, y, params, config, likelihood, warm_start=None, table=None):
    """Run sweeps of local updates until the RMS site change drops below config.inner_tol."""
    y = likelihood.validate(y)
    K = build_cov(X, params)
    n = K.n
    if y.shape[0] != n:
        raise ValidationError(f"{n} inputs but {y.shape[0]} observations")
    if config.method is Method.QP and config.sigma_source is SigmaSource.TABLE and table is None:
        raise ValidationError("sigma_source=table needs a lookup table")

    sites = list(warm_start) if warm_start is not None else [SiteParams.vacuous()] * n
    state = recompute_posterior(K, sites)
    Sigma, mu = state.cov.copy(), state.mu.copy()
    nu = state.site_nu
    diagnostics = FitDiagnostics()
    rng = np.random.default_rng(config.seed)

    for sweep in range(1, config.max_sweeps + 1):
        previous_sites = list(sites)
        order = rng.permutation(n) if config.order == "random" else range(n)
        for i in order:
            try:
                cav = cavity(mu[i], Sigma[i, i], sites[i])
            except SkipUpdate:
                diagnostics.skipped += 1
                continue
            try:
                projected, tilted = _project_site(likelihood, cav, y[i], config, table, diagnostics)
                new_site = site_update(cav, projected, config.damping, sites[i], tilted.log_z)
            except (NumericalError, DomainError) as exc:
                raise SiteUpdateError(int(i), exc) from exc
            if new_site.clipped:
                diagnostics.clipped += 1

            delta = new_site.tau - sites[i].tau
            sites[i] = new_site
            nu[i] = new_site.nu
            denom = 1.0 + delta * Sigma[i, i]
            if denom > 0:
                column = Sigma[:, i].copy()
                Sigma -= (delta / denom) * np.outer(column, column)
                mu = Sigma @ nu
            else:
                refreshed = recompute_posterior(K, sites)
                Sigma, mu = refreshed.cov.copy(), refreshed.mu.copy()

        state = recompute_posterior(K, sites)
        Sigma, mu = state.cov.copy(), state.mu.copy()
        diagnostics.sweeps = sweep
        diagnostics.rms_change = _site_change(previous_sites, sites)
        logger.debug("sweep %d: rms site change %.3g, log evidence %.6f", sweep, diagnostics.rms_change, state.log_evidence)
        if diagnostics.rms_change < config.inner_tol:
            diagnostics.converged = True
            break

    if not diagnostics.converged:
        logger.warning("%s did not converge in %d sweeps (rms change %.3g)",
                       config.method.value.upper(), config.max_sweeps, diagnostics.rms_change)
    diagnostics.jitter = state.jitter
    state.diagnostics = diagnostics
    return state


def fd_gradient(objective, theta, value, centre_ok, step):
    """Central differences; one-sided where a neighbour fit fails, zero where both do.

    objective returns (value, state) with state None on failure.
    """
    grad = np.zeros_like(theta)
    for j in range(theta.size):
        offset = np.zeros_like(theta)
        offset[j] = step
        upper, upper_state = objective(theta + offset)
        lower, lower_state = objective(theta - offset)
        upper_ok, lower_ok = upper_state is not None, lower_state is not None
        if upper_ok and lower_ok:
            grad[j] = (upper - lower) / (2.0 * step)
        elif upper_ok and centre_ok:
            grad[j] = (upper - value) / step
        elif lower_ok and centre_ok:
            grad[j] = (value - lower) / step
        else:
            logger.debug("no finite-difference gradient for coordinate %d at theta=%s", j, np.round(theta, 4))
    return grad


def lengthscale_floor(X):
    """Per-column smallest gap between distinct input values, or None for columns with at most two values.

    Columns with more values are treated as ordered grids; a lengthscale below
    their spacing decouples neighbouring inputs entirely.
    """
    floors = []
    for column in np.asarray(X, dtype=float).T:
        values = np.unique(column)
        floors.append(float(np.min(np.diff(values))) if values.size > 2 else None)
    return floors


def hyper_bounds(X, hyper):
    """L-BFGS-B bounds on (log gamma, log lengthscales)."""
    lo, hi = hyper.log_bounds
    bounds = [(lo, hi)]
    for floor in lengthscale_floor(X):
        floor_lo = lo if floor is None or not hyper.floor_lengthscales else min(max(lo, math.log(floor)), hi)
        bounds.append((floor_lo, hi))
    return bounds


def optimize_hypers(X, y, init, config, likelihood, table=None):
    """Maximize the approximate log evidence over log-hyperparameters with L-BFGS-B.

    Gradients are central finite differences; every objective evaluation
    refits the sites, warm-started from the last successful centre fit.
    """
    hyper = config.hyperopt
    theta0 = init.to_log()
    memo = {"sites": None, "best": (math.inf, theta0, None)}

    def objective(theta):
        try:
            state = fit(X, y, KernelParams.from_log(theta), config, likelihood, memo["sites"], table)
        except (NumericalError, DomainError) as exc:
            logger.debug("objective failed at theta=%s: %s", np.round(theta, 4), exc)
            return hyper.penalty, None
        value = -state.log_evidence
        if not math.isfinite(value):
            return hyper.penalty, None
        return value, state

    def value_and_grad(theta):
        value, state = objective(theta)
        if state is not None:
            memo["sites"] = state.sites
            if value < memo["best"][0]:
                memo["best"] = (value, np.array(theta), state)
        return value, fd_gradient(objective, theta, value, state is not None, hyper.fd_step)

    result = optimize.minimize(
        value_and_grad,
        theta0,
        jac=True,
        method="L-BFGS-B",
        bounds=hyper_bounds(X, hyper),
        options={"maxiter": hyper.maxiter, "ftol": hyper.ftol},
    )
    if not result.success:
        logger.warning("hyperparameter optimization stopped early: %s", result.message)

    best_value, best_theta, best_state = memo["best"]
    if best_state is None:
        raise NumericalError("no hyperparameter setting produced a valid fit", {"init": init})
    params = KernelParams.from_log(best_theta)
    logger.info("optimized %s, log evidence %.4f after %d iterations", params, -best_value, result.nit)
    return params, best_state


def fit_with_hypers(X, y, config, likelihood, params=None, table=None):
    params = params or KernelParams.default(np.asarray(X).shape[1])
    if config.hyperopt.enabled:
        return optimize_hypers(X, y, params, config, likelihood, table)
    return params, fit(X, y, params, config, likelihood, table=table)
