# projection.py
# Univariate Gaussian projections of a tilted distribution: KL moment matching
# (EP), 2-Wasserstein quantile matching (QP) and a generic L_p Wasserstein
# projection solved by gradient descent.
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy import integrate, special

from modules.errors import DomainError, NonConvergenceError, NumericalError
from modules.special_fns import SQRT_2PI, erf_inv, std_normal_pdf

logger = logging.getLogger(__name__)

W2_TOL = 1e-10
CDF_EDGE = 1e-12
# |2F - 1| at or above this contributes nothing to the sigma* integrand.
_ERF_EDGE = 1.0 - 1e-15
_F_FLOOR = 1e-300
_F_CEIL = 1.0 - 1e-16
_Z_LIMIT = 8.0

LP_GRAD_TOL = 1e-8
LP_MAX_ITER = 10_000
ARMIJO_C = 1e-4


class Method(str, Enum):
    EP = "ep"
    QP = "qp"
    LP = "lp"


@dataclass(frozen=True)
class ProjectedGaussian:
    mean: float
    var: float
    method: Method
    p: Optional[float] = None

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.var) and self.var > 0):
            raise NumericalError("invalid projected Gaussian", {"mean": self.mean, "var": self.var})

    @property
    def std(self):
        return math.sqrt(self.var)


def project_kl(tilted):
    return ProjectedGaussian(tilted.mean, tilted.var, Method.EP)


def _sigma_integrand(cdf):
    def integrand(f):
        u = 2.0 * cdf(f) - 1.0
        if abs(u) >= _ERF_EDGE:
            return 0.0
        e = erf_inv(u)
        return math.exp(-e * e)
    return integrand


def project_w2(cdf, tilted_mean, support_hint, tol=W2_TOL):
    """Quantile-matching projection: mean of the tilted distribution and

        sigma* = 1/sqrt(2 pi) * int exp(-erfinv(2 F(f) - 1)^2) df

    integrated in f over support_hint, so no quantile inversion is needed.
    """
    lo, hi = support_hint
    if not lo < hi:
        raise DomainError(f"empty support ({lo}, {hi})")
    integrand = _sigma_integrand(cdf)
    points = [tilted_mean] if lo < tilted_mean < hi else None

    diagnostics = {}
    for limit in (200, 1000):
        result = integrate.quad(integrand, lo, hi, points=points, epsabs=tol, epsrel=1e-10, limit=limit, full_output=1)
        value = result[0]
        if len(result) == 3:
            break
        diagnostics = {"abserr": result[1], "limit": limit, "message": result[3]}
    else:
        raise NumericalError("sigma* quadrature did not converge", diagnostics)

    sigma = value / SQRT_2PI
    if not sigma > 0:
        raise NumericalError("sigma* is not positive", {"sigma": sigma, "support": support_hint})
    return ProjectedGaussian(float(tilted_mean), sigma * sigma, Method.QP)


def tilted_support(likelihood, cavity, y, events=None, max_widen=10):
    """Support hint of the likelihood widened until the CDF endpoints are within 1e-12 of 0 and 1."""
    lo, hi = likelihood.support_hint(cavity, y)
    width = hi - lo
    for _ in range(max_widen):
        if likelihood.tilted_cdf(lo, cavity, y, events) <= CDF_EDGE:
            break
        lo -= width
    for _ in range(max_widen):
        if likelihood.tilted_cdf(hi, cavity, y, events) >= 1.0 - CDF_EDGE:
            break
        hi += width
    return lo, hi


def project_tilted(likelihood, cavity, y, method=Method.EP, events=None, tilted=None):
    """Tilted moments plus the EP or QP projection for one site."""
    if tilted is None:
        tilted = likelihood.tilted_moments(cavity, y)
    if events is not None and tilted.fallback:
        events.moment_fallbacks += 1
    if method is Method.EP:
        return project_kl(tilted), tilted
    if method is not Method.QP:
        raise DomainError(f"project_tilted supports EP and QP, got {method}")

    def cdf(x):
        return likelihood.tilted_cdf(x, cavity, y, events)

    support = tilted_support(likelihood, cavity, y, events)
    return project_w2(cdf, tilted.mean, support), tilted


# --- L_p Wasserstein ------------------------------------------------------

def _standard_scores(F):
    return special.ndtri(np.clip(F, _F_FLOOR, _F_CEIL))


def wasserstein_pp(cdf, pdf, mean, std, p, support, points=None):
    """W_p^p between the distribution (cdf, pdf) and N(mean, std^2), as an x-space integral."""
    lo, hi = support

    def integrand(x):
        eta = x - mean - std * _standard_scores(cdf(x))
        return abs(eta) ** p * pdf(x)

    value, _ = integrate.quad(integrand, lo, hi, points=points, epsabs=1e-14, epsrel=1e-11, limit=400)
    return value


def wasserstein2_sq_quantile(quantile, mean, std):
    """W_2^2 between a distribution given by its quantile function and N(mean, std^2).

    Integrates (Q(u) - mean - std * Phi^-1(u))^2 over u in (0, 1), written in
    the standard-normal score z. Scores are cut at |z| = _Z_LIMIT, where
    Phi(z) still differs from 0 and 1 in double precision.
    """
    def integrand(z):
        gap = quantile(special.ndtr(z)) - mean - std * z
        if not math.isfinite(gap):
            return 0.0
        return gap * gap * std_normal_pdf(z)

    value, _ = integrate.quad(integrand, -_Z_LIMIT, _Z_LIMIT, points=[0.0], epsabs=1e-13, epsrel=1e-11, limit=400)
    return value


def _quadrature_objective(p, cdf, pdf, support, points):
    lo, hi = support

    def evaluate(mu, sigma):
        def integrand(x):
            z = _standard_scores(cdf(x))
            q = pdf(x)
            eta = x - mu - sigma * z
            size = abs(eta)
            slope = p * size ** (p - 1.0) * np.sign(eta) * q
            return np.array([size ** p * q, -slope, -slope * z])

        result, _ = integrate.quad_vec(integrand, lo, hi, epsabs=1e-14, epsrel=1e-11, points=points, limit=400)
        return result[0], result[1:]
    return evaluate


def _monte_carlo_objective(p, cdf, pdf, proposal, n_samples, seed):
    """Importance-sampled objective with the proposal Gaussian; samples are fixed across calls."""
    rng = np.random.default_rng(seed)
    prop_mean, prop_std = proposal
    xs = prop_mean + prop_std * rng.standard_normal(n_samples)
    weights = np.asarray(pdf(xs), dtype=float) / (std_normal_pdf((xs - prop_mean) / prop_std) / prop_std)
    weights = weights / weights.mean()
    z = _standard_scores(np.array([cdf(x) for x in xs]))

    def evaluate(mu, sigma):
        eta = xs - mu - sigma * z
        size = np.abs(eta)
        slope = p * size ** (p - 1.0) * np.sign(eta) * weights
        return float(np.mean(weights * size ** p)), np.array([-slope.mean(), -(slope * z).mean()])
    return evaluate


def project_lp(p, cdf, pdf, init, support=None, estimator="quadrature", proposal=None,
               n_samples=20_000, seed=0, tol=LP_GRAD_TOL, max_iter=LP_MAX_ITER):
    """Minimize W_p^p over (mu, sigma) by gradient descent with an Armijo backtracking line search.

    The objective is convex in (mu, sigma), so the minimizer does not depend on
    init. Gradients come either from adaptive quadrature over support or from
    importance sampling with the proposal Gaussian (default: init).
    """
    if not p >= 1:
        raise DomainError(f"p must be at least 1, got {p}")
    if estimator == "quadrature":
        if support is None:
            support = (init.mean - 12.0 * init.std, init.mean + 12.0 * init.std)
        evaluate = _quadrature_objective(p, cdf, pdf, support, [init.mean] if support[0] < init.mean < support[1] else None)
    elif estimator == "monte_carlo":
        proposal = proposal or (init.mean, init.std)
        evaluate = _monte_carlo_objective(p, cdf, pdf, proposal, n_samples, seed)
    else:
        raise DomainError(f"unknown estimator '{estimator}'")

    x = np.array([init.mean, init.std])
    value, grad = evaluate(*x)
    step = 0.5 * init.std ** (2.0 - p)

    for iteration in range(max_iter):
        if np.max(np.abs(grad)) <= tol:
            logger.debug("L%g projection converged after %d iterations", p, iteration)
            return ProjectedGaussian(float(x[0]), float(x[1] ** 2), Method.LP, p)

        decrease = ARMIJO_C * float(grad @ grad)
        t = step
        for _ in range(60):
            trial = x - t * grad
            if trial[1] > 0:
                trial_value, trial_grad = evaluate(*trial)
                if trial_value <= value - t * decrease:
                    break
            t *= 0.5
        else:
            # no decrease left at working precision
            if np.max(np.abs(grad)) <= math.sqrt(tol):
                return ProjectedGaussian(float(x[0]), float(x[1] ** 2), Method.LP, p)
            raise NonConvergenceError(
                "line search stalled",
                last_iterate=ProjectedGaussian(float(x[0]), float(x[1] ** 2), Method.LP, p),
                diagnostics={"iteration": iteration, "grad": np.max(np.abs(grad))},
            )
        x, value, grad = trial, trial_value, trial_grad
        step = 2.0 * t

    raise NonConvergenceError(
        "L_p projection hit the iteration cap",
        last_iterate=ProjectedGaussian(float(x[0]), float(x[1] ** 2), Method.LP, p),
        diagnostics={"iterations": max_iter, "grad": float(np.max(np.abs(grad)))},
    )
