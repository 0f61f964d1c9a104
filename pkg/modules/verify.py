# verify.py
# Randomized property checks over the projection, likelihood and prediction
# code. Used by the verify-invariants command; every check reports the worst
# deviation it saw against its tolerance.
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

from modules.errors import QuantiPropError
from modules.kernel import KernelParams, build_cov, build_cross_cov
from modules.likelihoods import POISSON_SQ, PROBIT, CavityParams, quadrature_cdf, quadrature_moments, tilted_pdf
from modules.predict import Rank1Base, dense_predictive_var, rank1_predictive_var
from modules.projection import (
    Method,
    ProjectedGaussian,
    project_lp,
    project_tilted,
    project_w2,
    tilted_support,
    wasserstein2_sq_quantile,
    wasserstein_pp,
)
from modules.special_fns import erf_inv, owen_t, std_normal_cdf

logger = logging.getLogger(__name__)

ORDERING_TOL = 1e-9
W2_IDENTITY_TOL = 1e-7
MEAN_TOL = 1e-10
MOMENT_RTOL = 1e-8
CDF_TOL = {"probit": 1e-8, "poisson": 1e-7}
# relative to the chord; the x-space W_p integrals carry about 1e-11 relative quadrature error
CONVEXITY_TOL = 1e-10
LP_TOL = 1e-6
TRANSPORT_TOL = 1e-9
RANK1_TOL = 1e-9
ERF_INV_TOL = 1e-12
OWEN_T_TOL = 1e-12
POISSON_Y_MAX = 10


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    cases: int
    detail: str = ""


def random_site(rng):
    """A random (likelihood, cavity, y) triple over the ranges the benchmarks visit."""
    mu = rng.uniform(-3.0, 3.0)
    sigma = 10.0 ** rng.uniform(-1.0, 1.0)
    if rng.random() < 0.5:
        return PROBIT, CavityParams(mu, sigma * sigma), int(rng.choice((-1, 1)))
    return POISSON_SQ, CavityParams(mu, sigma * sigma), int(rng.integers(0, POISSON_Y_MAX + 1))


def _result(name, deviations, tolerance, failures=0, detail=""):
    worst = max(deviations) if deviations else 0.0
    passed = failures == 0 and worst <= tolerance
    if failures:
        detail = f"{failures} cases raised; {detail}".strip("; ")
    return CheckResult(name, passed, float(worst), tolerance, len(deviations) + failures, detail)


def check_projection(samples, rng):
    """Variance ordering, the W2 identity and EP/QP mean equality on the same draws."""
    ordering, identity, means = [], [], []
    failures = 0
    for _ in range(samples):
        likelihood, cavity, y = random_site(rng)
        try:
            ep, tilted = project_tilted(likelihood, cavity, y, Method.EP)
            qp, _ = project_tilted(likelihood, cavity, y, Method.QP, tilted=tilted)
            support = tilted_support(likelihood, cavity, y)
            pdf = tilted_pdf(likelihood, cavity, y, tilted.log_z)
            points = [p for p in likelihood.breakpoints(cavity, y) if support[0] < p < support[1]]
            w2 = wasserstein_pp(lambda x: likelihood.tilted_cdf(x, cavity, y), pdf, qp.mean, qp.std, 2.0,
                                support, points or None)
        except QuantiPropError as exc:
            logger.debug("projection check failed at %s y=%d: %s", cavity, y, exc)
            failures += 1
            continue
        ordering.append(qp.var - ep.var)
        identity.append(abs(w2 - (ep.var - qp.var)))
        means.append(abs(ep.mean - qp.mean))
    return [
        _result("variance ordering", ordering, ORDERING_TOL, failures),
        _result("W2 identity", identity, W2_IDENTITY_TOL, failures),
        _result("mean equality", means, MEAN_TOL, failures),
    ]


def check_moments(samples, rng):
    deviations = []
    for _ in range(samples):
        likelihood, cavity, y = random_site(rng)
        closed = likelihood.tilted_moments(cavity, y)
        if closed.fallback:
            continue
        reference = quadrature_moments(likelihood, cavity, y)
        deviations.append(max(
            abs(closed.mean - reference.mean) / max(abs(reference.mean), cavity.std),
            abs(closed.var - reference.var) / reference.var,
        ))
    return _result("moments vs quadrature", deviations, MOMENT_RTOL)


def check_cdf(samples, rng):
    results = []
    for likelihood in (PROBIT, POISSON_SQ):
        deviations = []
        monotone_breaks = 0
        for _ in range(samples):
            _, cavity, _ = random_site(rng)
            y = int(rng.choice((-1, 1))) if likelihood is PROBIT else int(rng.integers(0, POISSON_Y_MAX + 1))
            lo, hi = likelihood.support_hint(cavity, y)
            grid = np.linspace(lo, hi, 200)
            values = np.array([likelihood.tilted_cdf(x, cavity, y) for x in grid])
            if np.any(np.diff(values) < -1e-12):
                monotone_breaks += 1
            x = rng.uniform(cavity.mu - 3.0 * cavity.std, cavity.mu + 3.0 * cavity.std)
            deviations.append(abs(likelihood.tilted_cdf(x, cavity, y) - quadrature_cdf(likelihood, x, cavity, y)))
        result = _result(f"{likelihood.name} CDF vs quadrature", deviations, CDF_TOL[likelihood.name])
        if monotone_breaks:
            result.passed = False
            result.detail = f"{monotone_breaks} non-monotone CDFs"
        results.append(result)
    return results


def check_convexity(samples, rng):
    """Midpoint convexity of W_p^p in (mean, std) on random probit cavities."""
    gaps = {p: [] for p in (1.0, 2.0, 3.0)}
    for _ in range(max(3, samples // 10)):
        cavity = CavityParams(rng.uniform(-2.0, 2.0), (10.0 ** rng.uniform(-0.5, 0.5)) ** 2)
        y = int(rng.choice((-1, 1)))
        tilted = PROBIT.tilted_moments(cavity, y)
        pdf = tilted_pdf(PROBIT, cavity, y, tilted.log_z)
        support = tilted_support(PROBIT, cavity, y)
        centre, spread = tilted.mean, math.sqrt(tilted.var)

        for p, found in gaps.items():
            def cost(mu, sigma):
                return wasserstein_pp(lambda x: PROBIT.tilted_cdf(x, cavity, y), pdf, mu, sigma, p, support)

            mu1, mu2 = centre + spread * rng.uniform(-1.5, 1.5, size=2)
            s1, s2 = spread * rng.uniform(0.3, 2.0, size=2)
            a = rng.uniform(0.05, 0.95)
            chord = a * cost(mu1, s1) + (1 - a) * cost(mu2, s2)
            mixed = cost(a * mu1 + (1 - a) * mu2, a * s1 + (1 - a) * s2)
            found.append((mixed - chord) / max(1.0, chord))
    return [_result(f"W{p:g} convexity", found, CONVEXITY_TOL) for p, found in gaps.items()]


def check_lp_matches_w2(samples, rng):
    deviations = []
    failures = 0
    for _ in range(max(1, samples // 50)):
        likelihood = PROBIT
        cavity = CavityParams(rng.uniform(-2.0, 2.0), 10.0 ** rng.uniform(-0.5, 0.5))
        y = int(rng.choice((-1, 1)))
        tilted = likelihood.tilted_moments(cavity, y)
        support = tilted_support(likelihood, cavity, y)

        def cdf(x):
            return likelihood.tilted_cdf(x, cavity, y)

        w2 = project_w2(cdf, tilted.mean, support)
        try:
            lp = project_lp(2.0, cdf, tilted_pdf(likelihood, cavity, y, tilted.log_z),
                            ProjectedGaussian(tilted.mean, tilted.var, Method.EP), support=support)
        except QuantiPropError as exc:
            logger.debug("L2 projection failed: %s", exc)
            failures += 1
            continue
        deviations.append(max(abs(lp.mean - w2.mean), abs(lp.std - w2.std)))
    return _result("L2 projection vs W2", deviations, LP_TOL, failures)


def check_gaussian_transport(samples, rng):
    deviations = []
    for _ in range(samples):
        m1, m2 = rng.uniform(-3.0, 3.0, size=2)
        s1, s2 = rng.uniform(0.2, 3.0, size=2)
        value = wasserstein2_sq_quantile(lambda u: m1 + s1 * special.ndtri(u), m2, s2)
        deviations.append(abs(value - ((m1 - m2) ** 2 + (s1 - s2) ** 2)))
    return _result("Gaussian W2 transport", deviations, TRANSPORT_TOL)


def check_rank1(samples, rng):
    deviations = []
    for _ in range(samples):
        n = int(rng.integers(2, 21))
        X = rng.standard_normal((n, 2))
        params = KernelParams(10.0 ** rng.uniform(-0.5, 0.5), 10.0 ** rng.uniform(-0.3, 0.5, size=2))
        K = build_cov(X, params).K
        site_var = 10.0 ** rng.uniform(-1.0, 1.0, size=n)
        x_star = rng.standard_normal((1, 2))
        k_star = build_cross_cov(X, x_star, params)[:, 0]
        A = linalg.inv(K + np.diag(site_var))
        base = Rank1Base(0.5 * (A + A.T), k_star, params.gamma, K, site_var)

        i = int(rng.integers(n))
        new_var = 10.0 ** rng.uniform(-1.0, 1.0)
        updated = site_var.copy()
        updated[i] = new_var
        dense = dense_predictive_var(K, updated, k_star, params.gamma)
        deviations.append(abs(rank1_predictive_var(base, i, new_var) - dense))
    return _result("rank-1 vs dense variance", deviations, RANK1_TOL)


def check_special_functions(samples, rng):
    p = rng.uniform(-1.0 + 1e-9, 1.0 - 1e-9, size=samples * 10)
    roundtrip = np.abs(special.erf(erf_inv(p)) - p)

    symmetry = []
    for _ in range(samples):
        h = rng.uniform(0.0, 5.0)
        a = rng.uniform(0.05, 10.0)
        t = owen_t(h, a)
        phi_h, phi_ah = std_normal_cdf(h), std_normal_cdf(a * h)
        symmetry.append(max(
            abs(owen_t(-h, a) - t),
            abs(owen_t(h, -a) + t),
            abs(t + owen_t(a * h, 1.0 / a) - (0.5 * phi_h + 0.5 * phi_ah - phi_h * phi_ah)),
        ))
    return [
        _result("erf_inv round trip", list(roundtrip), ERF_INV_TOL),
        _result("Owen's T symmetries", symmetry, OWEN_T_TOL),
    ]


CHECKS = [
    check_special_functions,
    check_moments,
    check_cdf,
    check_projection,
    check_convexity,
    check_lp_matches_w2,
    check_gaussian_transport,
    check_rank1,
]


def run_checks(samples=100, seed=0, progress=None):
    """Run every check with its own child generator so results do not depend on check order."""
    children = np.random.SeedSequence(seed).spawn(len(CHECKS))
    results = []
    for check, child in zip(CHECKS, children):
        outcome = check(samples, np.random.default_rng(child))
        results.extend(outcome if isinstance(outcome, list) else [outcome])
        if progress:
            progress(check.__name__)
    return results


def all_passed(results):
    return all(result.passed for result in results) and not any(math.isnan(r.worst) for r in results)
