# likelihoods.py
# Tilted-distribution computations (normalizer, mean, variance and exact CDF)
# for the probit classification likelihood and the Poisson likelihood with a
# square link, rate = f^2.
import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import integrate, special

from modules.errors import DomainError, NumericalError, ValidationError
from modules.special_fns import (
    LOG_SQRT_2PI,
    log_hyp1f1_terminating,
    owen_t,
    std_normal_cdf,
    std_normal_logcdf,
    std_normal_logpdf,
)

logger = logging.getLogger(__name__)

# Counts above this go through quadrature only (factorial / Pochhammer range).
POISSON_CLOSED_FORM_MAX = 170
# Partial-sum magnitude over result magnitude beyond which the binomial CDF sum is distrusted.
CANCELLATION_LIMIT = 1e12
# Probit normalizers below this make the Owen's T route lose relative accuracy.
PROBIT_CDF_MIN_Z = 1e-6
SUPPORT_WIDTH = 12.0


class Task(str, Enum):
    BINARY = "binary"
    COUNT = "count"


@dataclass(frozen=True)
class CavityParams:
    mu: float
    var: float

    def __post_init__(self):
        mu, var = float(self.mu), float(self.var)
        if not (math.isfinite(mu) and math.isfinite(var)):
            raise DomainError(f"cavity parameters must be finite, got ({mu}, {var})")
        if var <= 0:
            raise DomainError(f"cavity variance must be positive, got {var}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "var", var)

    @property
    def std(self):
        return math.sqrt(self.var)


@dataclass(frozen=True)
class Observation:
    task: Task
    value: int

    def __post_init__(self):
        if self.task is Task.BINARY:
            object.__setattr__(self, "value", _check_label(self.value))
        else:
            object.__setattr__(self, "value", _check_count(self.value))

    @classmethod
    def label(cls, y):
        return cls(Task.BINARY, y)

    @classmethod
    def count(cls, y):
        return cls(Task.COUNT, y)


@dataclass(frozen=True)
class TiltedMoments:
    log_z: float
    mean: float
    var: float
    fallback: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.var) and self.var > 0 and math.isfinite(self.mean)):
            raise NumericalError("invalid tilted moments", {"mean": self.mean, "var": self.var})

    @property
    def std(self):
        return math.sqrt(self.var)


@dataclass
class NumericalEvents:
    """Counters for recoverable numerical events, filled in by the caller's computations."""

    moment_fallbacks: int = 0
    cdf_fallbacks: int = 0

    def merge(self, other):
        self.moment_fallbacks += other.moment_fallbacks
        self.cdf_fallbacks += other.cdf_fallbacks
        return self


def _check_label(y):
    if y not in (-1, 1):
        raise DomainError(f"classification label must be -1 or +1, got {y}")
    return int(y)


def _check_count(y):
    if isinstance(y, bool) or not float(y).is_integer() or y < 0:
        raise DomainError(f"count observation must be a nonnegative integer, got {y}")
    return int(y)


def _check_x(x):
    x = float(x)
    if math.isnan(x):
        raise DomainError("CDF evaluation point is NaN")
    return x


def _gaussian_logpdf(f, mu, std):
    z = (f - mu) / std
    return -0.5 * z * z - math.log(std) - LOG_SQRT_2PI


def _unnormalized_log_tilted(likelihood, cavity, y):
    def log_density(f):
        return likelihood.log_likelihood(f, y) + _gaussian_logpdf(f, cavity.mu, cavity.std)
    return log_density


def _peak(log_density, lo, hi):
    grid = np.linspace(lo, hi, 401)
    with np.errstate(divide="ignore"):
        values = log_density(grid)
    best = int(np.argmax(values))
    return grid[best], values[best]


def quadrature_moments(likelihood, cavity, y):
    """Adaptive Gauss-Kronrod evaluation of log Z, mean and variance of the tilted distribution."""
    lo, hi = likelihood.support_hint(cavity, y)
    log_density = _unnormalized_log_tilted(likelihood, cavity, y)
    center, shift = _peak(log_density, lo, hi)
    if not math.isfinite(shift):
        raise NumericalError("tilted density vanishes on its support", {"lo": lo, "hi": hi})
    points = [p for p in likelihood.breakpoints(cavity, y) if lo < p < hi]

    def weight(f):
        return math.exp(log_density(f) - shift)

    quad_kw = dict(points=points or None, epsabs=1e-15, epsrel=1e-12, limit=400)
    z0, _ = integrate.quad(weight, lo, hi, **quad_kw)
    z1, _ = integrate.quad(lambda f: (f - center) * weight(f), lo, hi, **quad_kw)
    z2, _ = integrate.quad(lambda f: (f - center) ** 2 * weight(f), lo, hi, **quad_kw)
    if not z0 > 0:
        raise NumericalError("tilted normalizer underflowed", {"mu": cavity.mu, "var": cavity.var, "y": y})
    offset = z1 / z0
    return TiltedMoments(
        log_z=shift + math.log(z0),
        mean=center + offset,
        var=z2 / z0 - offset * offset,
        fallback=True,
    )


def quadrature_cdf(likelihood, x, cavity, y):
    lo, hi = likelihood.support_hint(cavity, y)
    if x <= lo:
        return 0.0
    if x >= hi:
        return 1.0
    log_density = _unnormalized_log_tilted(likelihood, cavity, y)
    _, shift = _peak(log_density, lo, hi)

    def weight(f):
        return math.exp(log_density(f) - shift)

    breaks = likelihood.breakpoints(cavity, y)
    left_points = [p for p in breaks if lo < p < x]
    right_points = [p for p in breaks if x < p < hi]
    left, _ = integrate.quad(weight, lo, x, points=left_points or None, epsabs=1e-15, epsrel=1e-12, limit=400)
    right, _ = integrate.quad(weight, x, hi, points=right_points or None, epsabs=1e-15, epsrel=1e-12, limit=400)
    return min(max(left / (left + right), 0.0), 1.0)


def tilted_pdf(likelihood, cavity, y, log_z):
    log_density = _unnormalized_log_tilted(likelihood, cavity, y)

    def pdf(f):
        with np.errstate(divide="ignore"):
            return np.exp(log_density(f) - log_z)
    return pdf


# --- probit ---------------------------------------------------------------

def probit_tilted_moments(cavity, y):
    y = _check_label(y)
    mu, var = cavity.mu, cavity.var
    scale = math.sqrt(1.0 + var)
    z = y * mu / scale
    log_z = std_normal_logcdf(z)
    # N(z) / Phi(z) in log space stays finite for z << 0
    ratio = math.exp(std_normal_logpdf(z) - log_z)
    mean = mu + y * var * ratio / scale
    tilted_var = var - var * var * ratio * (z + ratio) / (1.0 + var)
    if not tilted_var > 0:
        logger.debug("probit variance lost to cancellation at z=%.3g, using quadrature", z)
        return quadrature_moments(PROBIT, cavity, y)
    return TiltedMoments(log_z, mean, tilted_var)


def _bivariate_normal_cdf(a, b, r):
    """P(U <= a, V <= b) for standard normals with correlation r, via Owen's T."""
    if a == 0.0 and b == 0.0:
        return 0.25 + math.asin(r) / (2.0 * math.pi)
    s = math.sqrt(1.0 - r * r)
    if a == 0.0:
        return 0.5 * std_normal_cdf(b) + owen_t(b, r / s)
    if b == 0.0:
        return 0.5 * std_normal_cdf(a) + owen_t(a, r / s)
    beta = 0.0 if a * b > 0 else 0.5
    return (
        0.5 * std_normal_cdf(a)
        + 0.5 * std_normal_cdf(b)
        - owen_t(a, (b - r * a) / (a * s))
        - owen_t(b, (a - r * b) / (b * s))
        - beta
    )


def probit_tilted_cdf(x, cavity, y, events=None):
    y = _check_label(y)
    x = _check_x(x)
    if x == math.inf:
        return 1.0
    if x == -math.inf:
        return 0.0

    mu, sigma = cavity.mu, cavity.std
    scale = math.sqrt(1.0 + cavity.var)
    k = mu / scale
    z_norm = std_normal_cdf(y * k)
    if z_norm < PROBIT_CDF_MIN_Z:
        if events is not None:
            events.cdf_fallbacks += 1
        return quadrature_cdf(PROBIT, x, cavity, y)

    h = (x - mu) / sigma
    rho = sigma / scale
    joint = _bivariate_normal_cdf(h, y * k, -y * rho)
    return min(max(joint / z_norm, 0.0), 1.0)


# --- Poisson, square link ---------------------------------------------------

def _poisson_shape(cavity):
    denom = 1.0 + 2.0 * cavity.var
    alpha = 2.0 * cavity.var / denom
    beta = cavity.mu / denom
    return denom, alpha, beta


def poisson_sq_tilted_moments(cavity, y):
    y = _check_count(y)
    if y > POISSON_CLOSED_FORM_MAX:
        return quadrature_moments(POISSON_SQ, cavity, y)

    mu, var = cavity.mu, cavity.var
    denom, alpha, _ = _poisson_shape(cavity)
    h = mu * mu / denom
    u = -h / (2.0 * var)

    log_m0 = log_hyp1f1_terminating(y, 0.5, u)
    log_z = (
        -h
        - 0.5 * math.log(2.0 * math.pi * var)
        - special.gammaln(y + 1.0)
        + (y + 0.5) * math.log(alpha)
        + special.gammaln(y + 0.5)
        + log_m0
    )

    # derivatives of log Z in mu through ratios of terminating 1F1 values
    slope = -1.0
    curvature = 0.0
    if y >= 1:
        r1 = math.exp(log_hyp1f1_terminating(y - 1, 1.5, u) - log_m0)
        slope += y * r1 / var
        curvature += 2.0 * y * r1 * r1
        if y >= 2:
            r2 = math.exp(log_hyp1f1_terminating(y - 2, 2.5, u) - log_m0)
            curvature += 2.0 * (1.0 - y) / 3.0 * r2
    d1 = slope * 2.0 * mu / denom
    d2 = slope * 2.0 / denom - curvature * 2.0 * mu * mu * y / (var * var * denom * denom)

    mean = mu + var * d1
    tilted_var = var + var * var * d2
    if not (math.isfinite(log_z) and math.isfinite(mean) and tilted_var > 0):
        logger.debug("Poisson closed form unusable at (%.3g, %.3g, %d), using quadrature", mu, var, y)
        return quadrature_moments(POISSON_SQ, cavity, y)
    return TiltedMoments(float(log_z), mean, tilted_var)


def poisson_sq_tilted_cdf(x, cavity, y, events=None):
    y = _check_count(y)
    x = _check_x(x)
    if x == math.inf:
        return 1.0
    if x == -math.inf:
        return 0.0
    lo, hi = POISSON_SQ.support_hint(cavity, y)
    if x <= lo:
        return 0.0
    if x >= hi:
        return 1.0
    if y > POISSON_CLOSED_FORM_MAX:
        if events is not None:
            events.cdf_fallbacks += 1
        return quadrature_cdf(POISSON_SQ, x, cavity, y)

    _, alpha, beta = _poisson_shape(cavity)
    t = (x - beta) / math.sqrt(alpha)
    n = 2 * y
    k = np.array([n]) if beta == 0.0 else np.arange(n + 1)

    log_coef = (
        special.gammaln(n + 1.0)
        - special.gammaln(k + 1.0)
        - special.gammaln(n - k + 1.0)
        + 0.5 * k * math.log(alpha)
        + special.gammaln((k + 1.0) / 2.0)
    )
    if beta != 0.0:
        log_coef = log_coef + (n - k) * math.log(abs(beta))
    sign = np.where((n - k) % 2 == 1, math.copysign(1.0, beta), 1.0)
    weights = sign * np.exp(log_coef - log_coef.max())

    even = k % 2 == 0
    upper = special.gammaincc((k + 1.0) / 2.0, t * t)
    if t < 0:
        bracket = np.where(even, upper, -upper)
    elif t > 0:
        bracket = np.where(even, 2.0 - upper, -upper)
    else:
        bracket = np.where(even, 1.0, -1.0)

    terms = weights * bracket
    numerator = terms.sum()
    normalizer = 2.0 * weights[even].sum()
    magnitude = np.abs(terms).sum()
    if numerator <= 0 or magnitude > CANCELLATION_LIMIT * numerator:
        if events is not None:
            events.cdf_fallbacks += 1
        return quadrature_cdf(POISSON_SQ, x, cavity, y)
    return min(max(numerator / normalizer, 0.0), 1.0)


# --- likelihood objects -----------------------------------------------------

class ProbitLikelihood:
    name = "probit"
    table_id = 1
    task = Task.BINARY

    def validate(self, y):
        y = np.asarray(y)
        if y.size == 0 or not np.all(np.isin(y, (-1, 1))):
            raise ValidationError("probit labels must all be -1 or +1")
        return y.astype(int)

    def tilted_moments(self, cavity, y):
        return probit_tilted_moments(cavity, y)

    def tilted_cdf(self, x, cavity, y, events=None):
        return probit_tilted_cdf(x, cavity, y, events)

    def log_likelihood(self, f, y):
        return special.log_ndtr(y * np.asarray(f, dtype=float))

    def support_hint(self, cavity, y):
        return cavity.mu - SUPPORT_WIDTH * cavity.std, cavity.mu + SUPPORT_WIDTH * cavity.std

    def breakpoints(self, cavity, y):
        return [cavity.mu]

    def table_keys(self, y_max=None):
        return [-1, 1]


class PoissonSquareLikelihood:
    name = "poisson"
    table_id = 2
    task = Task.COUNT

    def validate(self, y):
        y = np.asarray(y)
        if y.size == 0 or np.any(y < 0) or not np.all(np.mod(y, 1) == 0):
            raise ValidationError("Poisson observations must be nonnegative integers")
        return y.astype(int)

    def tilted_moments(self, cavity, y):
        return poisson_sq_tilted_moments(cavity, y)

    def tilted_cdf(self, x, cavity, y, events=None):
        return poisson_sq_tilted_cdf(x, cavity, y, events)

    def log_likelihood(self, f, y):
        f = np.asarray(f, dtype=float)
        return special.xlogy(y, f * f) - f * f - special.gammaln(y + 1.0)

    def _modes(self, cavity, y):
        _, alpha, beta = _poisson_shape(cavity)
        root = math.sqrt(beta * beta + 4.0 * y * alpha)
        return (beta - root) / 2.0, (beta + root) / 2.0, alpha

    def support_hint(self, cavity, y):
        low_mode, high_mode, alpha = self._modes(cavity, y)
        width = SUPPORT_WIDTH * math.sqrt(alpha / 2.0)
        return low_mode - width, high_mode + width

    def breakpoints(self, cavity, y):
        if y == 0:
            return [_poisson_shape(cavity)[2]]
        low_mode, high_mode, _ = self._modes(cavity, y)
        return sorted({low_mode, 0.0, high_mode})

    def table_keys(self, y_max=16):
        return list(range(0, y_max + 1))


PROBIT = ProbitLikelihood()
POISSON_SQ = PoissonSquareLikelihood()

LIKELIHOODS = {PROBIT.name: PROBIT, POISSON_SQ.name: POISSON_SQ}


def get_likelihood(name):
    try:
        return LIKELIHOODS[name]
    except KeyError:
        raise ValidationError(f"unknown likelihood '{name}', choose from {sorted(LIKELIHOODS)}") from None


def likelihood_from_table_id(table_id):
    for likelihood in LIKELIHOODS.values():
        if likelihood.table_id == table_id:
            return likelihood
    raise ValidationError(f"unknown likelihood id {table_id}")
