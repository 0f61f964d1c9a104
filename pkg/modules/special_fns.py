# special_fns.py
# Special functions used by the likelihood and projection code. Thin, validated
# wrappers around scipy.special plus the terminating confluent hypergeometric
# series, which scipy only offers in its general (non-terminating) form.
import numpy as np
from scipy import special

from modules.errors import DomainError

SQRT_PI = np.sqrt(np.pi)
SQRT_2PI = np.sqrt(2.0 * np.pi)
LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

# Newton refinement is skipped where erf is flat to double precision.
_NEWTON_CUTOFF = 3.0


def _reject_nan(name, *values):
    for value in values:
        if np.any(np.isnan(value)):
            raise DomainError(f"{name}: NaN input")


def _reject_nonfinite(name, *values):
    for value in values:
        if not np.all(np.isfinite(value)):
            raise DomainError(f"{name}: non-finite input")


def _scalar_or_array(value):
    return value.item() if np.ndim(value) == 0 else value


def erf_inv(p):
    p = np.asarray(p, dtype=float)
    _reject_nan("erf_inv", p)
    if np.any(np.abs(p) >= 1.0):
        raise DomainError("erf_inv: argument must satisfy |p| < 1")

    x = special.erfinv(p)
    refine = np.abs(x) < _NEWTON_CUTOFF
    for _ in range(2):
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            step = (special.erf(x) - p) / (2.0 / SQRT_PI * np.exp(-x * x))
        x = np.where(refine, x - step, x)
    return _scalar_or_array(x)


def owen_t(h, a):
    """Owen's T function T(h, a) = (1/2pi) int_0^a exp(-h^2 (1+x^2)/2) / (1+x^2) dx."""
    h = np.asarray(h, dtype=float)
    a = np.asarray(a, dtype=float)
    _reject_nonfinite("owen_t", h, a)
    return _scalar_or_array(special.owens_t(h, a))


def gamma_upper(a, z):
    """Non-regularized upper incomplete gamma function Gamma(a, z)."""
    a = np.asarray(a, dtype=float)
    z = np.asarray(z, dtype=float)
    _reject_nan("gamma_upper", a, z)
    if np.any(a <= 0):
        raise DomainError("gamma_upper: a must be positive")
    if np.any(z < 0):
        raise DomainError("gamma_upper: z must be nonnegative")
    return _scalar_or_array(special.gamma(a) * special.gammaincc(a, z))


def gamma_lower(a, z):
    a = np.asarray(a, dtype=float)
    z = np.asarray(z, dtype=float)
    _reject_nan("gamma_lower", a, z)
    if np.any(a <= 0):
        raise DomainError("gamma_lower: a must be positive")
    if np.any(z < 0):
        raise DomainError("gamma_lower: z must be nonnegative")
    return _scalar_or_array(special.gamma(a) * special.gammainc(a, z))


def _check_hyp1f1_args(name, y, b, x):
    if isinstance(y, bool) or int(y) != y or y < 0:
        raise DomainError(f"{name}: y must be a nonnegative integer, got {y}")
    _reject_nonfinite(name, b, x)
    if b <= 0 and float(b).is_integer() and b >= -y:
        raise DomainError(f"{name}: b={b} is a nonpositive integer inside the series range")
    return int(y), float(b), float(x)


def hyp1f1_terminating(y, b, x):
    """1F1(-y; b; x) as the finite sum of its y+1 terms."""
    y, b, x = _check_hyp1f1_args("hyp1f1_terminating", y, b, x)
    term = 1.0
    total = 1.0
    for k in range(y):
        # term_{k+1} = term_k * (-y + k) x / ((b + k)(k + 1))
        term *= (k - y) * x / ((b + k) * (k + 1))
        total += term
    return total


def log_hyp1f1_terminating(y, b, x):
    """log 1F1(-y; b; x) for x <= 0 and b > 0, where every term of the series is positive."""
    y, b, x = _check_hyp1f1_args("log_hyp1f1_terminating", y, b, x)
    if x > 0 or b <= 0:
        raise DomainError("log_hyp1f1_terminating: requires x <= 0 and b > 0")
    if y == 0 or x == 0:
        return 0.0

    k = np.arange(y)
    log_steps = np.log(y - k) + np.log(-x) - np.log(b + k) - np.log(k + 1.0)
    log_terms = np.concatenate(([0.0], np.cumsum(log_steps)))
    return float(special.logsumexp(log_terms))


def std_normal_cdf(x):
    x = np.asarray(x, dtype=float)
    _reject_nan("std_normal_cdf", x)
    return _scalar_or_array(special.ndtr(x))


def std_normal_logcdf(x):
    x = np.asarray(x, dtype=float)
    _reject_nan("std_normal_logcdf", x)
    return _scalar_or_array(special.log_ndtr(x))


def std_normal_pdf(x):
    x = np.asarray(x, dtype=float)
    _reject_nan("std_normal_pdf", x)
    return _scalar_or_array(np.exp(-0.5 * x * x) / SQRT_2PI)


def std_normal_logpdf(x):
    x = np.asarray(x, dtype=float)
    return _scalar_or_array(-0.5 * x * x - LOG_SQRT_2PI)


def std_normal_ppf(p):
    p = np.asarray(p, dtype=float)
    _reject_nan("std_normal_ppf", p)
    return _scalar_or_array(special.ndtri(p))
