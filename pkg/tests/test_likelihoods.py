import math

import numpy as np
import pytest
from scipy import integrate, special, stats

from modules.errors import DomainError, NumericalError, ValidationError
from modules.likelihoods import (
    POISSON_SQ,
    PROBIT,
    CavityParams,
    NumericalEvents,
    Observation,
    TiltedMoments,
    get_likelihood,
    likelihood_from_table_id,
    quadrature_cdf,
    quadrature_moments,
)


def oracle_moments(log_lik, cavity, lo=-30.0, hi=30.0):
    """(Z, mean, var) of exp(log_lik(f)) N(f | cavity) by plain quadrature."""
    def weight(f):
        return math.exp(log_lik(f)) * stats.norm.pdf(f, cavity.mu, cavity.std)

    kw = dict(epsabs=1e-14, epsrel=1e-12, limit=400, points=[cavity.mu])
    z0 = integrate.quad(weight, lo, hi, **kw)[0]
    z1 = integrate.quad(lambda f: f * weight(f), lo, hi, **kw)[0]
    z2 = integrate.quad(lambda f: f * f * weight(f), lo, hi, **kw)[0]
    mean = z1 / z0
    return z0, mean, z2 / z0 - mean * mean


def oracle_cdf(log_lik, cavity, x, lo=-30.0, hi=30.0):
    def weight(f):
        return math.exp(log_lik(f)) * stats.norm.pdf(f, cavity.mu, cavity.std)

    kw = dict(epsabs=1e-15, epsrel=1e-12, limit=400)
    left = integrate.quad(weight, lo, x, **kw)[0]
    return left / integrate.quad(weight, lo, hi, points=[cavity.mu], **kw)[0]


def probit(y):
    return lambda f: special.log_ndtr(y * f)


def poisson(y):
    return lambda f: y * math.log(f * f) - f * f - special.gammaln(y + 1.0) if f != 0.0 else (-math.inf if y else 0.0)


def test_cavity_validation():
    assert CavityParams(0.5, 4.0).std == 2.0
    with pytest.raises(DomainError):
        CavityParams(0.0, 0.0)
    with pytest.raises(DomainError):
        CavityParams(float("nan"), 1.0)


def test_observation_validation():
    assert Observation.label(-1).value == -1
    assert Observation.count(3.0).value == 3
    with pytest.raises(DomainError):
        Observation.label(0)
    with pytest.raises(DomainError):
        Observation.count(-2)
    with pytest.raises(DomainError):
        Observation.count(1.5)


def test_tilted_moments_reject_bad_variance():
    with pytest.raises(NumericalError):
        TiltedMoments(0.0, 0.0, -1.0)


def test_probit_moments_match_quadrature():
    cavity = CavityParams(0.7, 2.1)
    tilted = PROBIT.tilted_moments(cavity, 1)
    z, mean, var = oracle_moments(probit(1), cavity)
    assert tilted.log_z == pytest.approx(math.log(z), abs=1e-10)
    assert tilted.mean == pytest.approx(mean, abs=1e-10)
    assert tilted.var == pytest.approx(var, abs=1e-10)
    assert not tilted.fallback


def test_probit_zero_mean_cavity():
    tilted = PROBIT.tilted_moments(CavityParams(0.0, 1.0), 1)
    assert tilted.log_z == pytest.approx(math.log(0.5))
    assert tilted.mean == pytest.approx(1.0 / math.sqrt(math.pi), rel=1e-12)


def test_probit_deep_tail_stays_finite():
    tilted = PROBIT.tilted_moments(CavityParams(-30.0, 0.5), 1)
    assert math.isfinite(tilted.log_z)
    assert 0.0 < tilted.var < 0.5


def test_probit_cdf_matches_quadrature():
    cavity = CavityParams(0.7, 2.1)
    assert PROBIT.tilted_cdf(0.3, cavity, -1) == pytest.approx(oracle_cdf(probit(-1), cavity, 0.3), abs=1e-10)
    assert PROBIT.tilted_cdf(math.inf, cavity, 1) == 1.0
    assert PROBIT.tilted_cdf(-math.inf, cavity, 1) == 0.0


def test_probit_cdf_zero_arguments():
    # x == mu makes h zero and mu == 0 makes k zero
    for cavity, x in ((CavityParams(0.0, 1.0), 0.0), (CavityParams(0.0, 2.0), 0.4), (CavityParams(0.5, 1.0), 0.5)):
        for y in (-1, 1):
            assert PROBIT.tilted_cdf(x, cavity, y) == pytest.approx(quadrature_cdf(PROBIT, x, cavity, y), abs=1e-10)


def test_probit_cdf_falls_back_for_tiny_normalizer():
    events = NumericalEvents()
    cavity = CavityParams(-8.0, 0.25)
    value = PROBIT.tilted_cdf(-7.5, cavity, 1, events)
    assert events.cdf_fallbacks == 1
    assert 0.0 <= value <= 1.0


def test_cdf_monotone_with_vanishing_left_tail(rng):
    for likelihood in (PROBIT, POISSON_SQ):
        for _ in range(10):
            cavity = CavityParams(rng.uniform(-2, 2), 10 ** rng.uniform(-1, 1))
            y = int(rng.choice((-1, 1))) if likelihood is PROBIT else int(rng.integers(0, 8))
            lo, hi = likelihood.support_hint(cavity, y)
            values = [likelihood.tilted_cdf(x, cavity, y) for x in np.linspace(lo, hi, 200)]
            assert np.all(np.diff(values) >= -1e-12)
            if likelihood is PROBIT:
                assert likelihood.tilted_cdf(cavity.mu - 8.0 * cavity.std, cavity, y) < 1e-6


def test_poisson_moments_match_quadrature():
    cavity = CavityParams(1.2, 0.8)
    tilted = POISSON_SQ.tilted_moments(cavity, 3)
    z, mean, var = oracle_moments(poisson(3), cavity)
    assert tilted.log_z == pytest.approx(math.log(z), abs=1e-9)
    assert tilted.mean == pytest.approx(mean, abs=1e-9)
    assert tilted.var == pytest.approx(var, abs=1e-9)


def test_poisson_zero_count_closed_form():
    cavity = CavityParams(0.4, 0.5)
    tilted = POISSON_SQ.tilted_moments(cavity, 0)
    denom = 1.0 + 2.0 * cavity.var
    assert tilted.log_z == pytest.approx(-cavity.mu ** 2 / denom - 0.5 * math.log(denom), abs=1e-12)
    assert tilted.mean == pytest.approx(cavity.mu / denom, rel=1e-12)
    assert tilted.var == pytest.approx(cavity.var / denom, rel=1e-12)


@pytest.mark.parametrize("mu, var, y", [(1.2, 0.8, 3), (0.0, 1.0, 2), (-0.8, 2.5, 5), (2.0, 0.1, 10)])
def test_poisson_moments_against_generic_quadrature(mu, var, y):
    cavity = CavityParams(mu, var)
    closed = POISSON_SQ.tilted_moments(cavity, y)
    reference = quadrature_moments(POISSON_SQ, cavity, y)
    assert closed.log_z == pytest.approx(reference.log_z, abs=1e-8)
    assert closed.mean == pytest.approx(reference.mean, abs=1e-8)
    assert closed.var == pytest.approx(reference.var, rel=1e-8)


def test_poisson_cdf_matches_quadrature():
    cavity = CavityParams(1.2, 0.8)
    assert POISSON_SQ.tilted_cdf(0.5, cavity, 3) == pytest.approx(oracle_cdf(poisson(3), cavity, 0.5), abs=1e-9)
    for x in (-1.5, 0.0, 0.9, 2.1):
        assert POISSON_SQ.tilted_cdf(x, cavity, 3) == pytest.approx(quadrature_cdf(POISSON_SQ, x, cavity, 3), abs=1e-8)


def test_poisson_cdf_zero_mean_cavity_is_symmetric():
    cavity = CavityParams(0.0, 1.0)
    assert POISSON_SQ.tilted_cdf(0.0, cavity, 2) == pytest.approx(0.5, abs=1e-12)
    assert POISSON_SQ.tilted_cdf(0.7, cavity, 2) + POISSON_SQ.tilted_cdf(-0.7, cavity, 2) == pytest.approx(1.0, abs=1e-12)


def test_poisson_large_count_uses_quadrature():
    tilted = POISSON_SQ.tilted_moments(CavityParams(13.5, 0.5), 200)
    assert tilted.fallback
    assert tilted.mean == pytest.approx(math.sqrt(200), rel=0.05)


def test_validate_labels_and_counts():
    np.testing.assert_array_equal(PROBIT.validate([1, -1, 1]), [1, -1, 1])
    np.testing.assert_array_equal(POISSON_SQ.validate([0, 4.0, 2]), [0, 4, 2])
    with pytest.raises(ValidationError):
        PROBIT.validate([0, 1])
    with pytest.raises(ValidationError):
        POISSON_SQ.validate([1, -1])


def test_registry_lookups():
    assert get_likelihood("probit") is PROBIT
    assert likelihood_from_table_id(POISSON_SQ.table_id) is POISSON_SQ
    assert POISSON_SQ.table_keys(3) == [0, 1, 2, 3]
    with pytest.raises(ValidationError):
        get_likelihood("logit")
