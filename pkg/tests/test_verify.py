import math

import numpy as np

from modules import verify
from modules.likelihoods import PROBIT


def test_random_sites_stay_in_range():
    rng = np.random.default_rng(3)
    for _ in range(50):
        likelihood, cavity, y = verify.random_site(rng)
        assert -3.0 <= cavity.mu <= 3.0
        assert 0.1 <= cavity.std <= 10.0
        if likelihood is PROBIT:
            assert y in (-1, 1)
        else:
            assert 0 <= y <= verify.POISSON_Y_MAX


def test_exact_checks_pass():
    rng = np.random.default_rng(0)
    results = [verify.check_gaussian_transport(20, rng), verify.check_rank1(20, rng)]
    results += verify.check_special_functions(20, rng)
    assert verify.all_passed(results)
    assert all(result.cases > 0 for result in results)


def test_result_reports_raised_cases():
    result = verify._result("demo", [1e-12], 1e-9, failures=2)
    assert not result.passed
    assert result.cases == 3
    assert "2 cases raised" in result.detail


def test_nan_worst_fails():
    result = verify.CheckResult("demo", True, math.nan, 1e-9, 1)
    assert not verify.all_passed([result])


def test_run_checks_reports_progress(monkeypatch):
    calls = []

    def fake_check(samples, rng):
        return verify.CheckResult("fake", True, 0.0, 1.0, samples)

    monkeypatch.setattr(verify, "CHECKS", [fake_check, fake_check])
    results = verify.run_checks(samples=4, seed=1, progress=calls.append)
    assert [r.cases for r in results] == [4, 4]
    assert calls == ["fake_check", "fake_check"]


def test_all_checks_pass_on_a_small_sample():
    results = verify.run_checks(samples=10, seed=0)
    failed = [f"{r.name}: worst {r.worst:.3g} > {r.tolerance:g} {r.detail}" for r in results if not r.passed]
    assert not failed
    assert verify.all_passed(results)


def test_convexity_check_draws_several_cavities():
    results = verify.check_convexity(10, np.random.default_rng(4))
    assert [r.name for r in results] == ["W1 convexity", "W2 convexity", "W3 convexity"]
    assert all(r.cases == 3 for r in results)
    assert all(r.passed for r in results)
