import numpy as np
import pytest

from modules.errors import DomainError, SingularMatrixError, ValidationError
from modules.kernel import JITTER_MAX, KernelParams, build_cov, build_cross_cov, jittered_cholesky, kernel_eval


def test_kernel_eval_values():
    params = KernelParams(1.0, [1.0])
    assert kernel_eval([0.0], [0.0], params) == 1.0
    assert kernel_eval([0.0], [1.0], params) == pytest.approx(np.exp(-0.5))
    scaled = KernelParams(2.0, [0.5, 2.0])
    assert kernel_eval([1.0, 1.0], [0.0, 0.0], scaled) == pytest.approx(2.0 * np.exp(-0.5 * (4.0 + 0.25)))


def test_kernel_eval_dimension_mismatch():
    with pytest.raises(ValidationError):
        kernel_eval([0.0, 1.0], [0.0], KernelParams(1.0, [1.0, 1.0]))


@pytest.mark.parametrize("gamma, scales", [(0.0, [1.0]), (-1.0, [1.0]), (1.0, [0.0]), (1.0, [np.inf])])
def test_kernel_params_reject_nonpositive(gamma, scales):
    with pytest.raises(DomainError):
        KernelParams(gamma, scales)


def test_default_and_log_round_trip():
    params = KernelParams.default(4)
    assert params.gamma == 1.0
    np.testing.assert_allclose(params.lengthscales, [2.0] * 4)
    again = KernelParams.from_log(params.to_log())
    np.testing.assert_allclose(again.lengthscales, params.lengthscales)
    assert again.gamma == pytest.approx(params.gamma)


def test_lengthscales_are_read_only():
    params = KernelParams(1.0, [1.0, 2.0])
    with pytest.raises(ValueError):
        params.lengthscales[0] = 5.0


def test_build_cov_properties(rng):
    X = rng.standard_normal((15, 3))
    params = KernelParams(1.7, [0.8, 1.2, 2.0])
    cov = build_cov(X, params)
    np.testing.assert_array_equal(cov.K, cov.K.T)
    np.testing.assert_array_equal(np.diag(cov.K), np.full(15, 1.7))
    assert np.linalg.eigvalsh(cov.K).min() > -1e-12
    np.testing.assert_allclose(cov.K[2, 7], kernel_eval(X[2], X[7], params), rtol=1e-13)


def test_build_cross_cov_shape(rng):
    params = KernelParams(1.0, [1.0, 1.0])
    K = build_cross_cov(rng.standard_normal((5, 2)), rng.standard_normal((3, 2)), params)
    assert K.shape == (5, 3)
    with pytest.raises(ValidationError):
        build_cross_cov(rng.standard_normal((5, 2)), rng.standard_normal((3, 3)), params)


def test_duplicate_inputs_need_jitter():
    X = np.zeros((4, 1))
    cov = build_cov(X, KernelParams(1.0, [1.0]))
    L, jitter = jittered_cholesky(cov.with_jitter, cov.gamma)
    assert 0.0 < jitter <= JITTER_MAX
    np.testing.assert_allclose(L @ L.T, cov.with_jitter(jitter), atol=1e-12)


def test_jitter_gives_up_on_indefinite_matrix():
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(SingularMatrixError):
        jittered_cholesky(lambda j: bad + j * np.eye(2), 1.0)
