# kernel.py
# Squared-exponential covariance and covariance-matrix assembly.
import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from modules.errors import DomainError, SingularMatrixError, ValidationError

logger = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-6


@dataclass(frozen=True, eq=False)
class KernelParams:
    """Signal variance gamma and one lengthscale per input dimension."""

    gamma: float
    lengthscales: np.ndarray

    def __post_init__(self):
        gamma = float(self.gamma)
        lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        if lengthscales.ndim != 1 or lengthscales.size == 0:
            raise DomainError("lengthscales must be a non-empty vector")
        if not np.isfinite(gamma) or gamma <= 0:
            raise DomainError(f"gamma must be positive and finite, got {gamma}")
        if not np.all(np.isfinite(lengthscales)) or np.any(lengthscales <= 0):
            raise DomainError("lengthscales must be positive and finite")
        lengthscales.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "lengthscales", lengthscales)

    @property
    def dim(self):
        return self.lengthscales.size

    @classmethod
    def default(cls, dim):
        return cls(1.0, np.full(dim, np.sqrt(dim)))

    @classmethod
    def from_log(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(np.exp(theta[0]), np.exp(theta[1:]))

    def to_log(self):
        return np.concatenate(([np.log(self.gamma)], np.log(self.lengthscales)))

    def __repr__(self):
        scales = ", ".join(f"{value:.4g}" for value in self.lengthscales)
        return f"KernelParams(gamma={self.gamma:.4g}, lengthscales=[{scales}])"


@dataclass(frozen=True, eq=False)
class CovMatrix:
    K: np.ndarray
    gamma: float
    jitter: float = 0.0

    @property
    def n(self):
        return self.K.shape[0]

    def with_jitter(self, jitter):
        return self.K + jitter * np.eye(self.n)


def _as_inputs(X, dim, name):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if dim == 1 else X[None, :]
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValidationError(f"{name} has shape {X.shape}, expected (n, {dim})")
    return X


def kernel_eval(x, x2, params):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape or x.size != params.dim:
        raise ValidationError(f"dimension mismatch: {x.shape}, {x2.shape}, kernel dim {params.dim}")
    scaled = (x - x2) / params.lengthscales
    return params.gamma * np.exp(-0.5 * np.dot(scaled, scaled))


def build_cross_cov(X, X_star, params):
    X = _as_inputs(X, params.dim, "X")
    X_star = _as_inputs(X_star, params.dim, "X_star")
    sq = cdist(X / params.lengthscales, X_star / params.lengthscales, "sqeuclidean")
    return params.gamma * np.exp(-0.5 * sq)


def build_cov(X, params):
    X = _as_inputs(X, params.dim, "X")
    if X.shape[0] < 1:
        raise ValidationError("build_cov needs at least one input")
    K = build_cross_cov(X, X, params)
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, params.gamma)
    return CovMatrix(K, params.gamma)


def jittered_cholesky(build, gamma):
    """Lower Cholesky factor of build(jitter), escalating the diagonal jitter on failure.

    build maps a jitter magnitude to the matrix to factorize; it is called
    with 0 first, then 1e-10*gamma growing tenfold up to 1e-6*gamma.
    """
    jitter = 0.0
    while True:
        try:
            return linalg.cholesky(build(jitter), lower=True, check_finite=True), jitter
        except (linalg.LinAlgError, ValueError) as exc:
            jitter = JITTER_START * gamma if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * gamma * (1 + 1e-9):
                raise SingularMatrixError(
                    "Cholesky failed at maximum jitter",
                    {"max_jitter": JITTER_MAX * gamma, "cause": str(exc)},
                ) from exc
            logger.debug("Cholesky failed, retrying with jitter %.1e", jitter)
