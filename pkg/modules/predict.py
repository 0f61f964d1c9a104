# predict.py
# Predictive distributions at test inputs, the rank-1 predictive-variance
# update for a single changed site, and the TE / NTLL metrics.
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg, special, stats

from modules.errors import DomainError, ValidationError
from modules.inference import SiteParams, recompute_posterior
from modules.kernel import KernelParams, build_cov, build_cross_cov
from modules.likelihoods import Task

logger = logging.getLogger(__name__)

# (k*^T s_i)^2 / denominator is replaced by a dense recomputation below this.
RANK1_MIN_DENOMINATOR = 1e-12


@dataclass(frozen=True)
class NegBinomialParams:
    """Gamma(k, c) moment-matched to f^2, giving y* ~ NB with success probability 1 / (1 + c)."""

    k: np.ndarray
    c: np.ndarray

    def _dist(self):
        return stats.nbinom(n=self.k, p=1.0 / (1.0 + self.c))

    def pmf(self, y):
        return self._dist().pmf(y)

    def logpmf(self, y):
        return self._dist().logpmf(y)

    def mode(self):
        k = np.asarray(self.k)
        return np.where(k > 1, np.floor(self.c * (k - 1)), 0.0).astype(int)

    def mean(self):
        return self.k * self.c

    def variance(self):
        return self.k * self.c * (1.0 + self.c)


@dataclass(frozen=True)
class PredictiveDist:
    task: Task
    latent_mean: np.ndarray
    latent_var: np.ndarray
    class_prob: Optional[np.ndarray] = None
    nb: Optional[NegBinomialParams] = None

    def __len__(self):
        return len(self.latent_mean)

    def point(self):
        if self.task is Task.BINARY:
            return class_labels(self.class_prob)
        return self.nb.mode()

    def log_prob(self, y):
        y = np.asarray(y)
        if self.task is Task.BINARY:
            return special.log_ndtr(y * self.latent_mean / np.sqrt(1.0 + self.latent_var))
        return self.nb.logpmf(y)


@dataclass(frozen=True)
class Metrics:
    te: float
    ntll: float


def _check_var(var):
    var = np.asarray(var, dtype=float)
    if np.any(~(var > 0)):
        raise DomainError("predictive latent variance must be positive")
    return var


def latent_predict(posterior, X, X_star, params):
    """Latent predictive mean and variance at X_star from the fitted sites on X."""
    k_star = build_cross_cov(X, X_star, params)
    sqrt_tau = posterior.sqrt_tau
    L = posterior.chol
    K = posterior.kernel.with_jitter(posterior.jitter) if posterior.jitter else posterior.kernel.K

    nu = posterior.site_nu
    inner = linalg.solve_triangular(L, sqrt_tau * (K @ nu), lower=True)
    z = sqrt_tau * linalg.solve_triangular(L.T, inner, lower=False)
    mean = k_star.T @ (nu - z)

    v = linalg.solve_triangular(L, sqrt_tau[:, None] * k_star, lower=True)
    var = params.gamma - np.sum(v * v, axis=0)
    return mean, np.maximum(var, np.finfo(float).tiny)


@dataclass(frozen=True)
class Rank1Base:
    """A = (K + Sigma~)^-1 restricted to non-vacuous sites, plus one test point's k* and k**."""

    A: np.ndarray
    k_star: np.ndarray
    k_ss: float
    K: np.ndarray
    site_var: np.ndarray

    @classmethod
    def from_posterior(cls, posterior, k_star, k_ss):
        sqrt_tau = posterior.sqrt_tau
        B_inv = linalg.cho_solve((posterior.chol, True), np.eye(len(sqrt_tau)))
        A = sqrt_tau[:, None] * B_inv * sqrt_tau[None, :]
        K = posterior.kernel.with_jitter(posterior.jitter) if posterior.jitter else posterior.kernel.K
        return cls(A, np.asarray(k_star, dtype=float), float(k_ss), K, posterior.site_var)

    @property
    def variance(self):
        return self.k_ss - self.k_star @ self.A @ self.k_star


def dense_predictive_var(K, site_var, k_star, k_ss):
    site_var = np.asarray(site_var, dtype=float)
    active = np.isfinite(site_var)
    if not active.any():
        return float(k_ss)
    M = K[np.ix_(active, active)] + np.diag(site_var[active])
    solved = linalg.cho_solve(linalg.cho_factor(M, lower=True), k_star[active])
    return float(k_ss - k_star[active] @ solved)


def rank1_predictive_var(base, i, new_site_var):
    """Predictive variance after changing site i's variance, without refactorizing.

    Sherman-Morrison on (K + Sigma~) gives
        var_new = k** - k*^T A k* + (k*^T a_i)^2 / ((new - old)^-1 + A_ii)
    with a_i the i-th column of A.
    """
    old = base.site_var[i]
    if not new_site_var > 0:
        raise DomainError("site variance must be positive")
    if new_site_var == old:
        return float(base.variance)

    def dense():
        site_var = base.site_var.copy()
        site_var[i] = new_site_var
        return dense_predictive_var(base.K, site_var, base.k_star, base.k_ss)

    if math.isinf(old) or math.isinf(new_site_var):
        return dense()
    denominator = 1.0 / (new_site_var - old) + base.A[i, i]
    if abs(denominator) < RANK1_MIN_DENOMINATOR:
        logger.debug("rank-1 denominator %.3g too small for site %d, recomputing", denominator, i)
        return dense()
    projection = base.k_star @ base.A[:, i]
    return float(base.variance + projection * projection / denominator)


def class_predictive(latent_mean, latent_var):
    var = _check_var(latent_var)
    return special.ndtr(np.asarray(latent_mean, dtype=float) / np.sqrt(1.0 + var))


def class_labels(prob):
    # probability exactly 1/2 predicts +1
    return np.where(np.asarray(prob) >= 0.5, 1, -1)


def count_predictive(latent_mean, latent_var):
    var = _check_var(latent_var)
    mean = np.asarray(latent_mean, dtype=float)
    second = mean * mean + var
    spread = 2.0 * var * (2.0 * mean * mean + var)
    return NegBinomialParams(k=second * second / spread, c=spread / second)


def predict(posterior, X, X_star, params, task):
    mean, var = latent_predict(posterior, X, X_star, params)
    if Task(task) is Task.BINARY:
        return PredictiveDist(Task.BINARY, mean, var, class_prob=class_predictive(mean, var))
    return PredictiveDist(Task.COUNT, mean, var, nb=count_predictive(mean, var))


def evaluate(predictions, truth):
    truth = np.asarray(truth)
    if len(truth) != len(predictions) or len(truth) == 0:
        raise ValidationError(f"{len(predictions)} predictions for {len(truth)} targets")
    errors = np.abs(truth - predictions.point())
    if predictions.task is Task.BINARY:
        errors = errors / 2.0
    return Metrics(te=float(np.mean(errors)), ntll=float(-np.mean(predictions.log_prob(truth))))


@dataclass
class FittedModel:
    """Everything predict needs: training inputs, kernel, sites and input standardization."""

    X: np.ndarray
    params: object
    posterior: object
    likelihood: str
    task: Task
    mean: np.ndarray
    std: np.ndarray

    def predict(self, X_star):
        X_star = np.asarray(X_star, dtype=float)
        if X_star.ndim != 2 or X_star.shape[1] != self.X.shape[1]:
            raise ValidationError(f"expected {self.X.shape[1]} feature columns, got {X_star.shape}")
        X_star = (X_star - self.mean) / self.std
        return predict(self.posterior, self.X, X_star, self.params, self.task)


def save_model(model, path):
    sites = model.posterior.sites
    np.savez(
        path,
        X=model.X,
        log_params=model.params.to_log(),
        tau=np.array([s.tau for s in sites]),
        nu=np.array([s.nu for s in sites]),
        log_zt=np.array([s.log_zt for s in sites]),
        likelihood=np.array(model.likelihood),
        task=np.array(model.task.value),
        mean=model.mean,
        std=model.std,
    )


def load_model(path):
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {key: data[key] for key in data.files}
    except (OSError, ValueError) as exc:
        raise ValidationError(f"could not read model {path}: {exc}") from exc
    missing = {"X", "log_params", "tau", "nu", "log_zt", "likelihood", "task", "mean", "std"} - set(arrays)
    if missing:
        raise ValidationError(f"model {path} is missing {sorted(missing)}")

    params = KernelParams.from_log(arrays["log_params"])
    sites = [SiteParams(float(t), float(n), float(z)) for t, n, z in zip(arrays["tau"], arrays["nu"], arrays["log_zt"])]
    posterior = recompute_posterior(build_cov(arrays["X"], params), sites)
    return FittedModel(arrays["X"], params, posterior, str(arrays["likelihood"]), Task(str(arrays["task"])),
                       arrays["mean"], arrays["std"])
