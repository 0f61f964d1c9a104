import math
import os
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from modules.likelihoods import Task, TiltedMoments  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: benchmark reproduction runs on real dataset files")


class GaussianLikelihood:
    """y ~ N(f, noise). The tilted distribution is Gaussian, so every projection is exact."""

    name = "gaussian"
    table_id = 99
    task = Task.COUNT

    def __init__(self, noise=0.25):
        self.noise = noise

    def validate(self, y):
        return np.asarray(y, dtype=float)

    def tilted_moments(self, cavity, y):
        total = cavity.var + self.noise
        gain = cavity.var / total
        return TiltedMoments(
            log_z=float(stats.norm.logpdf(y, cavity.mu, math.sqrt(total))),
            mean=cavity.mu + gain * (y - cavity.mu),
            var=cavity.var * self.noise / total,
        )

    def _posterior(self, cavity, y):
        moments = self.tilted_moments(cavity, y)
        return moments.mean, math.sqrt(moments.var)

    def tilted_cdf(self, x, cavity, y, events=None):
        mean, std = self._posterior(cavity, y)
        return float(stats.norm.cdf(x, mean, std))

    def log_likelihood(self, f, y):
        return stats.norm.logpdf(y, np.asarray(f, dtype=float), math.sqrt(self.noise))

    def support_hint(self, cavity, y):
        mean, std = self._posterior(cavity, y)
        return mean - 12.0 * std, mean + 12.0 * std

    def breakpoints(self, cavity, y):
        return [self._posterior(cavity, y)[0]]


@pytest.fixture
def gaussian_likelihood():
    return GaussianLikelihood()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def data_dir():
    path = os.environ.get("QP_DATA_DIR")
    if not path or not Path(path).is_dir():
        pytest.skip("QP_DATA_DIR is not set to a directory with the benchmark CSV files")
    return Path(path)
