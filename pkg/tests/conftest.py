"""
Shared fixtures for the netfx test suite.

Puts src/ on sys.path the same way main.py does and provides a tabulated
discrete instance (binary covariate, clusters of size 2 and 3) whose
expectations can be computed by exhaustive enumeration.
"""

import itertools
import sys
from pathlib import Path

import numpy as np
import pytest

src_path = Path(__file__).parent.parent / "src"
sys.path.insert(0, str(src_path))

from core.outcome import OutcomeModel  # noqa: E402
from core.propensity import KnownRandomization  # noqa: E402
from core.settings import NetfxSettings, set_settings  # noqa: E402
from models.cluster_data import ClusterObservation, Dataset, enumerate_assignments  # noqa: E402


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path):
    """Single-threaded settings with logs under a temporary directory."""
    set_settings(NetfxSettings(threads=1, log_dir=str(tmp_path / 'logs')))
    yield
    set_settings(NetfxSettings(threads=1, log_dir=str(tmp_path / 'logs')))


class FunctionOutcome(OutcomeModel):
    """Outcome model evaluating a fixed function fn(assignments, x, k) -> (T, M)."""

    name = 'function'

    def __init__(self, fn):
        self.fn = fn

    def predict_table(self, x, k, assignments=None):
        if assignments is None:
            assignments = enumerate_assignments(x.shape[0])
        return self.fn(np.asarray(assignments, dtype=float), np.asarray(x, dtype=float), k)


def _peers(a):
    return a.sum(axis=-1, keepdims=True) - a


def true_g(a, x, k):
    z = x[:, 0]
    s = _peers(a)
    return 1.0 + k + (2.0 + 0.5 * z) * a + 0.7 * s * z - 0.4 * a * s + 0.3 * z


def wrong_g(a, x, k):
    z = x[:, 0]
    return 0.5 + 1.3 * a - 0.2 * _peers(a) + z ** 2 - 0.1 * k


class DiscreteInstance:
    """Two cluster types: size 2 (k=1) and size 3 (k=2), one binary covariate per unit."""

    sizes = {1: 2, 2: 3}
    type_prob = {1: 0.4, 2: 0.6}
    covariate_prob = 0.3

    def __init__(self):
        self.g_true = FunctionOutcome(true_g)
        self.g_wrong = FunctionOutcome(wrong_g)
        self.e_true = KnownRandomization(lambda j, x, k: 0.3 + 0.4 * x[j, 0] + (0.05 if k == 2 else 0.0))
        self.e_wrong = KnownRandomization({1: 0.5, 2: 0.65})

    def profiles(self, k):
        """Every covariate matrix of a type-k cluster with its probability."""
        M = self.sizes[k]
        q = self.covariate_prob
        for bits in itertools.product((0.0, 1.0), repeat=M):
            x = np.array(bits)[:, None]
            yield x, float(np.prod(np.where(x[:, 0] == 1.0, q, 1.0 - q)))

    def cluster(self, k, a, x, cluster_id='c'):
        """Noise-free cluster with Y = g*(A, X)."""
        y = true_g(np.asarray(a, dtype=float)[None, :], x, k)[0]
        return ClusterObservation(cluster_id, k, y, a, x)


@pytest.fixture
def discrete():
    return DiscreteInstance()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_dataset(rng, counts=None, covariates=2):
    """Random clusters of sizes 2 (type 1) and 3 (type 2) with Gaussian covariates."""
    counts = counts or {1: 30, 2: 20}
    sizes = {1: 2, 2: 3}
    clusters = []
    for k, n in counts.items():
        for i in range(n):
            M = sizes[k]
            x = rng.standard_normal((M, covariates))
            a = rng.integers(0, 2, size=M)
            y = 1.0 + a * 2.0 + x.sum(axis=1) + rng.standard_normal(M)
            clusters.append(ClusterObservation(f"{k}-{i}", k, y, a, x))
    return Dataset.from_clusters(clusters)


@pytest.fixture
def random_data(rng):
    return random_dataset(rng)


@pytest.fixture
def make_dataset(rng):
    """Factory for random datasets with the given per-type cluster counts."""
    return lambda counts=None: random_dataset(rng, counts)
