import numpy as np
import pytest

from medmatch.data import AnalyticDataset


def make_dataset(seed=0, n=60, n_clusters=3, p=2, ids=None):
    """Small clustered dataset with exposure depending on covariates and U."""
    rng = np.random.default_rng(seed)
    cluster = np.arange(n) * n_clusters // n  # balanced, sorted
    u_levels = np.linspace(-1, 1, n_clusters) if n_clusters > 1 else np.zeros(1)
    u = u_levels[cluster]
    c = rng.normal(size=(n, p))
    zstar = u + rng.uniform(0, 1, n)
    w = 1 + c[:, 0] + zstar + rng.normal(0, 0.7, n)
    y = w + 0.5 * c[:, -1] + rng.normal(size=n)
    return AnalyticDataset(
        unit_id=np.arange(n) if ids is None else ids,
        cluster_id=np.array([f"k{g}" for g in cluster]),
        exposure=w,
        outcome=y,
        covariates=c,
        zstar=zstar,
        u=u,
        covariate_names=tuple(f"C{i + 1}" for i in range(p)),
    )


def matching_instance(seed):
    """Random problem with N <= 50, L <= 10 and clusters of at least 10 units."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 51))
    n_clusters = int(rng.integers(1, n // 10 + 1))
    data = make_dataset(seed=seed + 1000, n=n, n_clusters=n_clusters, p=int(rng.integers(1, 4)))
    lo, hi = data.exposure_range
    n_levels = int(rng.integers(1, 11))
    delta = (hi - lo) / n_levels * 1.0001
    return data, delta, float(rng.uniform()), rng


@pytest.fixture
def dataset():
    return make_dataset()
