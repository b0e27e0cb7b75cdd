import numpy as np
import pytest

from ezgzl.store import EmbeddingBank


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def clustered_bank(seed, n_classes=20, dim=16, clusters=4, spread=0.35):
    """Unit class embeddings scattered around a few cluster centroids."""
    rng = np.random.default_rng(seed)
    cents = unit_rows(rng, clusters, dim)
    t = cents[np.arange(n_classes) % clusters]
    t = t + spread * rng.standard_normal((n_classes, dim))
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    return EmbeddingBank(tuple(f"class_{i:02d}" for i in range(n_classes)), t)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
