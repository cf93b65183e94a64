import numpy as np
import pytest

from graphsan import GraphBundle, Split, sbm_bundle


def random_bundle(n=10, num_classes=3, d=4, edge_prob=0.35, seed=0,
                  with_features=True):
    """Small random graph with guaranteed nonempty train/val splits."""
    rng = np.random.default_rng(seed)
    A = np.zeros((n, n))
    iu, iv = np.triu_indices(n, k=1)
    draw = rng.random(iu.size) < edge_prob
    A[iu[draw], iv[draw]] = 1.0
    A[iv[draw], iu[draw]] = 1.0
    X = rng.standard_normal((n, d)) if with_features else None
    y = rng.integers(0, num_classes, size=n)
    perm = rng.permutation(n)
    k = max(1, n // 5)
    split = Split(train=perm[:k], val=perm[k:2 * k], test=perm[2 * k:])
    return GraphBundle(A, X, y, num_classes, split)


@pytest.fixture
def path2():
    """Two nodes, one edge."""
    return np.array([[0.0, 1.0], [1.0, 0.0]])


@pytest.fixture(scope="session")
def sbm100():
    """Separable 2-block SBM used by several training tests."""
    return sbm_bundle(n=100, num_classes=2, p_in=0.2, p_out=0.02,
                      feat_dim=8, class_sep=1.0, seed=7)
