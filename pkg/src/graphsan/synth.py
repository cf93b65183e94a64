"""Synthetic graph fixtures: stochastic block models with class features."""

from __future__ import annotations

import numpy as np

from .bundle import EdgeSet, GraphBundle, Split, apply_edits
from .errors import ConsistencyError

__all__ = ["sbm_bundle", "plant_cross_edges"]


def sbm_bundle(n: int = 200, num_classes: int = 2, p_in: float = 0.2,
               p_out: float = 0.02, feat_dim: int = 8, class_sep: float = 1.0,
               seed: int = 0, split_fracs=(0.1, 0.1, 0.8),
               with_features: bool = True) -> GraphBundle:
    """Two-or-more-block SBM with Gaussian class features and a random split.

    Nodes are assigned to near-equal contiguous blocks; intra-block pairs
    connect with p_in, cross-block with p_out. Features are isotropic
    Gaussians around class-specific means separated by class_sep along
    axis-aligned directions.
    """
    if num_classes > feat_dim and with_features:
        raise ConsistencyError("feat_dim must be >= num_classes")
    if abs(sum(split_fracs) - 1.0) > 1e-9:
        raise ConsistencyError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    sizes = [n // num_classes] * num_classes
    for i in range(n - sum(sizes)):
        sizes[i] += 1
    labels = np.repeat(np.arange(num_classes), sizes)

    iu, iv = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[iv], p_in, p_out)
    draw = rng.random(iu.size) < prob
    A = np.zeros((n, n))
    A[iu[draw], iv[draw]] = 1.0
    A[iv[draw], iu[draw]] = 1.0

    features = None
    if with_features:
        means = np.zeros((num_classes, feat_dim))
        means[np.arange(num_classes), np.arange(num_classes)] = class_sep
        features = means[labels] + rng.standard_normal((n, feat_dim))

    perm = rng.permutation(n)
    n_train = max(1, int(round(split_fracs[0] * n)))
    n_val = max(1, int(round(split_fracs[1] * n)))
    split = Split(train=perm[:n_train], val=perm[n_train:n_train + n_val],
                  test=perm[n_train + n_val:])
    return GraphBundle(A, features, labels, num_classes, split)


def plant_cross_edges(bundle: GraphBundle, k: int, seed: int = 0):
    """Insert k random cross-class non-edges; returns (poisoned, inserted)."""
    if bundle.labels is None:
        raise ConsistencyError("planting cross-class edges requires labels")
    rng = np.random.default_rng(seed)
    n = bundle.n
    y = bundle.labels
    iu, iv = np.triu_indices(n, k=1)
    eligible = (bundle.adjacency[iu, iv] == 0) & (y[iu] != y[iv])
    pool = np.flatnonzero(eligible)
    if pool.size < k:
        raise ConsistencyError(f"only {pool.size} cross-class non-edges available")
    pick = rng.choice(pool, size=k, replace=False)
    inserted = EdgeSet.from_pairs(zip(iu[pick].tolist(), iv[pick].tolist()))
    A = apply_edits(bundle.adjacency, EdgeSet.empty(), inserted)
    return bundle.with_adjacency(A), inserted
