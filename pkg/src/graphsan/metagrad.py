"""Outer pruning loss, its gradient over adjacency entries, and edge selection.

The outer loss is a lambda-weighted cross-entropy over normal validation and
test nodes plus an attribute-smoothness penalty. Its gradient with respect to
every adjacency entry (the meta-gradient) is obtained by autograd through the
normalization pipeline, either holding the trained weights fixed (first-order)
or differentiating through a few unrolled plain-gradient inner steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .bundle import EdgeSet, GraphBundle, laplacian, smoothness
from .errors import ConsistencyError, EmptyFocus, NonFinite, OutOfRange
from .gnn import TrainConfig, TrainedGnn, _tensor, feature_matrix, predict, propagate

__all__ = [
    "LambdaPair",
    "OuterLossConfig",
    "lambda_schedule",
    "outer_loss",
    "outer_loss_value",
    "meta_gradient",
    "mask_gradient",
    "select_edge",
]

MODES = ("first_order", "unrolled")


@dataclass(frozen=True)
class LambdaPair:
    """Validation/test loss weights; they sum to 1 exactly."""

    lambda_val: float
    lambda_test: float

    def __post_init__(self):
        if not (0.0 <= self.lambda_val <= 1.0 and 0.0 <= self.lambda_test <= 1.0):
            raise ConsistencyError("lambda weights must lie in [0, 1]")
        if self.lambda_val + self.lambda_test != 1.0:
            raise ConsistencyError("lambda weights must sum to 1 exactly")


@dataclass(frozen=True)
class OuterLossConfig:
    """Outer-loss knobs: smoother weight, deletion budget, gradient mode."""

    eta: float = 1e-4
    budget: int = 1
    mode: str = "first_order"
    unroll_steps: int = 10

    def __post_init__(self):
        if self.eta < 0:
            raise ConsistencyError("eta must be >= 0")
        if self.budget < 1:
            raise ConsistencyError("budget must be >= 1")
        if self.mode not in MODES:
            raise ConsistencyError(f"mode must be one of {MODES}")
        if self.unroll_steps < 0:
            raise ConsistencyError("unroll_steps must be >= 0")


def lambda_schedule(t: int, budget: int) -> LambdaPair:
    """Weights at step t of a budget-B run: lambda_val = 1 - t/B.

    The complement is computed so the pair sums to 1 exactly in floating
    point (the subtraction with the larger operand is exact by Sterbenz).
    """
    if budget < 1:
        raise OutOfRange("budget must be >= 1")
    if t < 0 or t > budget:
        raise OutOfRange(f"step t={t} outside [0, {budget}]")
    lam_t = t / budget
    if lam_t <= 0.5:
        lam_v = 1.0 - lam_t
        lam_t = 1.0 - lam_v
    else:
        lam_v = 1.0 - lam_t
    return LambdaPair(lambda_val=lam_v, lambda_test=lam_t)


def _as_index_array(nodes) -> np.ndarray:
    return np.unique(np.asarray(sorted(nodes) if isinstance(nodes, (set, frozenset)) else nodes,
                                dtype=np.int64))


def _focus_sets(bundle: GraphBundle, normals) -> tuple[np.ndarray, np.ndarray]:
    normals = _as_index_array(normals)
    val_focus = np.intersect1d(bundle.split.val, normals)
    test_focus = np.intersect1d(bundle.split.test, normals)
    if val_focus.size == 0 and test_focus.size == 0:
        raise EmptyFocus("no normal validation or test node to compute the loss on")
    return val_focus, test_focus


def _log_row_softmax(Z: np.ndarray) -> np.ndarray:
    shifted = Z - Z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def outer_loss_value(A: np.ndarray, X: np.ndarray, W: np.ndarray,
                     labels: np.ndarray, pseudo: np.ndarray,
                     val_focus: np.ndarray, test_focus: np.ndarray,
                     lambdas: LambdaPair, eta: float,
                     smooth_X: Optional[np.ndarray] = None) -> float:
    """Outer loss evaluated at an arbitrary adjacency (pseudo-labels fixed).

    This is the scalar the meta-gradient differentiates; finite-difference
    checks evaluate it directly at perturbed adjacencies.
    """
    logp = _log_row_softmax(propagate(A, X) @ W)
    loss = 0.0
    if val_focus.size:
        loss -= lambdas.lambda_val * logp[val_focus, labels[val_focus]].sum()
    if test_focus.size:
        loss -= lambdas.lambda_test * logp[test_focus, pseudo[test_focus]].sum()
    if eta != 0.0:
        if smooth_X is None:
            raise ConsistencyError("eta > 0 requires node features for the smoother")
        loss += eta * smoothness(smooth_X, laplacian(A))
    return float(loss)


def outer_loss(gnn: TrainedGnn, bundle: GraphBundle, normals,
               lambdas: LambdaPair, eta: float) -> float:
    """Outer loss at the bundle's own adjacency, pseudo-labels from gnn."""
    val_focus, test_focus = _focus_sets(bundle, normals)
    return outer_loss_value(
        bundle.adjacency, feature_matrix(bundle), gnn.weights,
        bundle.labels, predict(gnn.probs), val_focus, test_focus,
        lambdas, eta, smooth_X=bundle.features,
    )


def _torch_propagate(A_t: torch.Tensor, X_t: torch.Tensor) -> torch.Tensor:
    n = A_t.shape[0]
    A_tilde = A_t + torch.eye(n, dtype=A_t.dtype)
    d = A_tilde.sum(dim=1)
    s = d.pow(-0.5)
    A_hat = A_tilde * s.unsqueeze(1) * s.unsqueeze(0)
    return A_hat @ (A_hat @ X_t)


def _torch_smoothness(A_t: torch.Tensor, X_t: torch.Tensor) -> torch.Tensor:
    d = A_t.sum(dim=1)
    pos = d > 0
    d_safe = torch.where(pos, d, torch.ones_like(d))
    s = torch.where(pos, d_safe.pow(-0.5), torch.zeros_like(d))
    LX = torch.where(pos, torch.ones_like(d), torch.zeros_like(d)).unsqueeze(1) * X_t \
        - (A_t * s.unsqueeze(1) * s.unsqueeze(0)) @ X_t
    return (LX * X_t).sum()


def meta_gradient(bundle: GraphBundle, gnn: TrainedGnn, cfg: OuterLossConfig,
                  lambdas: LambdaPair, normals,
                  train_cfg: Optional[TrainConfig] = None,
                  symmetrize: bool = True) -> np.ndarray:
    """Gradient of the outer loss with respect to every adjacency entry.

    first_order holds the trained W fixed; unrolled differentiates through
    cfg.unroll_steps plain gradient-descent refinements of W (Adam state is
    not part of the graph). The result is symmetrized as (G + G^T)/2 because
    the adjacency is constrained symmetric.
    """
    val_focus, test_focus = _focus_sets(bundle, normals)
    X = feature_matrix(bundle)
    pseudo = predict(gnn.probs)

    A_t = torch.tensor(bundle.adjacency, dtype=torch.float64, requires_grad=True)
    X_t = _tensor(X)
    prop = _torch_propagate(A_t, X_t)

    if cfg.mode == "unrolled":
        if train_cfg is None:
            raise ConsistencyError("unrolled mode requires a TrainConfig for step size")
        labels_t = _tensor(bundle.labels)
        train_t = _tensor(bundle.split.train)
        scale = float(bundle.split.train.size)
        W = torch.tensor(gnn.weights, dtype=torch.float64, requires_grad=True)
        for _ in range(cfg.unroll_steps):
            logp = torch.log_softmax(prop @ W, dim=1)
            inner = -logp[train_t, labels_t[train_t]].sum() / scale
            (g,) = torch.autograd.grad(inner, W, create_graph=True)
            W = W - train_cfg.learning_rate * g
    else:
        W = _tensor(gnn.weights)

    logp = torch.log_softmax(prop @ W, dim=1)
    loss = torch.zeros((), dtype=torch.float64)
    if val_focus.size:
        y = _tensor(bundle.labels[val_focus])
        loss = loss - lambdas.lambda_val * logp[_tensor(val_focus), y].sum()
    if test_focus.size:
        y = _tensor(pseudo[test_focus])
        loss = loss - lambdas.lambda_test * logp[_tensor(test_focus), y].sum()
    if cfg.eta != 0.0:
        if bundle.features is None:
            raise ConsistencyError("eta > 0 requires node features for the smoother")
        loss = loss + cfg.eta * _torch_smoothness(A_t, _tensor(bundle.features))

    (grad,) = torch.autograd.grad(loss, A_t)
    G = grad.numpy()
    if not np.all(np.isfinite(G)):
        raise NonFinite("meta-gradient contains NaN/Inf")
    if symmetrize:
        G = (G + G.T) / 2.0
    return G


def mask_gradient(G: np.ndarray, normals) -> np.ndarray:
    """Zero every entry whose endpoints are both normal nodes."""
    normals = _as_index_array(normals)
    out = np.array(G, copy=True)
    if normals.size:
        out[np.ix_(normals, normals)] = 0.0
    return out


def select_edge(G: np.ndarray, candidates: EdgeSet):
    """Candidate edge with the largest positive gradient, or None.

    Deleting an edge moves its entry 1 -> 0, so only positive gradients
    predict a first-order loss decrease. Ties resolve to the smallest
    (u, v) pair; iteration over sorted candidates makes that automatic.
    """
    best = None
    best_val = 0.0
    for u, v in candidates:
        val = G[u, v]
        if val > best_val:
            best = (u, v)
            best_val = val
    return best
