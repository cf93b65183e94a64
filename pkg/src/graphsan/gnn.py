"""Two-layer linearized graph network: inner training and prediction.

The model is S = softmax(Â² X W) with Â the self-loop-normalized adjacency.
There is no hidden nonlinearity and no bias, so the propagated features
Â² X can be computed once per adjacency and cached; only W is trained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .bundle import GraphBundle, normalize_adjacency
from .errors import ConsistencyError, EmptySubset, FormatError, NonFinite

__all__ = [
    "TrainConfig",
    "TrainedGnn",
    "row_softmax",
    "feature_matrix",
    "propagate",
    "forward",
    "train_inner",
    "train_nll",
    "train_nll_grad",
    "predict",
    "accuracy",
    "save_weights",
    "load_weights",
]


@dataclass(frozen=True)
class TrainConfig:
    """Inner-loop optimizer settings (Adam on W)."""

    epochs: int = 100
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    seed: int = 0
    init_scale: float = 0.1

    def __post_init__(self):
        if self.epochs <= 0:
            raise ConsistencyError("epochs must be > 0")
        if self.learning_rate <= 0:
            raise ConsistencyError("learning_rate must be > 0")

    def with_seed(self, seed: int) -> "TrainConfig":
        return TrainConfig(self.epochs, self.learning_rate, self.weight_decay,
                           seed, self.init_scale)


@dataclass(frozen=True)
class TrainedGnn:
    """Trained weights plus cached propagation products and outputs."""

    weights: np.ndarray     # (d, C)
    propagated: np.ndarray  # (n, d) cached Â² X
    logits: np.ndarray      # (n, C)
    probs: np.ndarray       # (n, C), rows sum to 1

    def __post_init__(self):
        sums = self.probs.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ConsistencyError("probability rows must sum to 1")


def row_softmax(Z: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction for stability."""
    Z = np.asarray(Z, dtype=np.float64)
    shifted = Z - Z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def feature_matrix(bundle: GraphBundle, identity_fallback: bool = True) -> np.ndarray:
    """Node features, substituting the identity matrix when the graph has none."""
    if bundle.features is not None:
        return bundle.features
    if not identity_fallback:
        raise ConsistencyError("bundle has no features and identity fallback is off")
    return np.eye(bundle.n)


def propagate(A: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Two-hop propagated features Â(ÂX)."""
    A_hat = normalize_adjacency(A)
    return A_hat @ (A_hat @ X)


def forward(A: np.ndarray, X: np.ndarray, W: np.ndarray):
    """Logits Â²XW and row-softmax probabilities."""
    logits = propagate(A, X) @ W
    return logits, row_softmax(logits)


def _tensor(a: np.ndarray) -> torch.Tensor:
    """Fresh tensor copy (bundle arrays are read-only, torch needs writable)."""
    return torch.from_numpy(np.array(a))


def _nll_sum(logits_t: torch.Tensor, labels_t: torch.Tensor, idx_t: torch.Tensor) -> torch.Tensor:
    logp = torch.log_softmax(logits_t, dim=1)
    return -logp[idx_t, labels_t[idx_t]].sum()


def train_nll(prop: np.ndarray, W: np.ndarray, labels: np.ndarray, idx: np.ndarray) -> float:
    """Summed cross-entropy of softmax(prop @ W) against labels on idx."""
    logits = prop @ W
    logp = np.log(row_softmax(logits).clip(1e-300))
    return float(-logp[idx, labels[idx]].sum())


def train_nll_grad(prop: np.ndarray, W: np.ndarray, labels: np.ndarray, idx: np.ndarray):
    """(loss, dloss/dW) for the summed training cross-entropy."""
    prop_t = _tensor(prop)
    W_t = torch.tensor(W, dtype=torch.float64, requires_grad=True)
    labels_t = _tensor(labels)
    idx_t = _tensor(idx)
    loss = _nll_sum(prop_t @ W_t, labels_t, idx_t)
    (grad,) = torch.autograd.grad(loss, W_t)
    return float(loss.item()), grad.numpy()


def train_inner(bundle: GraphBundle, cfg: TrainConfig,
                identity_fallback: bool = True) -> TrainedGnn:
    """Train W by Adam on the summed train-split cross-entropy.

    Deterministic given cfg.seed. Raises NonFinite if the loss diverges.
    """
    if bundle.labels is None:
        raise ConsistencyError("training requires labels")
    X = feature_matrix(bundle, identity_fallback)
    prop = propagate(bundle.adjacency, X)
    n, d = prop.shape
    C = bundle.num_classes
    train_idx = bundle.split.train

    gen = torch.Generator().manual_seed(cfg.seed)
    W_t = (torch.randn(d, C, generator=gen, dtype=torch.float64) * cfg.init_scale)
    W_t.requires_grad_(True)
    prop_t = _tensor(prop)
    labels_t = _tensor(bundle.labels)
    idx_t = _tensor(train_idx)

    opt = torch.optim.Adam([W_t], lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    scale = float(len(train_idx))
    for epoch in range(cfg.epochs):
        opt.zero_grad()
        loss = _nll_sum(prop_t @ W_t, labels_t, idx_t) / scale
        if not torch.isfinite(loss):
            raise NonFinite(f"training loss non-finite at epoch {epoch}")
        loss.backward()
        opt.step()

    W = W_t.detach().numpy().copy()
    logits = prop @ W
    return TrainedGnn(weights=W, propagated=prop, logits=logits, probs=row_softmax(logits))


def predict(probs: np.ndarray) -> np.ndarray:
    """Argmax labels; ties resolve to the smallest class index."""
    return np.argmax(probs, axis=1)


def accuracy(pred: np.ndarray, truth: np.ndarray, subset: np.ndarray) -> float:
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise EmptySubset("accuracy over an empty subset is undefined")
    return float(np.mean(pred[subset] == truth[subset]))


# ---------------------------------------------------------------------------
# Weight checkpoints: one JSON header line {d, C, seed}, then d CSV rows of W.


def save_weights(W: np.ndarray, path, seed: int) -> None:
    d, C = W.shape
    header = json.dumps({"d": d, "C": C, "seed": seed}, sort_keys=True)
    rows = (",".join(repr(float(v)) for v in row) for row in W)
    Path(path).write_text(header + "\n" + "".join(r + "\n" for r in rows))


def load_weights(path):
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}:1: empty checkpoint")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:1: invalid JSON header: {e.msg}") from e
    for key in ("d", "C", "seed"):
        if key not in meta:
            raise FormatError(f"{path}:1: missing header key '{key}'")
    d, C = int(meta["d"]), int(meta["C"])
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = [float(tok) for tok in line.split(",")]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric weight")
        if len(row) != C:
            raise FormatError(f"{path}:{lineno}: expected {C} columns, got {len(row)}")
        rows.append(row)
    if len(rows) != d:
        raise FormatError(f"{path}:{len(lines)}: expected {d} weight rows, got {len(rows)}")
    return np.asarray(rows, dtype=np.float64), int(meta["seed"])
