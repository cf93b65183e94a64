"""Fixture attackers that create ground-truth-labeled poisoned graphs.

The greedy attacker repeatedly retrains the inner model, takes the gradient
of its self-training cross-entropy on unlabeled nodes with respect to every
adjacency entry, and flips the pair whose flip direction most increases that
loss. A uniform-random flipper serves as a weak baseline, and a mixed pruner
builds partially-correct sanitation results for calibration experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .bundle import EdgeSet, GraphBundle, PoisonRecord, apply_edits
from .errors import ConsistencyError, InsufficientAdversarialEdges, NonFinite
from .gnn import TrainConfig, TrainedGnn, _tensor, feature_matrix, predict, train_inner
from .metagrad import _torch_propagate
from .sanitize import SanitationResult, StepRecord

__all__ = ["AttackConfig", "mettack_like", "random_attack", "mixed_prune_fixture"]


@dataclass(frozen=True)
class AttackConfig:
    """Attack strength as a fraction of clean edges, plus determinism knobs."""

    power: float
    self_training: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.power <= 0.5):
            raise ConsistencyError("power must lie in (0, 0.5]")


def _attack_gradient(bundle: GraphBundle, gnn: TrainedGnn, mode: str,
                     unroll_steps: int, train_cfg: TrainConfig) -> np.ndarray:
    """Gradient of the self-training CE on unlabeled nodes w.r.t. adjacency."""
    pseudo = predict(gnn.probs)
    unlabeled = np.sort(np.concatenate([bundle.split.val, bundle.split.test]))
    A_t = torch.tensor(bundle.adjacency, dtype=torch.float64, requires_grad=True)
    X_t = _tensor(feature_matrix(bundle))
    prop = _torch_propagate(A_t, X_t)
    if mode == "unrolled":
        labels_t = _tensor(bundle.labels)
        train_t = _tensor(bundle.split.train)
        scale = float(bundle.split.train.size)
        W = torch.tensor(gnn.weights, dtype=torch.float64, requires_grad=True)
        for _ in range(unroll_steps):
            logp = torch.log_softmax(prop @ W, dim=1)
            inner = -logp[train_t, labels_t[train_t]].sum() / scale
            (g,) = torch.autograd.grad(inner, W, create_graph=True)
            W = W - train_cfg.learning_rate * g
    else:
        W = _tensor(gnn.weights)
    logp = torch.log_softmax(prop @ W, dim=1)
    idx = _tensor(unlabeled)
    tgt = _tensor(pseudo[unlabeled])
    loss = -logp[idx, tgt].sum()
    (grad,) = torch.autograd.grad(loss, A_t)
    G = grad.numpy()
    if not np.all(np.isfinite(G)):
        raise NonFinite("attack gradient contains NaN/Inf")
    return (G + G.T) / 2.0


def mettack_like(clean: GraphBundle, cfg: AttackConfig,
                 train_cfg: Optional[TrainConfig] = None,
                 meta_mode: str = "first_order", unroll_steps: int = 10,
                 score_sink: Optional[list] = None):
    """Greedy meta-gradient structure attack; returns (poisoned, record).

    Each step flips the pair with the best first-order increase of the
    attacker's loss: insert where the gradient is positive on a non-edge,
    delete where it is negative on an edge. The flip count is exactly
    ceil(power * |E_clean|) and no pair is flipped twice. score_sink, when
    given, collects the chosen flip's predicted loss increase per step.
    """
    if clean.labels is None:
        raise ConsistencyError("attack requires labels on the train split")
    train_cfg = train_cfg or TrainConfig(seed=cfg.seed)
    budget = math.ceil(cfg.power * clean.num_edges())
    n = clean.n
    A = clean.adjacency.copy()
    blocked = np.tril(np.ones((n, n), dtype=bool))  # diagonal + lower triangle
    inserted, deleted = [], []
    for _ in range(budget):
        cur = clean.with_adjacency(A)
        gnn = train_inner(cur, train_cfg)
        G = _attack_gradient(cur, gnn, meta_mode, unroll_steps, train_cfg)
        score = G * (1.0 - 2.0 * A)
        score[blocked] = -np.inf
        flat = int(np.argmax(score))
        u, v = divmod(flat, n)
        if score_sink is not None:
            score_sink.append(float(score[u, v]))
        blocked[u, v] = True
        if A[u, v] == 0:
            inserted.append((u, v))
            A[u, v] = A[v, u] = 1.0
        else:
            deleted.append((u, v))
            A[u, v] = A[v, u] = 0.0
    record = PoisonRecord(inserted=EdgeSet.from_pairs(inserted),
                          deleted=EdgeSet.from_pairs(deleted))
    return clean.with_adjacency(A), record


def random_attack(clean: GraphBundle, cfg: AttackConfig):
    """Uniform random flips up to the budget; returns (poisoned, record)."""
    rng = np.random.default_rng(cfg.seed)
    budget = math.ceil(cfg.power * clean.num_edges())
    n = clean.n
    iu, iv = np.triu_indices(n, k=1)
    pick = rng.choice(iu.size, size=budget, replace=False)
    A = clean.adjacency.copy()
    inserted, deleted = [], []
    for i in pick:
        u, v = int(iu[i]), int(iv[i])
        if A[u, v] == 0:
            inserted.append((u, v))
            A[u, v] = A[v, u] = 1.0
        else:
            deleted.append((u, v))
            A[u, v] = A[v, u] = 0.0
    record = PoisonRecord(inserted=EdgeSet.from_pairs(inserted),
                          deleted=EdgeSet.from_pairs(deleted))
    return clean.with_adjacency(A), record


def mixed_prune_fixture(poisoned: GraphBundle, record: PoisonRecord,
                        fraction: float, seed: int = 0,
                        budget: Optional[int] = None) -> SanitationResult:
    """Prune a controlled mix of true adversarial and normal edges.

    ceil(fraction * budget) deletions are sampled from the attacker's
    inserted edges, the rest from untouched edges. The default budget is the
    number of prunable (still present) inserted edges, so fraction=1 prunes
    exactly the adversarial insertions.
    """
    if not (0.0 <= fraction <= 1.0):
        raise ConsistencyError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    present = poisoned.edge_set()
    adv_pool = [e for e in record.inserted if e in present]
    normal_pool = [e for e in present if e not in record.inserted]
    B = len(adv_pool) if budget is None else budget
    if B < 1:
        raise ConsistencyError("pruning budget must be >= 1")
    k_adv = math.ceil(fraction * B)
    k_norm = B - k_adv
    if k_adv > len(adv_pool):
        raise InsufficientAdversarialEdges(
            f"need {k_adv} adversarial edges, only {len(adv_pool)} present")
    if k_norm > len(normal_pool):
        raise ConsistencyError(
            f"need {k_norm} normal edges, only {len(normal_pool)} present")
    chosen = []
    if k_adv:
        idx = rng.choice(len(adv_pool), size=k_adv, replace=False)
        chosen += [adv_pool[i] for i in idx]
    if k_norm:
        idx = rng.choice(len(normal_pool), size=k_norm, replace=False)
        chosen += [normal_pool[i] for i in idx]
    A = apply_edits(poisoned.adjacency, EdgeSet.from_pairs(chosen), EdgeSet.empty())
    trace = tuple(
        StepRecord(step=i, edge=chosen[i], gradient=float("nan"),
                   lambda_val=float("nan"), num_victims=0, outer_loss=float("nan"),
                   flags=("mixed_prune",))
        for i in range(len(chosen))
    )
    return SanitationResult(tuple(chosen), trace, poisoned.with_adjacency(A))
