"""Sanitation quality metrics and downstream accuracy evaluation.

All three set metrics compare the attacker's edit set against the
sanitizer's deletion set over canonical undirected pairs. Edges the attacker
deleted can never be "recovered" by a deletion-only sanitizer, so they only
enlarge the attack set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .bundle import EdgeSet, GraphBundle, PoisonRecord
from .errors import ConsistencyError, EmptyAttackSet
from .gnn import TrainConfig, accuracy, predict, train_inner

__all__ = ["esr", "f1", "cr", "MetricsReport", "evaluate_defense"]


def esr(s_atk: EdgeSet, s_san: EdgeSet) -> float:
    """Jaccard index of the attack set and the sanitizer's deletion set."""
    if len(s_atk) == 0:
        raise EmptyAttackSet("attack set is empty")
    inter = len(s_atk.intersection(s_san))
    union = len(s_atk.union(s_san))
    return inter / union


def f1(s_atk: EdgeSet, s_san: EdgeSet) -> float:
    """Dice coefficient 2|inter| / (|atk| + |san|)."""
    if len(s_atk) == 0:
        raise EmptyAttackSet("attack set is empty")
    inter = len(s_atk.intersection(s_san))
    return 2.0 * inter / (len(s_atk) + len(s_san))


def cr(s_atk: EdgeSet, s_san: EdgeSet) -> float:
    """Fraction of attacker edges covered by the deletions."""
    if len(s_atk) == 0:
        raise EmptyAttackSet("attack set is empty")
    return len(s_atk.intersection(s_san)) / len(s_atk)


@dataclass(frozen=True)
class MetricsReport:
    """Set metrics plus before/after mean accuracy for one sanitation run."""

    esr: float
    f1: float
    cr: float
    r_asb: float
    accuracy_before: float
    accuracy_after: float
    seeds: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("esr", "f1", "cr"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConsistencyError(f"{name}={v} outside [0, 1]")
        dice = 2.0 * self.esr / (1.0 + self.esr)
        if abs(self.f1 - dice) > 1e-12:
            raise ConsistencyError("f1 inconsistent with esr (Jaccard/Dice identity)")

    def as_dict(self) -> dict:
        return {
            "esr": self.esr,
            "f1": self.f1,
            "cr": self.cr,
            "r_asb": self.r_asb,
            "accuracy_before": self.accuracy_before,
            "accuracy_after": self.accuracy_after,
            "seeds": self.seeds,
            "config": self.config,
        }


def evaluate_defense(poisoned: GraphBundle, sanitized: GraphBundle,
                     record: PoisonRecord, seeds: int = 5,
                     train_cfg: Optional[TrainConfig] = None,
                     base_seed: int = 0) -> MetricsReport:
    """Set metrics from the record plus mean test accuracy over seeded runs.

    The deletion set is recovered as the edge difference between the
    poisoned and sanitized graphs; both graphs are trained with the same
    seeded configs so before/after accuracies are directly comparable.
    """
    if seeds < 1:
        raise ConsistencyError("seeds must be >= 1")
    train_cfg = train_cfg or TrainConfig()
    s_atk = record.attack_set()
    s_san = EdgeSet(poisoned.edge_set().edges - sanitized.edge_set().edges)
    acc_before = []
    acc_after = []
    for i in range(seeds):
        cfg = train_cfg.with_seed(base_seed + i)
        for bundle, sink in ((poisoned, acc_before), (sanitized, acc_after)):
            gnn = train_inner(bundle, cfg)
            sink.append(accuracy(predict(gnn.probs), bundle.labels, bundle.split.test))
    return MetricsReport(
        esr=esr(s_atk, s_san),
        f1=f1(s_atk, s_san),
        cr=cr(s_atk, s_san),
        r_asb=len(s_san) / max(poisoned.num_edges(), 1),
        accuracy_before=sum(acc_before) / seeds,
        accuracy_after=sum(acc_after) / seeds,
        seeds=seeds,
        config={"train": {"epochs": cfg.epochs, "learning_rate": cfg.learning_rate,
                          "weight_decay": cfg.weight_decay, "init_scale": cfg.init_scale},
                "base_seed": base_seed},
    )
