"""Edge-pruning sanitizers.

The focused cleaner alternates inner model training, victim detection and
one meta-gradient-guided edge deletion per step, restricting candidates to
edges incident to detected victims and the loss to normal nodes. The
unfocused variant (no detector) is the deletion-only structure-learning
baseline; similarity pruning and one-shot link-score pruning round out the
baselines, and two runs can be ensembled by union/intersection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .bundle import EdgeSet, GraphBundle, apply_edits, pca_reduce, save_bundle
from .detectors import (
    adaptive_threshold,
    build_hybrid_features,
    classdiv_detect,
    dgmm_energy,
    dgmm_train,
    linkpred_detect,
    linkpred_scores,
    linkpred_train,
    soft_class_prob,
    threshold_init,
)
from .errors import BundleMismatch, ConsistencyError, MissingFeatures
from .gnn import TrainConfig, train_inner
from .metagrad import (
    LambdaPair,
    OuterLossConfig,
    lambda_schedule,
    mask_gradient,
    meta_gradient,
    outer_loss,
    select_edge,
)

__all__ = [
    "SanitizerConfig",
    "StepRecord",
    "SanitationResult",
    "focused_cleaner",
    "gasoline_d",
    "jaccard_prune",
    "linkpred_only",
    "ensemble",
    "run_sanitizer",
    "save_result",
    "save_trace_csv",
    "save_detector_csv",
]

DETECTORS = ("classdiv", "linkpred", "none", "jaccard", "linkpred_only")


@dataclass(frozen=True)
class SanitizerConfig:
    """Everything a sanitation run needs besides the bundle itself."""

    detector: str = "classdiv"
    budget: int = 1
    temperature: float = 2.0
    beta: float = 0.3
    tau: float = 0.6
    eta: float = 1e-4
    train: TrainConfig = TrainConfig()
    meta_mode: str = "first_order"
    unroll_steps: int = 10
    seed: int = 0
    adaptive_lambda: bool = True
    normal_loss_focus: bool = True
    linkpred_universal: bool = False
    dgmm_k: Optional[int] = None
    dgmm_epochs: int = 200
    dgmm_lr: float = 1e-3
    dgmm_hidden: int = 10
    dgmm_reg_eps: float = 1e-6
    lp_epochs: int = 200
    lp_lr: float = 0.01
    lp_hidden: int = 16
    lp_embed: int = 16

    def __post_init__(self):
        if self.detector not in DETECTORS:
            raise ConsistencyError(f"detector must be one of {DETECTORS}")
        if self.budget < 1:
            raise ConsistencyError("budget must be >= 1")
        if self.temperature <= 0:
            raise ConsistencyError("temperature must be positive")
        if not (0.0 <= self.beta <= 1.0):
            raise ConsistencyError("beta must lie in [0, 1]")
        if not (0.0 < self.tau < 1.0):
            raise ConsistencyError("tau must lie in (0, 1)")
        if self.eta < 0:
            raise ConsistencyError("eta must be >= 0")


@dataclass(frozen=True)
class StepRecord:
    """One sanitation step: what was deleted, under which focus, and why."""

    step: int
    edge: Optional[tuple]
    gradient: float
    lambda_val: float
    num_victims: int
    outer_loss: float
    victims: tuple = ()
    flags: tuple = ()
    scores: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SanitationResult:
    """Ordered deletions, per-step trace, and the resulting bundle."""

    deleted: tuple
    trace: tuple
    sanitized: GraphBundle

    def __post_init__(self):
        if len(set(self.deleted)) != len(self.deleted):
            raise ConsistencyError("deleted edges must be distinct")
        for u, v in self.deleted:
            if self.sanitized.adjacency[u, v] != 0:
                raise ConsistencyError(f"deleted edge ({u},{v}) still present")

    def deleted_set(self) -> EdgeSet:
        return EdgeSet.from_pairs(self.deleted)

    def input_adjacency(self) -> np.ndarray:
        """Reconstruct the pre-sanitation adjacency (deletion-only)."""
        return apply_edits(self.sanitized.adjacency, EdgeSet.empty(), self.deleted_set())


def _victim_incident_edges(edge_arr: np.ndarray, victims: np.ndarray) -> np.ndarray:
    vic = np.zeros(0, dtype=bool)
    if edge_arr.size == 0:
        return edge_arr
    n_max = int(edge_arr.max()) + 1
    vic = np.zeros(n_max, dtype=bool)
    vic[victims[victims < n_max]] = True
    keep = vic[edge_arr[:, 0]] | vic[edge_arr[:, 1]]
    return edge_arr[keep]


def _loop(bundle: GraphBundle, cfg: SanitizerConfig, detector_kind: str,
          detect_override=None) -> SanitationResult:
    n = bundle.n
    all_nodes = np.arange(n)
    A = bundle.adjacency.copy()
    eta = cfg.eta if bundle.features is not None else 0.0

    pca_soft = None
    if bundle.features is not None and detector_kind in ("classdiv", "linkpred"):
        pca_soft = soft_class_prob(
            pca_reduce(bundle.features, bundle.num_classes), cfg.temperature)

    threshold = {}

    def detect(cur, gnn):
        if detector_kind == "classdiv":
            feats = build_hybrid_features(cur, gnn, cfg.temperature, pca_soft=pca_soft)
            k = cfg.dgmm_k if cfg.dgmm_k is not None else cur.num_classes
            model = dgmm_train(feats.matrix, K=k, epochs=cfg.dgmm_epochs,
                               lr=cfg.dgmm_lr, seed=cfg.seed, hidden=cfg.dgmm_hidden,
                               reg_eps=cfg.dgmm_reg_eps, temperature=cfg.temperature)
            energies = dgmm_energy(model, feats.matrix)
            if "state" not in threshold:
                threshold["state"] = threshold_init(energies, cfg.beta, cfg.tau)
            else:
                threshold["state"] = adaptive_threshold(threshold["state"], energies)
            return classdiv_detect(model, feats.matrix, threshold["state"])
        feats_in = gnn.logits if pca_soft is None else np.concatenate(
            [gnn.logits, pca_soft], axis=1)
        model = linkpred_train(cur.adjacency, feats_in, epochs=cfg.lp_epochs,
                               lr=cfg.lp_lr, seed=cfg.seed, hidden=cfg.lp_hidden,
                               embed=cfg.lp_embed)
        return linkpred_detect(model, cur.adjacency, feats_in,
                               universal=cfg.linkpred_universal)

    deleted = []
    trace = []
    for t in range(cfg.budget):
        cur = bundle.with_adjacency(A)
        gnn = train_inner(cur, cfg.train)
        flags = []
        if detector_kind == "none":
            victims = np.empty(0, dtype=np.int64)
            normals = all_nodes
            det_scores = None
        else:
            out = detect_override(cur, gnn, t) if detect_override else detect(cur, gnn)
            victims, normals, det_scores = out.victims, out.normals, out.scores

        edge_arr = cur.edge_array()
        if detector_kind == "none":
            cand_arr = edge_arr
            mask_nodes = None
        elif victims.size == 0:
            flags.append("no_victims_fallback")
            cand_arr = edge_arr
            mask_nodes = None
        else:
            cand_arr = _victim_incident_edges(edge_arr, victims)
            mask_nodes = normals

        lam = lambda_schedule(t, cfg.budget) if cfg.adaptive_lambda else LambdaPair(1.0, 0.0)

        loss_focus = all_nodes
        if cfg.normal_loss_focus and detector_kind != "none" and victims.size > 0:
            val_left = np.intersect1d(cur.split.val, normals).size
            test_left = np.intersect1d(cur.split.test, normals).size
            if val_left or test_left:
                loss_focus = normals
            else:
                flags.append("loss_fallback")

        loss_cfg = OuterLossConfig(eta=eta, budget=cfg.budget, mode=cfg.meta_mode,
                                   unroll_steps=cfg.unroll_steps)
        G = meta_gradient(cur, gnn, loss_cfg, lam, loss_focus, train_cfg=cfg.train)
        if mask_nodes is not None:
            G = mask_gradient(G, mask_nodes)
        loss_val = outer_loss(gnn, cur, loss_focus, lam, eta)

        pick = select_edge(G, EdgeSet.from_pairs(map(tuple, cand_arr.tolist())))
        if pick is None:
            trace.append(StepRecord(step=t, edge=None, gradient=float("nan"),
                                    lambda_val=lam.lambda_val,
                                    num_victims=int(victims.size),
                                    outer_loss=loss_val, victims=tuple(victims.tolist()),
                                    flags=tuple(flags) + ("early_stop",),
                                    scores=det_scores))
            break
        u, v = pick
        trace.append(StepRecord(step=t, edge=pick, gradient=float(G[u, v]),
                                lambda_val=lam.lambda_val,
                                num_victims=int(victims.size),
                                outer_loss=loss_val, victims=tuple(victims.tolist()),
                                flags=tuple(flags), scores=det_scores))
        A[u, v] = A[v, u] = 0.0
        deleted.append(pick)

    return SanitationResult(tuple(deleted), tuple(trace), bundle.with_adjacency(A))


def focused_cleaner(bundle: GraphBundle, cfg: SanitizerConfig,
                    detect_override=None) -> SanitationResult:
    """Victim-focused bi-level pruning loop (classdiv or linkpred detector).

    detect_override replaces the built-in detector with
    fn(bundle, gnn, step) -> DetectorOutput, which is how ground-truth
    (oracle) detectors are injected in calibration runs.
    """
    if cfg.detector not in ("classdiv", "linkpred"):
        raise ConsistencyError("focused_cleaner needs detector 'classdiv' or 'linkpred'")
    return _loop(bundle, cfg, cfg.detector, detect_override=detect_override)


def gasoline_d(bundle: GraphBundle, cfg: SanitizerConfig) -> SanitationResult:
    """Deletion-only structure learning without a detector (all edges eligible)."""
    return _loop(bundle, cfg, "none")


def _edge_jaccard(bundle: GraphBundle, edge_arr: np.ndarray) -> np.ndarray:
    X = bundle.features
    binary = np.all(np.isin(np.unique(X), (0.0, 1.0)))
    if not binary:
        X = np.clip(X, 0.0, None)
    sims = np.empty(edge_arr.shape[0])
    chunk = 2048
    for start in range(0, edge_arr.shape[0], chunk):
        part = edge_arr[start:start + chunk]
        Xu, Xv = X[part[:, 0]], X[part[:, 1]]
        inter = np.minimum(Xu, Xv).sum(axis=1)
        union = np.maximum(Xu, Xv).sum(axis=1)
        sims[start:start + chunk] = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 1.0)
    return sims


def jaccard_prune(bundle: GraphBundle, threshold: Optional[float] = None,
                  budget: Optional[int] = None) -> SanitationResult:
    """Delete edges whose endpoint features have low Jaccard similarity.

    Binary features use set Jaccard; real features use the min/max
    generalization on values clipped to be nonnegative. With a budget, the
    threshold is effectively auto-tuned by deleting exactly the budget
    lowest-similarity edges.
    """
    if bundle.features is None:
        raise MissingFeatures("similarity pruning requires node features")
    if (threshold is None) == (budget is None):
        raise ConsistencyError("give exactly one of threshold or budget")
    edge_arr = bundle.edge_array()
    sims = _edge_jaccard(bundle, edge_arr)
    order = np.lexsort((edge_arr[:, 1], edge_arr[:, 0], sims))
    if budget is not None:
        take = order[:min(budget, order.size)]
    else:
        take = order[sims[order] < threshold]
    deleted = [tuple(edge_arr[i].tolist()) for i in take]
    A = apply_edits(bundle.adjacency, EdgeSet.from_pairs(deleted), EdgeSet.empty())
    trace = tuple(
        StepRecord(step=i, edge=deleted[i], gradient=float(sims[take[i]]),
                   lambda_val=float("nan"), num_victims=0, outer_loss=float("nan"),
                   flags=("jaccard",))
        for i in range(len(deleted))
    )
    return SanitationResult(tuple(deleted), trace, bundle.with_adjacency(A))


def linkpred_only(bundle: GraphBundle, budget: int,
                  cfg: Optional[SanitizerConfig] = None) -> SanitationResult:
    """One-shot pruning: train the link scorer once, drop the lowest edges."""
    cfg = cfg or SanitizerConfig(detector="linkpred_only", budget=max(budget, 1))
    gnn = train_inner(bundle, cfg.train)
    pca_soft = None
    if bundle.features is not None:
        pca_soft = soft_class_prob(
            pca_reduce(bundle.features, bundle.num_classes), cfg.temperature)
    feats_in = gnn.logits if pca_soft is None else np.concatenate(
        [gnn.logits, pca_soft], axis=1)
    model = linkpred_train(bundle.adjacency, feats_in, epochs=cfg.lp_epochs,
                           lr=cfg.lp_lr, seed=cfg.seed, hidden=cfg.lp_hidden,
                           embed=cfg.lp_embed)
    H3 = linkpred_scores(model, feats_in)
    edge_arr = bundle.edge_array()
    scores = H3[edge_arr[:, 0], edge_arr[:, 1]]
    order = np.lexsort((edge_arr[:, 1], edge_arr[:, 0], scores))
    take = order[:min(budget, order.size)]
    deleted = [tuple(edge_arr[i].tolist()) for i in take]
    A = apply_edits(bundle.adjacency, EdgeSet.from_pairs(deleted), EdgeSet.empty())
    trace = tuple(
        StepRecord(step=i, edge=deleted[i], gradient=float(scores[take[i]]),
                   lambda_val=float("nan"), num_victims=0, outer_loss=float("nan"),
                   flags=("linkpred_only",))
        for i in range(len(deleted))
    )
    return SanitationResult(tuple(deleted), trace, bundle.with_adjacency(A))


def ensemble(result_a: SanitationResult, result_b: SanitationResult,
             mode: str) -> SanitationResult:
    """Combine two runs over the same input by union/intersection of deletions."""
    if mode not in ("union", "intersection"):
        raise ConsistencyError("mode must be 'union' or 'intersection'")
    in_a = result_a.input_adjacency()
    in_b = result_b.input_adjacency()
    if in_a.shape != in_b.shape or not np.array_equal(in_a, in_b):
        raise BundleMismatch("results come from different poisoned graphs")
    set_a, set_b = result_a.deleted_set(), result_b.deleted_set()
    combined = set_a.union(set_b) if mode == "union" else set_a.intersection(set_b)
    A = apply_edits(in_a, combined, EdgeSet.empty())
    base = result_a.sanitized
    sanitized = GraphBundle(A, base.features, base.labels, base.num_classes, base.split)
    deleted = tuple(combined.sorted_pairs())
    trace = tuple(
        StepRecord(step=i, edge=deleted[i], gradient=float("nan"),
                   lambda_val=float("nan"), num_victims=0, outer_loss=float("nan"),
                   flags=(f"ensemble_{mode}",))
        for i in range(len(deleted))
    )
    return SanitationResult(deleted, trace, sanitized)


def run_sanitizer(bundle: GraphBundle, cfg: SanitizerConfig) -> SanitationResult:
    """Dispatch on cfg.detector; the single entry point used by the CLI."""
    if cfg.detector in ("classdiv", "linkpred"):
        return focused_cleaner(bundle, cfg)
    if cfg.detector == "none":
        return gasoline_d(bundle, cfg)
    if cfg.detector == "jaccard":
        return jaccard_prune(bundle, budget=cfg.budget)
    return linkpred_only(bundle, cfg.budget, cfg)


# ---------------------------------------------------------------------------
# Serialization


def _record_payload(rec: StepRecord) -> dict:
    return {
        "step": rec.step,
        "edge": list(rec.edge) if rec.edge is not None else None,
        "gradient": rec.gradient,
        "lambda_val": rec.lambda_val,
        "num_victims": rec.num_victims,
        "outer_loss": rec.outer_loss,
        "victims": list(rec.victims),
        "flags": list(rec.flags),
    }


def save_result(result: SanitationResult, out_dir, extra_meta: Optional[dict] = None) -> None:
    """Write the sanitized bundle plus result.json into out_dir."""
    out_dir = Path(out_dir)
    save_bundle(result.sanitized, out_dir)
    payload = {
        "deleted": [list(e) for e in result.deleted],
        "trace": [_record_payload(r) for r in result.trace],
    }
    if extra_meta:
        payload["meta"] = extra_meta
    (out_dir / "result.json").write_text(
        json.dumps(payload, sort_keys=True, separators=(",", ": "), indent=2) + "\n")


def save_trace_csv(result: SanitationResult, path) -> None:
    """Per-step trace: step, edge, gradient, lambda weight, victim count, loss."""
    lines = ["step,u,v,gradient,lambda_val,num_victims,outer_loss,flags"]
    for rec in result.trace:
        u, v = rec.edge if rec.edge is not None else ("", "")
        lines.append(
            f"{rec.step},{u},{v},{rec.gradient!r},{rec.lambda_val!r},"
            f"{rec.num_victims},{rec.outer_loss!r},{'|'.join(rec.flags)}")
    Path(path).write_text("".join(line + "\n" for line in lines))


def save_detector_csv(result: SanitationResult, path) -> None:
    """Per-node detector diagnostics: node, score, is_victim, step."""
    lines = ["node,score,is_victim,step"]
    for rec in result.trace:
        if rec.scores is None:
            continue
        vic = set(rec.victims)
        for node, score in enumerate(rec.scores):
            lines.append(f"{node},{float(score)!r},{int(node in vic)},{rec.step}")
    Path(path).write_text("".join(line + "\n" for line in lines))
