"""Unsupervised victim-node detectors.

Two detectors score nodes for attack exposure. The class-divergence detector
builds per-node divergence features from tempered class probabilities, fits a
small mixture-density network and thresholds its energy with a momentum
quantile. The link-prediction detector scores every node pair with an
inner-product decoder trained by reweighted cross-entropy and flags nodes
incident to low-probability edges.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .bundle import GraphBundle, pca_reduce
from .errors import (
    ConsistencyError,
    InvalidTemperature,
    NonFinite,
    SingularCovariance,
)
from .gnn import TrainedGnn, _tensor, row_softmax

__all__ = [
    "HybridFeatures",
    "DgmmModel",
    "ThresholdState",
    "LinkPredModel",
    "GmeanThreshold",
    "DetectorOutput",
    "soft_class_prob",
    "pairwise_kl",
    "proximity_metrics",
    "js_divergence",
    "build_hybrid_features",
    "dgmm_train",
    "dgmm_energy",
    "threshold_init",
    "adaptive_threshold",
    "classdiv_detect",
    "reweight_gamma",
    "linkpred_train",
    "linkpred_scores",
    "gmean_threshold",
    "linkpred_detect",
]

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DetectorOutput:
    """Per-node scores plus the victim/normal partition they induce."""

    scores: np.ndarray
    victims: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        n = self.scores.shape[0]
        victims = np.unique(np.asarray(self.victims, dtype=np.int64))
        normals = np.unique(np.asarray(self.normals, dtype=np.int64))
        object.__setattr__(self, "victims", victims)
        object.__setattr__(self, "normals", normals)
        if np.intersect1d(victims, normals).size:
            raise ConsistencyError("victim and normal sets must be disjoint")
        if victims.size + normals.size != n:
            raise ConsistencyError("victim and normal sets must partition the nodes")


# ---------------------------------------------------------------------------
# Divergence features


def soft_class_prob(Z: np.ndarray, T: float) -> np.ndarray:
    """Temperature softmax over logits rows: softmax(Z / T)."""
    if T <= 0:
        raise InvalidTemperature(f"temperature must be positive, got {T}")
    return row_softmax(np.asarray(Z, dtype=np.float64) / T)


def pairwise_kl(S: np.ndarray) -> np.ndarray:
    """All-pairs KL divergence between distribution rows.

    Entry (i, j) is sum_c S[i,c] * ln(S[i,c] / S[j,c]); the matrix form is a
    single matmul against log-probabilities, with the diagonal pinned to 0.
    """
    S = np.asarray(S, dtype=np.float64)
    logP = np.log(np.clip(S, PROB_FLOOR, None))
    row_ent = (S * logP).sum(axis=1)
    M = row_ent[:, None] - S @ logP.T
    np.fill_diagonal(M, 0.0)
    return M


def proximity_metrics(S: np.ndarray, A: np.ndarray,
                      D: Optional[np.ndarray] = None):
    """Per-node neighborhood divergences (prox1, prox2).

    prox1(i) averages KL(i -> j) over neighbors j. prox2(i) averages the
    pairwise KL over ordered neighbor pairs (j, k) of i. Nodes with degree 0
    (resp. < 2) get 0, where the averaging denominators degenerate.
    """
    A = np.asarray(A, dtype=np.float64)
    K = pairwise_kl(S)
    deg = A.sum(axis=1) if D is None else np.asarray(D, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        prox1 = np.where(deg > 0, (K * A).sum(axis=1) / np.where(deg > 0, deg, 1.0), 0.0)
        pair_count = deg * (deg - 1.0)
        prox2_raw = (A * (A @ K)).sum(axis=1)
        prox2 = np.where(deg >= 2, prox2_raw / np.where(pair_count > 0, pair_count, 1.0), 0.0)
    return prox1, prox2


def js_divergence(S: np.ndarray, A: np.ndarray,
                  D: Optional[np.ndarray] = None) -> np.ndarray:
    """Mean Jensen-Shannon divergence between each node and its neighbors.

    Computed edge-wise (only neighbor pairs are ever averaged), so cost is
    O(|E| * C). Isolated nodes get 0; values lie in [0, ln 2].
    """
    S = np.asarray(S, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    deg = A.sum(axis=1) if D is None else np.asarray(D, dtype=np.float64)
    iu, iv = np.triu_indices(n, k=1)
    mask = A[iu, iv] > 0
    u, v = iu[mask], iv[mask]
    out = np.zeros(n)
    if u.size == 0:
        return out
    P, Q = S[u], S[v]
    Mid = (P + Q) / 2.0
    logM = np.log(np.clip(Mid, PROB_FLOOR, None))
    kl_pm = (P * (np.log(np.clip(P, PROB_FLOOR, None)) - logM)).sum(axis=1)
    kl_qm = (Q * (np.log(np.clip(Q, PROB_FLOOR, None)) - logM)).sum(axis=1)
    js = 0.5 * (kl_pm + kl_qm)
    np.add.at(out, u, js)
    np.add.at(out, v, js)
    return np.where(deg > 0, out / np.where(deg > 0, deg, 1.0), 0.0)


@dataclass(frozen=True)
class HybridFeatures:
    """Stacked per-node divergence columns fed to the mixture model.

    Six columns when the graph has attributes (attribute-derived prox1,
    prox2, JS followed by the class-probability-derived triple), otherwise
    only the class-probability triple.
    """

    matrix: np.ndarray
    columns: tuple

    def __post_init__(self):
        if not np.all(np.isfinite(self.matrix)):
            raise ConsistencyError("hybrid features must be finite")
        if np.any(self.matrix < -1e-9):
            raise ConsistencyError("divergence features must be nonnegative")


def build_hybrid_features(bundle: GraphBundle, gnn: TrainedGnn, T: float,
                          pca_soft: Optional[np.ndarray] = None) -> HybridFeatures:
    """Divergence feature matrix for the current graph and trained model.

    pca_soft is the tempered softmax of the attribute PCA scores; it only
    depends on the immutable features, so callers running many steps compute
    it once and pass it in.
    """
    A = bundle.adjacency
    s_temp = soft_class_prob(gnn.logits, T)
    p1_s, p2_s = proximity_metrics(s_temp, A)
    d_s = js_divergence(s_temp, A)
    if bundle.features is None:
        M = np.column_stack([p1_s, p2_s, d_s])
        return HybridFeatures(M, ("prox1_prob", "prox2_prob", "js_prob"))
    if pca_soft is None:
        pca_soft = soft_class_prob(pca_reduce(bundle.features, bundle.num_classes), T)
    p1_x, p2_x = proximity_metrics(pca_soft, A)
    d_x = js_divergence(pca_soft, A)
    M = np.column_stack([p1_x, p2_x, d_x, p1_s, p2_s, d_s])
    return HybridFeatures(
        M,
        ("prox1_attr", "prox2_attr", "js_attr", "prox1_prob", "prox2_prob", "js_prob"),
    )


# ---------------------------------------------------------------------------
# Mixture-density energy model


@dataclass(frozen=True)
class DgmmModel:
    """Membership network weights plus frozen mixture statistics."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    K: int
    phi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    temperature: Optional[float] = None
    reg_eps: float = 1e-6

    def __post_init__(self):
        if abs(float(self.phi.sum()) - 1.0) > 1e-9:
            raise ConsistencyError("mixture weights must sum to 1")
        for k in range(self.K):
            reg = self.sigma[k] + self.reg_eps * np.eye(self.sigma.shape[1])
            try:
                np.linalg.cholesky(reg)
            except np.linalg.LinAlgError:
                raise SingularCovariance(
                    f"component {k} covariance not positive definite; raise reg_eps"
                )


def _gmm_stats(M_t: torch.Tensor, gamma: torch.Tensor, reg_eps: float):
    denom = gamma.sum(dim=0).clamp_min(PROB_FLOOR)
    phi = gamma.mean(dim=0)
    mu = (gamma.T @ M_t) / denom.unsqueeze(1)
    centered = M_t.unsqueeze(1) - mu.unsqueeze(0)
    sigma = torch.einsum("ik,ikl,ikm->klm", gamma, centered, centered) / denom[:, None, None]
    eye = torch.eye(M_t.shape[1], dtype=M_t.dtype)
    return phi, mu, sigma + reg_eps * eye


def _gmm_energy_t(M_t: torch.Tensor, phi: torch.Tensor, mu: torch.Tensor,
                  sigma: torch.Tensor) -> torch.Tensor:
    F = M_t.shape[1]
    try:
        L = torch.linalg.cholesky(sigma)
    except torch.linalg.LinAlgError as e:
        raise SingularCovariance(str(e)) from e
    centered = (M_t.unsqueeze(1) - mu.unsqueeze(0)).permute(1, 2, 0)
    sol = torch.linalg.solve_triangular(L, centered, upper=False)
    maha = sol.pow(2).sum(dim=1)
    logdet = 2.0 * torch.log(torch.diagonal(L, dim1=1, dim2=2)).sum(dim=1)
    log_comp = (torch.log(phi.clamp_min(PROB_FLOOR)).unsqueeze(1)
                - 0.5 * maha
                - 0.5 * (F * np.log(2.0 * np.pi) + logdet).unsqueeze(1))
    return -torch.logsumexp(log_comp, dim=0)


def dgmm_train(M: np.ndarray, K: int, epochs: int = 200, lr: float = 1e-3,
               seed: int = 0, hidden: int = 10, reg_eps: float = 1e-6,
               temperature: Optional[float] = None) -> DgmmModel:
    """Fit the membership network by Adam on the mean energy.

    The returned model carries the parameters of the best epoch seen, so its
    mean energy never exceeds the value at initialization.
    """
    if K < 1:
        raise ConsistencyError("K must be >= 1")
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise ConsistencyError("feature matrix must be finite")
    M_t = _tensor(M)
    gen = torch.Generator().manual_seed(seed)
    F = M.shape[1]
    w1 = (torch.randn(F, hidden, generator=gen, dtype=torch.float64) / np.sqrt(F)).requires_grad_(True)
    b1 = torch.zeros(hidden, dtype=torch.float64, requires_grad=True)
    w2 = (torch.randn(hidden, K, generator=gen, dtype=torch.float64) / np.sqrt(hidden)).requires_grad_(True)
    b2 = torch.zeros(K, dtype=torch.float64, requires_grad=True)
    params = [w1, b1, w2, b2]
    opt = torch.optim.Adam(params, lr=lr)

    def membership():
        return torch.softmax(torch.relu(M_t @ w1 + b1) @ w2 + b2, dim=1)

    best = None
    for epoch in range(epochs + 1):
        gamma = membership()
        phi, mu, sigma = _gmm_stats(M_t, gamma, reg_eps)
        energy = _gmm_energy_t(M_t, phi, mu, sigma)
        loss = energy.mean()
        if not torch.isfinite(loss):
            raise NonFinite(f"mixture energy non-finite at epoch {epoch}")
        if best is None or loss.item() < best[0]:
            best = (
                loss.item(),
                [p.detach().numpy().copy() for p in params],
                phi.detach().numpy().copy(),
                mu.detach().numpy().copy(),
                sigma.detach().numpy().copy() - reg_eps * np.eye(F),
            )
        if epoch == epochs:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()

    _, (w1_n, b1_n, w2_n, b2_n), phi_n, mu_n, sigma_n = best
    return DgmmModel(w1=w1_n, b1=b1_n, w2=w2_n, b2=b2_n, K=K,
                     phi=phi_n, mu=mu_n, sigma=sigma_n,
                     temperature=temperature, reg_eps=reg_eps)


def dgmm_energy(model: DgmmModel, M: np.ndarray) -> np.ndarray:
    """Per-row mixture energies under the model's frozen statistics."""
    M = np.asarray(M, dtype=np.float64)
    F = M.shape[1]
    sigma = model.sigma + model.reg_eps * np.eye(F)
    log_comp = np.empty((model.K, M.shape[0]))
    for k in range(model.K):
        try:
            L = np.linalg.cholesky(sigma[k])
        except np.linalg.LinAlgError as e:
            raise SingularCovariance(str(e)) from e
        centered = (M - model.mu[k]).T
        sol = np.linalg.solve(L, centered)
        maha = (sol ** 2).sum(axis=0)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        log_comp[k] = (np.log(max(model.phi[k], PROB_FLOOR))
                       - 0.5 * maha - 0.5 * (F * np.log(2.0 * np.pi) + logdet))
    top = log_comp.max(axis=0)
    return -(top + np.log(np.exp(log_comp - top).sum(axis=0)))


@dataclass(frozen=True)
class ThresholdState:
    """Momentum-averaged quantile threshold for the energy scores."""

    kappa: float
    beta: float
    tau: float
    step: int = 0

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise ConsistencyError("tau must lie in (0, 1)")
        if not (0.0 <= self.beta <= 1.0):
            raise ConsistencyError("beta must lie in [0, 1]")


def threshold_init(energies: np.ndarray, beta: float, tau: float) -> ThresholdState:
    return ThresholdState(kappa=float(np.quantile(energies, tau)), beta=beta, tau=tau, step=0)


def adaptive_threshold(state: ThresholdState, energies: np.ndarray) -> ThresholdState:
    """One momentum update: kappa_t = beta * alpha_t + (1 - beta) * kappa_{t-1}."""
    alpha = float(np.quantile(energies, state.tau))
    kappa = state.beta * alpha + (1.0 - state.beta) * state.kappa
    return ThresholdState(kappa=kappa, beta=state.beta, tau=state.tau, step=state.step + 1)


def classdiv_detect(model: DgmmModel, M: np.ndarray, state: ThresholdState) -> DetectorOutput:
    """Victims are the nodes whose energy strictly exceeds the threshold."""
    energies = dgmm_energy(model, M)
    victims = np.flatnonzero(energies > state.kappa)
    normals = np.flatnonzero(energies <= state.kappa)
    return DetectorOutput(scores=energies, victims=victims, normals=normals)


# ---------------------------------------------------------------------------
# Link scorer


@dataclass(frozen=True)
class LinkPredModel:
    """Two-layer link scorer with inner-product head and tuned threshold."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    gamma: float
    tau_lp: float
    degenerate: bool = False

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConsistencyError("gamma must be positive")
        if not (0.0 < self.tau_lp < 1.0):
            raise ConsistencyError("tau_lp must lie in (0, 1)")


@dataclass(frozen=True)
class GmeanThreshold:
    tau: float
    gmean: float
    degenerate: bool


def reweight_gamma(n: int, edge_entries: int) -> float:
    """Positive-class weight (n^2 - |E|) / |E| with |E| the 1-entries of A."""
    if edge_entries <= 0:
        raise ConsistencyError("graph has no edges")
    if edge_entries >= n * n:
        raise ConsistencyError("edge count must be below n^2")
    return (n * n - edge_entries) / edge_entries


def _edge_and_nonedge_scores(H3: np.ndarray, A: np.ndarray,
                             max_factor: int = 10, seed: int = 0):
    n = A.shape[0]
    iu, iv = np.triu_indices(n, k=1)
    is_edge = A[iu, iv] > 0
    edge_scores = H3[iu[is_edge], iv[is_edge]]
    non_u, non_v = iu[~is_edge], iv[~is_edge]
    cap = max_factor * max(edge_scores.size, 1)
    if non_u.size > cap:
        rng = np.random.default_rng(seed)
        pick = rng.choice(non_u.size, size=cap, replace=False)
        pick.sort()
        non_u, non_v = non_u[pick], non_v[pick]
    nonedge_scores = H3[non_u, non_v]
    return edge_scores, nonedge_scores


def gmean_threshold(H3: np.ndarray, A: np.ndarray, max_factor: int = 10,
                    seed: int = 0) -> GmeanThreshold:
    """Decision threshold maximizing sqrt(TPR * TNR) over the score grid.

    Candidates are the unique observed scores (edges plus up to
    max_factor * |E| sampled non-edges). The returned threshold is the
    midpoint between the best candidate and its predecessor, which realizes
    the same confusion counts while sitting inside the optimal interval.
    """
    edge_scores, nonedge_scores = _edge_and_nonedge_scores(H3, A, max_factor, seed)
    if edge_scores.size == 0:
        raise ConsistencyError("graph has no edges to threshold")
    candidates = np.unique(np.concatenate([edge_scores, nonedge_scores]))
    if candidates.size == 1:
        return GmeanThreshold(tau=float(candidates[0]), gmean=0.0, degenerate=True)
    pos_sorted = np.sort(edge_scores)
    neg_sorted = np.sort(nonedge_scores)
    tp = pos_sorted.size - np.searchsorted(pos_sorted, candidates, side="left")
    tn = np.searchsorted(neg_sorted, candidates, side="left")
    tpr = tp / pos_sorted.size
    tnr = tn / max(neg_sorted.size, 1)
    gmeans = np.sqrt(tpr * tnr)
    best = int(np.argmax(gmeans))
    if best == 0:
        tau = float(candidates[0])
    else:
        tau = float((candidates[best - 1] + candidates[best]) / 2.0)
    return GmeanThreshold(tau=tau, gmean=float(gmeans[best]), degenerate=False)


def _linkpred_forward(feats_t, w1, b1, w2, b2):
    H1 = torch.relu(feats_t @ w1 + b1)
    H2 = H1 @ w2 + b2
    return H2 @ H2.T


def linkpred_train(A: np.ndarray, feats: np.ndarray, epochs: int = 200,
                   lr: float = 0.01, seed: int = 0, hidden: int = 16,
                   embed: int = 16, max_factor: int = 10) -> LinkPredModel:
    """Train the scorer with reweighted dense cross-entropy, then tune tau.

    The positive (edge) term is weighted by gamma = (n^2 - |E|)/|E| to offset
    class imbalance; the loss runs over every ordered pair, which is fine at
    the graph sizes this targets.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    edge_entries = int(A.sum())
    gamma = reweight_gamma(n, edge_entries)
    feats_t = _tensor(np.asarray(feats, dtype=np.float64))
    A_t = _tensor(A)
    gen = torch.Generator().manual_seed(seed)
    din = feats.shape[1]
    w1 = (torch.randn(din, hidden, generator=gen, dtype=torch.float64) / np.sqrt(din)).requires_grad_(True)
    b1 = torch.zeros(hidden, dtype=torch.float64, requires_grad=True)
    w2 = (torch.randn(hidden, embed, generator=gen, dtype=torch.float64) / np.sqrt(hidden)).requires_grad_(True)
    b2 = torch.zeros(embed, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([w1, b1, w2, b2], lr=lr)
    softplus = torch.nn.functional.softplus
    for epoch in range(epochs):
        opt.zero_grad()
        logits = _linkpred_forward(feats_t, w1, b1, w2, b2)
        loss = (gamma * (A_t * softplus(-logits)).sum()
                + ((1.0 - A_t) * softplus(logits)).sum()) / (n * n)
        if not torch.isfinite(loss):
            raise NonFinite(f"link scorer loss non-finite at epoch {epoch}")
        loss.backward()
        opt.step()
    model_wo_tau = [p.detach().numpy().copy() for p in (w1, b1, w2, b2)]
    with torch.no_grad():
        H3 = torch.sigmoid(_linkpred_forward(feats_t, w1, b1, w2, b2)).numpy()
    thr = gmean_threshold(H3, A, max_factor=max_factor, seed=seed)
    return LinkPredModel(*model_wo_tau, gamma=gamma, tau_lp=thr.tau,
                         degenerate=thr.degenerate)


def linkpred_scores(model: LinkPredModel, feats: np.ndarray) -> np.ndarray:
    """Dense pairwise link probabilities H3 = sigmoid(H2 H2^T)."""
    H1 = np.maximum(np.asarray(feats, dtype=np.float64) @ model.w1 + model.b1, 0.0)
    H2 = H1 @ model.w2 + model.b2
    logits = H2 @ H2.T
    return 1.0 / (1.0 + np.exp(-logits))


def linkpred_detect(model: LinkPredModel, A: np.ndarray, feats: Optional[np.ndarray],
                    universal: bool = False,
                    H3: Optional[np.ndarray] = None) -> DetectorOutput:
    """Flag nodes incident to suspicious (low-probability) edges.

    By default a node is a victim if ANY incident edge scores below tau_lp;
    with universal=True a node is a victim only if every incident edge does.
    Per-node scores are the minimum incident edge score (1.0 when isolated).
    Pass H3 to reuse an already-computed score matrix.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    if H3 is None:
        H3 = linkpred_scores(model, feats)
    deg = A.sum(axis=1)
    masked = np.where(A > 0, H3, np.inf)
    min_score = np.where(deg > 0, masked.min(axis=1), 1.0)
    suspicious = (A > 0) & (H3 < model.tau_lp)
    if universal:
        victims = np.flatnonzero((deg > 0) & (suspicious.sum(axis=1) == deg))
    else:
        victims = np.flatnonzero(suspicious.any(axis=1))
    normals = np.setdiff1d(np.arange(n), victims)
    return DetectorOutput(scores=min_score, victims=victims, normals=normals)
