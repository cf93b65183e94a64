import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from graphsan import (
    TrainConfig,
    pca_reduce,
    plant_cross_edges,
    sbm_bundle,
    soft_class_prob,
    train_inner,
)
from graphsan.detectors import (
    DetectorOutput,
    DgmmModel,
    LinkPredModel,
    ThresholdState,
    _gmm_stats,
    adaptive_threshold,
    build_hybrid_features,
    classdiv_detect,
    dgmm_energy,
    dgmm_train,
    gmean_threshold,
    js_divergence,
    linkpred_detect,
    linkpred_scores,
    linkpred_train,
    pairwise_kl,
    proximity_metrics,
    reweight_gamma,
    threshold_init,
)
from graphsan.errors import ConsistencyError, InvalidTemperature

from conftest import random_bundle


def random_stochastic(n, C, seed):
    rng = np.random.default_rng(seed)
    S = rng.random((n, C)) + 1e-3
    return S / S.sum(axis=1, keepdims=True)


def kl_loop(S):
    n, C = S.shape
    P = np.clip(S, 1e-12, None)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            out[i, j] = sum(S[i, c] * (np.log(P[i, c]) - np.log(P[j, c])) for c in range(C))
    return out


def prox_loops(S, A):
    n = A.shape[0]
    K = kl_loop(S)
    deg = A.sum(axis=1)
    p1 = np.zeros(n)
    p2 = np.zeros(n)
    for i in range(n):
        if deg[i] > 0:
            p1[i] = sum(A[i, j] * K[i, j] for j in range(n)) / deg[i]
        if deg[i] >= 2:
            total = sum(A[i, j] * A[i, k] * K[j, k] for j in range(n) for k in range(n))
            p2[i] = total / (deg[i] * (deg[i] - 1))
    return p1, p2


def js_loop(S, A):
    n = A.shape[0]
    deg = A.sum(axis=1)
    out = np.zeros(n)
    for i in range(n):
        if deg[i] == 0:
            continue
        acc = 0.0
        for j in range(n):
            if A[i, j] == 0:
                continue
            m = (S[i] + S[j]) / 2
            kl1 = sum(S[i, c] * (np.log(max(S[i, c], 1e-12)) - np.log(max(m[c], 1e-12)))
                      for c in range(S.shape[1]))
            kl2 = sum(S[j, c] * (np.log(max(S[j, c], 1e-12)) - np.log(max(m[c], 1e-12)))
                      for c in range(S.shape[1]))
            acc += 0.5 * (kl1 + kl2)
        out[i] = acc / deg[i]
    return out


class TestSoftClassProb:
    def test_huge_temperature_is_uniform(self):
        rng = np.random.default_rng(0)
        Z = rng.standard_normal((5, 4))
        S = soft_class_prob(Z, 1e6)
        assert np.max(np.abs(S - 0.25)) < 1e-4

    def test_unit_temperature_is_plain_softmax(self):
        Z = np.array([[1.0, 2.0, 3.0]])
        S = soft_class_prob(Z, 1.0)
        e = np.exp([1.0, 2.0, 3.0])
        assert np.allclose(S[0], e / e.sum())

    def test_hand_computed_value(self):
        S = soft_class_prob(np.array([[2.0, 0.0]]), 2.0)
        expect = np.exp(1.0) / (np.exp(1.0) + 1.0)
        assert S[0, 0] == pytest.approx(expect, abs=1e-10)
        assert S[0, 0] == pytest.approx(0.7311, abs=1e-4)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(InvalidTemperature):
            soft_class_prob(np.zeros((2, 2)), 0.0)


class TestPairwiseKl:
    def test_identical_rows_zero(self):
        S = np.tile(np.array([0.2, 0.3, 0.5]), (4, 1))
        assert np.max(np.abs(pairwise_kl(S))) == 0.0

    def test_hand_value(self):
        S = np.array([[0.5, 0.5], [0.9, 0.1]])
        K = pairwise_kl(S)
        expect = 0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(0.5 / 0.1)
        assert K[0, 1] == pytest.approx(expect, abs=1e-12)
        assert K[0, 1] == pytest.approx(0.5108, abs=1e-4)

    def test_matches_loop_oracle(self):
        S = random_stochastic(20, 4, seed=1)
        assert np.max(np.abs(pairwise_kl(S) - kl_loop(S))) < 1e-10

    def test_nonnegative_zero_diagonal(self):
        for seed in range(5):
            S = random_stochastic(12, 3, seed=seed)
            K = pairwise_kl(S)
            assert K.min() >= -1e-9
            assert np.all(np.diag(K) == 0.0)


class TestProximity:
    def test_agreeing_neighborhood_is_zero(self):
        S = np.tile(np.array([0.6, 0.4]), (4, 1))
        A = np.zeros((4, 4))
        A[0, 1] = A[1, 0] = A[0, 2] = A[2, 0] = 1.0
        p1, p2 = proximity_metrics(S, A)
        assert np.allclose(p1, 0.0) and np.allclose(p2, 0.0)

    def test_star_center_two_neighbors(self):
        p = np.array([0.8, 0.2])
        q = np.array([0.3, 0.7])
        S = np.vstack([[0.5, 0.5], p, q])
        A = np.zeros((3, 3))
        A[0, 1] = A[1, 0] = A[0, 2] = A[2, 0] = 1.0
        _, p2 = proximity_metrics(S, A)
        K = kl_loop(S)
        expect = (K[1, 2] + K[2, 1]) / 2.0  # ordered neighbor pairs, averaged
        assert p2[0] == pytest.approx(expect, abs=1e-12)

    def test_matches_loop_oracle(self):
        b = random_bundle(n=15, seed=2, edge_prob=0.4)
        S = random_stochastic(15, 4, seed=3)
        p1, p2 = proximity_metrics(S, b.adjacency)
        l1, l2 = prox_loops(S, b.adjacency)
        assert np.max(np.abs(p1 - l1)) < 1e-10
        assert np.max(np.abs(p2 - l2)) < 1e-10

    def test_degenerate_degrees_are_zero(self):
        S = random_stochastic(3, 2, seed=4)
        A = np.zeros((3, 3))
        A[0, 1] = A[1, 0] = 1.0  # node 2 isolated; nodes 0,1 degree 1
        p1, p2 = proximity_metrics(S, A)
        assert p1[2] == 0.0
        assert p2[0] == p2[1] == p2[2] == 0.0


class TestJsDivergence:
    def test_identical_neighbors_zero(self):
        S = np.tile(np.array([0.5, 0.5]), (3, 1))
        A = np.ones((3, 3)) - np.eye(3)
        assert np.allclose(js_divergence(S, A), 0.0)

    def test_disjoint_support_reaches_ln2(self):
        S = np.array([[1.0, 0.0], [0.0, 1.0]])
        A = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert js_divergence(S, A)[0] == pytest.approx(np.log(2.0), abs=1e-9)

    def test_matches_loop_oracle(self):
        b = random_bundle(n=12, seed=5, edge_prob=0.45)
        S = random_stochastic(12, 3, seed=6)
        assert np.max(np.abs(js_divergence(S, b.adjacency) - js_loop(S, b.adjacency))) < 1e-10

    def test_range(self):
        for seed in range(4):
            b = random_bundle(n=10, seed=seed)
            S = random_stochastic(10, 4, seed=seed)
            js = js_divergence(S, b.adjacency)
            assert js.min() >= 0.0 and js.max() <= np.log(2.0) + 1e-9


class TestHybridFeatures:
    def test_attribute_free_has_three_columns(self):
        b = random_bundle(n=10, seed=1, with_features=False)
        gnn = train_inner(b, TrainConfig(epochs=15))
        feats = build_hybrid_features(b, gnn, 2.0)
        assert feats.matrix.shape == (10, 3)
        assert feats.columns == ("prox1_prob", "prox2_prob", "js_prob")

    def test_with_attributes_has_six_columns(self):
        b = random_bundle(n=10, seed=1)
        gnn = train_inner(b, TrainConfig(epochs=15))
        feats = build_hybrid_features(b, gnn, 2.0)
        assert feats.matrix.shape == (10, 6)

    def test_deterministic(self):
        b = random_bundle(n=10, seed=2)
        gnn = train_inner(b, TrainConfig(epochs=15, seed=3))
        m1 = build_hybrid_features(b, gnn, 2.0).matrix
        m2 = build_hybrid_features(b, gnn, 2.0).matrix
        assert np.array_equal(m1, m2)

    def test_planted_cross_edges_raise_every_column_mean(self):
        b = sbm_bundle(n=80, num_classes=2, p_in=0.25, p_out=0.02, feat_dim=6,
                       class_sep=1.5, seed=3)
        pois, ins = plant_cross_edges(b, 6, seed=9)
        victims = sorted({x for e in ins for x in e})
        normal = np.setdiff1d(np.arange(80), victims)
        gnn = train_inner(pois, TrainConfig(epochs=80))
        M = build_hybrid_features(pois, gnn, 2.0).matrix
        assert np.all(M[victims].mean(axis=0) > M[normal].mean(axis=0))


class TestDgmm:
    def test_k1_closed_form_energy_at_mean(self):
        M = np.arange(6, dtype=float)[None, :]
        model = DgmmModel(w1=np.zeros((6, 1)), b1=np.zeros(1), w2=np.zeros((1, 1)),
                          b2=np.zeros(1), K=1, phi=np.array([1.0]), mu=M.copy(),
                          sigma=np.eye(6)[None], reg_eps=0.0)
        assert dgmm_energy(model, M)[0] == pytest.approx(3 * np.log(2 * np.pi), abs=1e-9)

    def test_duplicating_rows_preserves_mixture_stats(self):
        rng = np.random.default_rng(0)
        M = rng.standard_normal((20, 4))
        gamma = rng.random((20, 3)) + 0.1
        gamma /= gamma.sum(axis=1, keepdims=True)
        M_t, g_t = torch.from_numpy(M), torch.from_numpy(gamma)
        phi1, mu1, s1 = _gmm_stats(M_t, g_t, 1e-6)
        phi2, mu2, s2 = _gmm_stats(torch.cat([M_t, M_t]), torch.cat([g_t, g_t]), 1e-6)
        assert torch.allclose(phi1, phi2, atol=1e-12)
        assert torch.allclose(mu1, mu2, atol=1e-12)
        assert torch.allclose(s1, s2, atol=1e-12)

    def test_planted_outliers_get_top_energies(self):
        rng = np.random.default_rng(0)
        inliers = rng.standard_normal((95, 6))
        outliers = 6.0 * np.sign(rng.standard_normal((5, 6)))
        M = np.vstack([inliers, outliers])
        model = dgmm_train(M, K=1, epochs=100, seed=0)
        E = dgmm_energy(model, M)
        top10 = set(np.argsort(E)[-10:].tolist())
        assert set(range(95, 100)) <= top10

    def test_training_never_ends_above_init_energy(self):
        rng = np.random.default_rng(3)
        M = np.vstack([rng.standard_normal((40, 4)),
                       rng.standard_normal((40, 4)) + 3.0])
        init = dgmm_train(M, K=2, epochs=0, seed=1)
        trained = dgmm_train(M, K=2, epochs=150, seed=1)
        assert dgmm_energy(trained, M).mean() <= dgmm_energy(init, M).mean() + 1e-12

    def test_membership_and_weights_sum_to_one_and_cov_regularized(self):
        rng = np.random.default_rng(4)
        M = rng.standard_normal((30, 5))
        model = dgmm_train(M, K=3, epochs=50, seed=2, reg_eps=1e-6)
        assert model.phi.sum() == pytest.approx(1.0, abs=1e-9)
        for k in range(3):
            evals = np.linalg.eigvalsh(model.sigma[k] + model.reg_eps * np.eye(5))
            assert evals.min() >= model.reg_eps / 2

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(5)
        M = rng.standard_normal((25, 4))
        m1 = dgmm_train(M, K=2, epochs=30, seed=9)
        m2 = dgmm_train(M, K=2, epochs=30, seed=9)
        assert np.array_equal(m1.mu, m2.mu)


class TestAdaptiveThreshold:
    def test_arithmetic_example(self):
        state = ThresholdState(kappa=2.0, beta=0.3, tau=0.6)
        # energies whose 0.6-quantile is exactly 1.0
        new = adaptive_threshold(state, np.ones(10))
        assert new.kappa == pytest.approx(1.7)
        assert new.step == 1

    def test_beta_one_tracks_quantile(self):
        state = ThresholdState(kappa=5.0, beta=1.0, tau=0.5)
        new = adaptive_threshold(state, np.array([1.0, 2.0, 3.0]))
        assert new.kappa == pytest.approx(np.quantile([1.0, 2.0, 3.0], 0.5))

    def test_beta_zero_freezes(self):
        state = ThresholdState(kappa=5.0, beta=0.0, tau=0.5)
        for _ in range(4):
            state = adaptive_threshold(state, np.array([100.0, 200.0]))
        assert state.kappa == 5.0

    @settings(max_examples=50, deadline=None)
    @given(
        beta=st.floats(0.0, 1.0),
        kappa0=st.floats(-5.0, 5.0),
        alphas=st.lists(st.floats(-10.0, 10.0), min_size=1, max_size=20),
    )
    def test_recurrence_exact(self, beta, kappa0, alphas):
        state = ThresholdState(kappa=kappa0, beta=beta, tau=0.5)
        expect = kappa0
        for a in alphas:
            # a constant array makes every quantile equal to a
            state = adaptive_threshold(state, np.full(7, a))
            expect = beta * a + (1.0 - beta) * expect
            assert state.kappa == expect

    def test_init_uses_quantile(self):
        E = np.arange(11, dtype=float)
        state = threshold_init(E, beta=0.3, tau=0.6)
        assert state.kappa == np.quantile(E, 0.6)
        assert state.step == 0


class TestClassdivDetect:
    def _model(self):
        M = np.vstack([np.zeros((5, 2)), np.full((2, 2), 8.0)])
        return dgmm_train(M, K=1, epochs=20, seed=0), M

    def test_high_threshold_empty(self):
        model, M = self._model()
        out = classdiv_detect(model, M, ThresholdState(kappa=np.inf, beta=0.3, tau=0.6))
        assert out.victims.size == 0 and out.normals.size == 7

    def test_neg_inf_flags_all(self):
        model, M = self._model()
        out = classdiv_detect(model, M, ThresholdState(kappa=-np.inf, beta=0.3, tau=0.6))
        assert out.victims.size == 7

    def test_partition_invariant(self):
        model, M = self._model()
        out = classdiv_detect(model, M, ThresholdState(kappa=1.0, beta=0.3, tau=0.6))
        assert np.array_equal(np.union1d(out.victims, out.normals), np.arange(7))


class TestLinkPred:
    def test_gamma_formula(self):
        assert reweight_gamma(10, 20) == pytest.approx(4.0)

    def test_h3_symmetric(self):
        b = random_bundle(n=12, seed=1)
        gnn = train_inner(b, TrainConfig(epochs=20))
        model = linkpred_train(b.adjacency, gnn.logits, epochs=40, seed=0)
        H3 = linkpred_scores(model, gnn.logits)
        assert np.max(np.abs(H3 - H3.T)) < 1e-12

    def test_edges_score_above_sampled_nonedges_on_clean_sbm(self, sbm100):
        gnn = train_inner(sbm100, TrainConfig(epochs=80))
        pca_soft = soft_class_prob(pca_reduce(sbm100.features, 2), 2.0)
        feats = np.concatenate([gnn.logits, pca_soft], axis=1)
        model = linkpred_train(sbm100.adjacency, feats, epochs=150, seed=0)
        H3 = linkpred_scores(model, feats)
        iu, iv = np.triu_indices(100, k=1)
        is_edge = sbm100.adjacency[iu, iv] > 0
        assert H3[iu[is_edge], iv[is_edge]].mean() > H3[iu[~is_edge], iv[~is_edge]].mean()

    def test_deterministic_per_seed(self):
        b = random_bundle(n=10, seed=2)
        gnn = train_inner(b, TrainConfig(epochs=15))
        m1 = linkpred_train(b.adjacency, gnn.logits, epochs=20, seed=5)
        m2 = linkpred_train(b.adjacency, gnn.logits, epochs=20, seed=5)
        assert np.array_equal(m1.w1, m2.w1) and m1.tau_lp == m2.tau_lp


class TestGmeanThreshold:
    def test_perfect_separation_returns_midpoint(self):
        A = np.zeros((4, 4))
        A[0, 1] = A[1, 0] = A[2, 3] = A[3, 2] = 1.0
        H3 = np.full((4, 4), 0.1)
        for u, v in ((0, 1), (2, 3)):
            H3[u, v] = H3[v, u] = 0.9
        thr = gmean_threshold(H3, A)
        assert thr.gmean == pytest.approx(1.0)
        assert 0.1 < thr.tau < 0.9
        assert thr.tau == pytest.approx(0.5)

    def test_identical_scores_flagged_degenerate(self):
        A = np.zeros((3, 3))
        A[0, 1] = A[1, 0] = 1.0
        H3 = np.full((3, 3), 0.4)
        thr = gmean_threshold(H3, A)
        assert thr.degenerate
        assert thr.tau == pytest.approx(0.4)

    def test_returned_tau_is_grid_global_maximizer(self):
        rng = np.random.default_rng(7)
        n = 20
        b = random_bundle(n=n, seed=7, edge_prob=0.3)
        H3 = rng.random((n, n))
        H3 = (H3 + H3.T) / 2
        thr = gmean_threshold(H3, b.adjacency, seed=1)
        iu, iv = np.triu_indices(n, k=1)
        is_edge = b.adjacency[iu, iv] > 0
        pos = H3[iu[is_edge], iv[is_edge]]
        neg = H3[iu[~is_edge], iv[~is_edge]]  # fewer than 10x edges, so all sampled
        for cand in np.unique(np.concatenate([pos, neg])):
            tpr = (pos >= cand).mean()
            tnr = (neg < cand).mean()
            assert thr.gmean >= np.sqrt(tpr * tnr) - 1e-12
        tpr = (pos >= thr.tau).mean()
        tnr = (neg < thr.tau).mean()
        assert np.sqrt(tpr * tnr) == pytest.approx(thr.gmean, abs=1e-12)


class TestLinkpredDetect:
    def _model(self, tau):
        return LinkPredModel(w1=np.zeros((2, 2)), b1=np.zeros(2), w2=np.zeros((2, 2)),
                             b2=np.zeros(2), gamma=1.0, tau_lp=tau)

    def test_all_edges_above_threshold_no_victims(self):
        A = np.zeros((4, 4))
        A[0, 1] = A[1, 0] = 1.0
        H3 = np.full((4, 4), 0.9)
        out = linkpred_detect(self._model(0.5), A, None, H3=H3)
        assert out.victims.size == 0

    def test_single_low_edge_marks_both_endpoints(self):
        A = np.zeros((5, 5))
        for u, v in ((0, 1), (2, 3), (3, 4)):
            A[u, v] = A[v, u] = 1.0
        H3 = np.full((5, 5), 0.9)
        H3[2, 3] = H3[3, 2] = 0.1
        out = linkpred_detect(self._model(0.5), A, None, H3=H3)
        assert out.victims.tolist() == [2, 3]

    def test_universal_reading_requires_all_edges_low(self):
        A = np.zeros((4, 4))
        for u, v in ((0, 1), (1, 2)):
            A[u, v] = A[v, u] = 1.0
        H3 = np.full((4, 4), 0.9)
        H3[0, 1] = H3[1, 0] = 0.1
        out = linkpred_detect(self._model(0.5), A, None, H3=H3, universal=True)
        # node 0 has its only edge low; node 1 also has a high edge
        assert out.victims.tolist() == [0]

    def test_planted_cross_edge_detected_in_most_seeds(self):
        hits = 0
        for seed in range(5):
            b = sbm_bundle(n=80, num_classes=2, p_in=0.25, p_out=0.02, feat_dim=6,
                           class_sep=1.5, seed=seed)
            pois, ins = plant_cross_edges(b, 1, seed=seed + 100)
            (u, v) = next(iter(ins))
            gnn = train_inner(pois, TrainConfig(epochs=80, seed=seed))
            pca_soft = soft_class_prob(pca_reduce(pois.features, 2), 2.0)
            feats = np.concatenate([gnn.logits, pca_soft], axis=1)
            model = linkpred_train(pois.adjacency, feats, epochs=150, seed=seed)
            out = linkpred_detect(model, pois.adjacency, feats)
            hits += (u in out.victims) and (v in out.victims)
        assert hits >= 4

    def test_partition_invariant(self):
        A = np.zeros((6, 6))
        A[0, 1] = A[1, 0] = 1.0
        H3 = np.full((6, 6), 0.2)
        out = linkpred_detect(self._model(0.5), A, None, H3=H3)
        assert np.array_equal(np.union1d(out.victims, out.normals), np.arange(6))


class TestDetectorOutput:
    def test_rejects_overlap(self):
        with pytest.raises(ConsistencyError):
            DetectorOutput(scores=np.zeros(3), victims=np.array([0, 1]),
                           normals=np.array([1, 2]))

    def test_rejects_non_partition(self):
        with pytest.raises(ConsistencyError):
            DetectorOutput(scores=np.zeros(3), victims=np.array([0]),
                           normals=np.array([1]))
