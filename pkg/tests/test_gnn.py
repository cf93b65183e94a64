import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from graphsan import (
    GraphBundle,
    Split,
    TrainConfig,
    accuracy,
    forward,
    load_weights,
    predict,
    propagate,
    row_softmax,
    save_weights,
    train_inner,
)
from graphsan.errors import ConsistencyError, EmptySubset
from graphsan.gnn import train_nll, train_nll_grad

from conftest import random_bundle


def isolated_onehot_bundle():
    """Four isolated nodes whose one-hot features encode their labels."""
    A = np.zeros((4, 4))
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    y = np.array([0, 1, 0, 1])
    return GraphBundle(A, X, y, 2, Split([0, 1], [2, 3], []))


class TestTrainInner:
    def test_separable_fixture_reaches_full_train_accuracy(self):
        b = isolated_onehot_bundle()
        gnn = train_inner(b, TrainConfig(epochs=200))
        assert accuracy(predict(gnn.probs), b.labels, b.split.train) == 1.0

    def test_zero_epochs_rejected(self):
        with pytest.raises(ConsistencyError):
            TrainConfig(epochs=0)

    def test_sbm_beats_90_percent_and_matches_logistic_oracle(self, sbm100):
        gnn = train_inner(sbm100, TrainConfig(epochs=150))
        acc = accuracy(predict(gnn.probs), sbm100.labels, sbm100.split.test)
        assert acc > 0.9
        # independent oracle: plain logistic regression on the same propagated features
        clf = LogisticRegression(max_iter=2000)
        clf.fit(gnn.propagated[sbm100.split.train], sbm100.labels[sbm100.split.train])
        oracle_acc = clf.score(gnn.propagated[sbm100.split.test],
                               sbm100.labels[sbm100.split.test])
        assert oracle_acc > 0.9

    def test_deterministic_per_seed(self):
        b = random_bundle(n=12, seed=4)
        g1 = train_inner(b, TrainConfig(epochs=40, seed=11))
        g2 = train_inner(b, TrainConfig(epochs=40, seed=11))
        assert np.array_equal(g1.weights, g2.weights)

    def test_different_seed_changes_weights(self):
        b = random_bundle(n=12, seed=4)
        g1 = train_inner(b, TrainConfig(epochs=10, seed=1))
        g2 = train_inner(b, TrainConfig(epochs=10, seed=2))
        assert not np.array_equal(g1.weights, g2.weights)

    def test_final_nll_not_above_initial(self):
        b = random_bundle(n=15, seed=3)
        cfg = TrainConfig(epochs=60, seed=5)
        gnn = train_inner(b, cfg)
        import torch
        gen = torch.Generator().manual_seed(cfg.seed)
        W0 = (torch.randn(b.features.shape[1], b.num_classes, generator=gen,
                          dtype=torch.float64) * cfg.init_scale).numpy()
        nll0 = train_nll(gnn.propagated, W0, b.labels, b.split.train)
        nll1 = train_nll(gnn.propagated, gnn.weights, b.labels, b.split.train)
        assert nll1 <= nll0

    def test_identity_fallback_when_featureless(self):
        b = random_bundle(n=10, seed=6, with_features=False)
        gnn = train_inner(b, TrainConfig(epochs=20))
        assert gnn.propagated.shape == (10, 10)


class TestForward:
    def test_zero_weights_give_uniform(self):
        b = random_bundle(n=6, seed=0)
        _, probs = forward(b.adjacency, b.features, np.zeros((4, 3)))
        assert np.allclose(probs, 1.0 / 3.0)

    def test_scaling_sharpens_but_keeps_argmax(self):
        b = random_bundle(n=6, seed=1)
        rng = np.random.default_rng(0)
        W = rng.standard_normal((4, 3))
        _, p1 = forward(b.adjacency, b.features, W)
        _, p3 = forward(b.adjacency, b.features, 3.0 * W)
        assert np.array_equal(p1.argmax(axis=1), p3.argmax(axis=1))
        assert np.all(p3.max(axis=1) >= p1.max(axis=1) - 1e-12)

    def test_logits_match_loop_oracle(self):
        b = random_bundle(n=6, seed=2)
        rng = np.random.default_rng(1)
        W = rng.standard_normal((4, 3))
        logits, _ = forward(b.adjacency, b.features, W)
        A_hat = np.zeros((6, 6))
        At = b.adjacency + np.eye(6)
        d = At.sum(axis=1)
        for i in range(6):
            for j in range(6):
                A_hat[i, j] = At[i, j] / np.sqrt(d[i] * d[j])
        expect = np.zeros((6, 3))
        for i in range(6):
            for c in range(3):
                for j in range(6):
                    for k in range(6):
                        for f in range(4):
                            expect[i, c] += A_hat[i, j] * A_hat[j, k] * b.features[k, f] * W[f, c]
        assert np.max(np.abs(logits - expect)) < 1e-10

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(3)
        Z = rng.standard_normal((8, 5))
        shifted = Z + rng.standard_normal((8, 1))
        assert np.max(np.abs(row_softmax(Z) - row_softmax(shifted))) < 1e-12


class TestPredictAccuracy:
    def test_one_hot_probs_perfect(self):
        probs = np.eye(3)
        assert accuracy(predict(probs), np.array([0, 1, 2]), np.arange(3)) == 1.0

    def test_uniform_ties_break_to_class_zero(self):
        probs = np.full((4, 3), 1.0 / 3.0)
        assert np.array_equal(predict(probs), np.zeros(4, dtype=np.int64))

    def test_empty_subset_raises(self):
        with pytest.raises(EmptySubset):
            accuracy(np.array([0]), np.array([0]), np.array([], dtype=np.int64))


class TestGradients:
    def test_inner_gradient_matches_central_differences(self):
        b = random_bundle(n=10, num_classes=3, d=4, seed=7)
        rng = np.random.default_rng(2)
        W = rng.standard_normal((4, 3)) * 0.3
        prop = propagate(b.adjacency, b.features)
        _, grad = train_nll_grad(prop, W, b.labels, b.split.train)
        h = 1e-6
        fd = np.zeros_like(W)
        for i in range(W.shape[0]):
            for j in range(W.shape[1]):
                Wp, Wm = W.copy(), W.copy()
                Wp[i, j] += h
                Wm[i, j] -= h
                fd[i, j] = (train_nll(prop, Wp, b.labels, b.split.train)
                            - train_nll(prop, Wm, b.labels, b.split.train)) / (2 * h)
        assert np.linalg.norm(fd - grad) <= 1e-5 * np.linalg.norm(fd)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        W = rng.standard_normal((6, 3))
        save_weights(W, tmp_path / "w.ckpt", seed=42)
        W2, seed = load_weights(tmp_path / "w.ckpt")
        assert seed == 42
        assert np.array_equal(W, W2)
