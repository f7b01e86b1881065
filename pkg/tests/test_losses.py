import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcfes.errors import BadTarget, DegenerateBatch, MissingPrototypes, NonFiniteLoss
from vcfes.gradcheck import check_gradients, random_instance
from vcfes.heads import ArcFaceHead, HeadParameters, init_heads
from vcfes.losses import (Batch, batch_triplet_loss, evaluate_objective, id_loss,
                          loss_gradients, total_loss, triplet_loss_space)
from vcfes.training import TrainConfig


def unit_rows(rng, *shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def naive_norm(v):
    acc = 0.0
    for x in v:
        acc += x * x
    return math.sqrt(acc)


def brute_force_batch_hard(vectors, labels, margin, weights=None):
    """Per anchor, the largest hinge over every valid (positive, negative) pair."""
    n = len(labels)
    weights = np.ones(n) if weights is None else weights
    total = 0.0
    for a in range(n):
        if weights[a] <= 0:
            continue
        best = None
        for p, q in itertools.product(range(n), range(n)):
            if p == a or labels[p] != labels[a] or labels[q] == labels[a]:
                continue
            if weights[p] <= 0 or weights[q] <= 0:
                continue
            h = (naive_norm(vectors[a] - vectors[p]) - naive_norm(vectors[a] - vectors[q])
                 + margin)
            best = h if best is None else max(best, h)
        if best is not None:
            total += weights[a] * max(0.0, best)
    return total / n


class TestTripletSpace:
    def test_satisfied(self):
        a = np.array([1.0, 0.0])
        n = np.array([math.cos(math.pi / 3), math.sin(math.pi / 3)])
        assert np.linalg.norm(a - n) == pytest.approx(1.0)
        assert triplet_loss_space(a, a, n, 0.3) == 0.0

    def test_inverted(self):
        a = np.array([1.0, 0.0])
        p = np.array([math.cos(math.pi / 3), math.sin(math.pi / 3)])
        assert triplet_loss_space(a, p, a, 0.3) == pytest.approx(1.3, abs=1e-15)

    def test_random_against_naive(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, p, n = unit_rows(rng, 3, 7)
            expected = max(0.0, naive_norm(a - p) - naive_norm(a - n) + 0.3)
            assert triplet_loss_space(a, p, n, 0.3) == pytest.approx(expected, abs=1e-12)


class TestBatchTriplet:
    def test_separated_identities_zero(self):
        rng = np.random.default_rng(1)
        a, b = unit_rows(rng, 2, 4, 5)
        while np.min(np.linalg.norm(a - b, axis=-1)) < 0.4:
            a, b = unit_rows(rng, 2, 4, 5)
        vectors = np.stack([a, a, b, b])
        assert batch_triplet_loss(vectors, [0, 0, 1, 1], 0.3) == (0.0,) * 4

    @pytest.mark.parametrize("P,K", [(2, 2), (2, 3), (3, 2), (4, 4)])
    def test_matches_enumeration(self, P, K):
        rng = np.random.default_rng(P * 10 + K)
        labels = np.repeat(np.arange(P), K)
        for _ in range(10):
            vectors = unit_rows(rng, P * K, 4, 3)
            got = batch_triplet_loss(vectors, labels, 0.3)
            for s in range(4):
                assert got[s] == pytest.approx(
                    brute_force_batch_hard(vectors[:, s], labels, 0.3), abs=1e-12)

    def test_visibility_weighting_matches_enumeration(self):
        rng = np.random.default_rng(5)
        labels = np.repeat(np.arange(3), 3)
        for _ in range(10):
            vectors = unit_rows(rng, 9, 4, 3)
            ratios = rng.dirichlet(np.ones(3), size=9)
            ratios[rng.random((9, 3)) < 0.3] = 0.0
            got = batch_triplet_loss(vectors, labels, 0.3, ratios, "visibility")
            assert got[0] == pytest.approx(
                brute_force_batch_hard(vectors[:, 0], labels, 0.3), abs=1e-12)
            for s in range(1, 4):
                assert got[s] == pytest.approx(brute_force_batch_hard(
                    vectors[:, s], labels, 0.3, ratios[:, s - 1]), abs=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        labels = np.repeat(np.arange(3), 3)
        vectors = unit_rows(rng, 9, 4, 6)
        perm = rng.permutation(9)
        a = batch_triplet_loss(vectors, labels, 0.3)
        b = batch_triplet_loss(vectors[perm], labels[perm], 0.3)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("labels", [[0, 0, 0, 0], [0, 0, 1], [0, 1, 2, 2]])
    def test_degenerate(self, labels):
        with pytest.raises(DegenerateBatch):
            batch_triplet_loss(np.ones((len(labels), 4, 2)), labels, 0.3)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_triplet_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), 2)
    vectors = unit_rows(rng, 6, 4, 5)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    rotated = vectors @ q.T
    np.testing.assert_allclose(batch_triplet_loss(rotated, labels, 0.3),
                               batch_triplet_loss(vectors, labels, 0.3), atol=1e-12)


def identity_setup(dim):
    heads = HeadParameters(np.stack([np.eye(dim)] * 4), np.zeros((4, dim)), use_bias=False)
    return heads


class TestIdLoss:
    def test_single_class_zero(self):
        rng = np.random.default_rng(0)
        heads, arc = init_heads(0, 6, 4, 1)
        batch = Batch(rng.normal(size=(3, 6)), [0, 0, 0], np.full((3, 3), 1 / 3))
        assert id_loss(batch, heads, arc) == 0.0

    def test_uniform_logits_give_log_k(self):
        K = 5
        rows = np.zeros((4, K, K + 1))
        rows[:, np.arange(K), np.arange(K)] = 1.0
        arc = ArcFaceHead(rows, 30.0, 0.0)
        x = np.zeros((2, K + 1))
        x[:, K] = 1.0
        batch = Batch(x, [1, 3], np.zeros((2, 3)))
        assert id_loss(batch, identity_setup(K + 1), arc) == pytest.approx(math.log(K),
                                                                            abs=1e-14)

    def test_softmin_argmin_limit(self):
        rng = np.random.default_rng(7)
        dim = 5
        protos = unit_rows(rng, 3, 4, dim)
        x = rng.normal(size=(12, dim))
        ratios = rng.dirichlet(np.ones(3), size=12)
        vectors = x / np.linalg.norm(x, axis=1, keepdims=True)
        # fused distances evaluated by hand
        nearest = []
        for i in range(12):
            scores = []
            for k in range(3):
                d = [naive_norm(vectors[i] - protos[k, s]) for s in range(4)]
                scores.append((d[0] + d[1] * ratios[i, 0] + d[2] * ratios[i, 1]
                               + d[3] * ratios[i, 2]) / 2)
            nearest.append(int(np.argmin(scores)))
        heads = identity_setup(dim)
        arc = ArcFaceHead(np.ones((4, 3, dim)))
        right = Batch(x, nearest, ratios)
        wrong = Batch(x, [(k + 1) % 3 for k in nearest], ratios)
        assert id_loss(right, heads, arc, "softmin_distance", protos, 1e-4) < 1e-6
        assert id_loss(wrong, heads, arc, "softmin_distance", protos, 1e-4) > 10.0

    def test_errors(self):
        heads, arc = init_heads(0, 4, 3, 2)
        batch = Batch(np.ones((2, 4)), [0, 5], np.zeros((2, 3)))
        with pytest.raises(BadTarget):
            id_loss(batch, heads, arc)
        with pytest.raises(MissingPrototypes):
            id_loss(Batch(np.ones((2, 4)), [0, 1], np.zeros((2, 3))), heads, arc,
                    "softmin_distance", None)


def toy_problem(seed=0, **cfg):
    rng = np.random.default_rng(seed)
    heads, arc = init_heads(seed, 10, 4, 3)
    batch = Batch(rng.normal(size=(6, 10)), [0, 0, 1, 1, 2, 2],
                  rng.dirichlet(np.ones(3), size=6))
    return batch, heads, arc, TrainConfig(embed_dim=4, **cfg)


class TestTotalLoss:
    def test_lambda_id_zero(self):
        batch, heads, arc, cfg = toy_problem(lambda_id=0.0, lambda_triplet=2.5)
        report = total_loss(batch, heads, arc, cfg)
        assert report.total == 2.5 * report.triplet_loss

    def test_lambda_triplet_zero(self):
        batch, heads, arc, cfg = toy_problem(lambda_id=0.7, lambda_triplet=0.0)
        report = total_loss(batch, heads, arc, cfg)
        assert report.total == 0.7 * report.id_loss

    def test_sum_of_separate_terms(self):
        from vcfes.heads import project_batch
        batch, heads, arc, cfg = toy_problem(lambda_id=1.0, lambda_triplet=1.0)
        report = total_loss(batch, heads, arc, cfg)
        separate_id = id_loss(batch, heads, arc)
        separate_trip = sum(batch_triplet_loss(project_batch(batch.embeddings, heads),
                                               batch.labels, cfg.triplet_margin))
        assert report.total == pytest.approx(separate_id + separate_trip, rel=1e-12)
        assert report.triplet_loss == sum(report.triplet_loss_per_space)
        assert min(report.triplet_loss_per_space) >= 0 and report.id_loss >= 0

    @pytest.mark.parametrize("mode", ["arcface_ce", "softmin_distance"])
    @pytest.mark.parametrize("weighting", ["uniform", "visibility"])
    def test_reconstruction_invariant(self, mode, weighting):
        for seed in range(5):
            batch, heads, arc, cfg = toy_problem(seed, lambda_id=0.3, lambda_triplet=1.7,
                                                 id_mode=mode, view_weighting=weighting)
            protos = unit_rows(np.random.default_rng(seed), 3, 4, 4)
            r = total_loss(batch, heads, arc, cfg, protos)
            assert r.total == pytest.approx(0.3 * r.id_loss + 1.7 * r.triplet_loss, rel=1e-12)


class TestGradients:
    def test_zero_when_inactive(self):
        x = np.zeros((4, 3))
        x[:2, 0] = 1.0
        x[2:, 1] = 1.0
        batch = Batch(x, [0, 0, 1, 1], np.full((4, 3), 1 / 3))
        _, arc = init_heads(0, 3, 3, 2)
        heads = HeadParameters(np.stack([np.eye(3)] * 4), np.zeros((4, 3)))
        cfg = TrainConfig(lambda_id=0.0, lambda_triplet=1.0, embed_dim=3)
        g = loss_gradients(batch, heads, arc, cfg)
        for part in (g.weights, g.biases, g.class_weights):
            assert np.all(part == 0.0)

    def test_linear_in_lambda(self):
        batch, heads, arc, cfg = toy_problem(3, lambda_id=0.0, lambda_triplet=1.0)
        g1 = loss_gradients(batch, heads, arc, cfg)
        cfg.lambda_triplet = 2.0
        g2 = loss_gradients(batch, heads, arc, cfg)
        np.testing.assert_array_equal(g2.weights, 2 * g1.weights)
        np.testing.assert_array_equal(g2.biases, 2 * g1.biases)
        np.testing.assert_array_equal(g2.class_weights, 2 * g1.class_weights)

    @pytest.mark.parametrize("mode", ["arcface_ce", "softmin_distance"])
    @pytest.mark.parametrize("weighting", ["uniform", "visibility"])
    def test_finite_differences(self, mode, weighting):
        result = check_gradients(*random_instance(11, id_mode=mode, view_weighting=weighting))
        assert result.checked > 600
        assert result.max_rel_error < 1e-4

    def test_margin_branch_finite_differences(self):
        batch, heads, arc, cfg, protos = random_instance(4)
        arc.margin = 0.5
        arc.scale = 16.0
        assert check_gradients(batch, heads, arc, cfg, protos).max_rel_error < 1e-4

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite(self):
        batch, heads, arc, cfg = toy_problem()
        batch.embeddings[0, 0] = np.inf
        with pytest.raises(NonFiniteLoss):
            evaluate_objective(batch, heads, arc, cfg)
