"""Ward linkage against the naive oracle, singleton classifiers, evaluation."""

import numpy as np
import pytest

from conftest import random_units
from oracles import (permutation_accuracy_oracle, svm_dual_oracle, svm_objective,
                     ward_oracle)
from gazefocus.cluster import (NearestCentroidClassifier, RbfSvmClassifier,
                               WardAgglomerative, _canonical_order, _rbf_kernel,
                               assign_singletons, confusion_matrix, cut_dendrogram,
                               train_singleton_classifier, ward_linkage)
from gazefocus.model import ClassifierConfig, ValidationError


def clustered_points(rng, n_classes=3, per_class=8, dim=8, noise=0.15):
    centers = random_units(rng, n_classes, dim) * 3.0
    X, y = [], []
    for label, center in enumerate(centers):
        X.append(center + noise * rng.normal(size=(per_class, dim)))
        y.extend([label] * per_class)
    return np.vstack(X), np.asarray(y)


class TestWardLinkage:
    def test_worked_example_1d(self):
        d = ward_linkage(np.array([[0.0], [1.0], [10.0]]))
        first, second = d.merges
        assert (first.left, first.right, first.size) == (0, 1, 2)
        assert first.cost == pytest.approx(0.5, abs=1e-12)
        assert (second.left, second.right, second.size) == (2, 3, 3)
        # centroid {0,1} is 0.5: cost = (2*1/3) * 9.5^2 = 180.5/3
        assert second.cost == pytest.approx(180.5 / 3.0, abs=1e-12)

    def test_matches_naive_oracle(self, rng):
        for _ in range(40):
            n = int(rng.integers(2, 24))
            d = int(rng.integers(1, 10))
            X = rng.normal(size=(n, d))
            got = ward_linkage(X).merges
            want = ward_oracle(X)
            assert [(m.left, m.right, m.size) for m in got] == \
                [(l, r, s) for l, r, _, s in want]
            for m, (_, _, cost, _) in zip(got, want):
                assert abs(m.cost - cost) <= 1e-9

    def test_duplicate_points_merge_at_zero_cost(self):
        X = np.array([[1.0, 2.0], [1.0, 2.0], [5.0, 5.0]])
        merges = ward_linkage(X).merges
        assert (merges[0].left, merges[0].right) == (0, 1)
        assert merges[0].cost == 0.0

    def test_rotation_invariance(self, rng):
        X = rng.normal(size=(20, 6))
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        a = ward_linkage(X).merges
        b = ward_linkage(X @ q).merges
        assert [(m.left, m.right, m.size) for m in a] == \
            [(m.left, m.right, m.size) for m in b]
        for ma, mb in zip(a, b):
            assert abs(ma.cost - mb.cost) <= 1e-9

    def test_needs_two_rows(self):
        with pytest.raises(ValidationError, match="at least 2"):
            ward_linkage(np.zeros((1, 3)))


class TestCutDendrogram:
    def test_extreme_cuts(self, rng):
        X = rng.normal(size=(9, 4))
        d = ward_linkage(X)
        assert list(cut_dendrogram(d, 9)) == list(range(9))
        assert set(cut_dendrogram(d, 1)) == {0}

    def test_labels_ordered_by_smallest_leaf(self, rng):
        X = rng.normal(size=(12, 4))
        labels = cut_dendrogram(ward_linkage(X), 4)
        first_seen = []
        for lab in labels:
            if lab not in first_seen:
                first_seen.append(lab)
        assert first_seen == sorted(first_seen)

    def test_cut_is_partition_refined_by_merges(self, rng):
        X = rng.normal(size=(15, 3))
        d = ward_linkage(X)
        coarse = cut_dendrogram(d, 3)
        fine = cut_dendrogram(d, 7)
        # every fine cluster lies inside one coarse cluster
        for lab in range(7):
            members = np.flatnonzero(fine == lab)
            assert len(set(coarse[members])) == 1

    def test_permutation_gives_same_partition(self, rng):
        X = rng.normal(size=(14, 5))
        perm = rng.permutation(14)
        base = cut_dendrogram(ward_linkage(X), 4)
        shuffled = cut_dendrogram(ward_linkage(X[perm]), 4)

        def blocks(labels, rows):
            return {frozenset(map(tuple, rows[labels == lab])) for lab in set(labels)}

        assert blocks(base, X) == blocks(shuffled, X[perm])

    def test_estimator_wrapper(self, rng):
        X, y = clustered_points(rng, n_classes=3)
        model = WardAgglomerative(n_clusters=3).fit(X)
        assert permutation_accuracy_oracle(model.labels_, y) == 1.0


class TestNearestCentroid:
    def test_centroids_are_unit_means(self, rng):
        X, y = clustered_points(rng, n_classes=2, dim=4)
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        model = NearestCentroidClassifier().fit(X, y)
        mean0 = X[y == 0].mean(axis=0)
        assert np.allclose(model.centroids_[0], mean0 / np.linalg.norm(mean0))
        assert (model.predict(X) == y).all()

    def test_training_order_invariant_bitwise(self, rng):
        X, y = clustered_points(rng, n_classes=3, dim=6)
        perm = rng.permutation(len(y))
        a = NearestCentroidClassifier().fit(X, y)
        b = NearestCentroidClassifier().fit(X[perm], y[perm])
        assert np.array_equal(a.centroids_, b.centroids_)
        probe = random_units(rng, 5, 6)
        assert np.array_equal(a.decision_function(probe), b.decision_function(probe))

    def test_tie_prefers_lower_label(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        model = NearestCentroidClassifier().fit(X, [0, 1])
        mid = np.array([[2.0 ** -0.5, 2.0 ** -0.5]])
        assert model.predict(mid)[0] == 0

    def test_margin_zero_for_single_class(self, rng):
        X = random_units(rng, 4, 3)
        model = NearestCentroidClassifier().fit(X, [0, 0, 0, 0])
        assert np.array_equal(model.confidence_margin(X), np.zeros(4))

    def test_margin_is_best_minus_second(self, rng):
        X, y = clustered_points(rng, n_classes=3, dim=5)
        model = NearestCentroidClassifier().fit(X, y)
        sims = model.decision_function(X)
        top2 = np.sort(sims, axis=1)[:, -2:]
        assert np.allclose(model.confidence_margin(X), top2[:, 1] - top2[:, 0])


def binary_duals(model, X, y):
    """(K, y_signed, alpha) for a fitted binary model, canonical row order."""
    order = _canonical_order(np.asarray(X, dtype=np.float64),
                             np.asarray(y, dtype=np.int64))
    y_signed = np.where(np.asarray(y)[order] == model.classes_[1], 1.0, -1.0)
    coef, _ = model._duals[1]             # positive class = classes_[1]
    alpha = coef * y_signed
    K = _rbf_kernel(model.X_, model.X_, model.gamma_)
    return K, y_signed, alpha


class TestRbfSvm:
    def test_binary_matches_qp_oracle(self, rng):
        checked = 0
        for trial in range(8):
            n = int(rng.integers(16, 36))
            X = rng.normal(size=(n, 4))
            y = np.where(X[:, 0] + 0.4 * rng.normal(size=n) > 0, 1, 0)
            if len(set(y)) < 2:
                continue
            c = 10.0
            model = RbfSvmClassifier(c=c, gamma=0.25).fit(X, y)
            K, y_signed, alpha = binary_duals(model, X, y)
            assert ((alpha >= -1e-12) & (alpha <= c + 1e-12)).all()
            assert abs(float(alpha @ y_signed)) <= 1e-6
            got = svm_objective(K, y_signed, alpha)
            _, _, want = svm_dual_oracle(K, y_signed, c)
            assert abs(got - want) <= 1e-2 * (1.0 + abs(want))
            checked += 1
        assert checked >= 4

    def test_decisions_agree_with_oracle(self, rng):
        agree = total = 0
        for trial in range(6):
            X = rng.normal(size=(30, 3))
            y = np.where(np.linalg.norm(X, axis=1) > 1.6, 1, 0)
            if len(set(y)) < 2:
                continue
            model = RbfSvmClassifier(c=5.0, gamma=0.5).fit(X, y)
            K, y_signed, _ = binary_duals(model, X, y)
            alpha, bias, _ = svm_dual_oracle(K, y_signed, 5.0)
            probe = rng.normal(size=(40, 3))
            oracle_scores = (_rbf_kernel(probe, model.X_, model.gamma_)
                             @ (alpha * y_signed) + bias)
            got = model.predict(probe)
            want = np.where(oracle_scores > 0, 1, 0)
            agree += int(np.sum(got == want))
            total += len(probe)
        assert total > 0 and agree / total >= 0.95

    def test_multiclass_separable(self, rng):
        X, y = clustered_points(rng, n_classes=3, per_class=10, dim=6, noise=0.1)
        model = RbfSvmClassifier(c=10.0).fit(X, y)
        assert (model.predict(X) == y).all()
        assert model.gamma_ == pytest.approx(1.0 / 6)

    def test_training_order_invariant_bitwise(self, rng):
        X, y = clustered_points(rng, n_classes=2, per_class=8, dim=4)
        perm = rng.permutation(len(y))
        probe = rng.normal(size=(7, 4))
        a = RbfSvmClassifier(c=5.0).fit(X, y).decision_function(probe)
        b = RbfSvmClassifier(c=5.0).fit(X[perm], y[perm]).decision_function(probe)
        assert np.array_equal(a, b)

    def test_single_class_predicts_it(self, rng):
        X = random_units(rng, 5, 3)
        model = RbfSvmClassifier().fit(X, [2, 2, 2, 2, 2])
        assert (model.predict(X) == 2).all()


class TestTrainSingletonClassifier:
    def test_default_strategy_is_nearest_centroid(self, rng):
        X, y = clustered_points(rng)
        model = train_singleton_classifier(X, y)
        assert isinstance(model, NearestCentroidClassifier)

    def test_svm_strategy(self, rng):
        X, y = clustered_points(rng)
        cfg = ClassifierConfig(strategy="svm")
        model = train_singleton_classifier(X, y, cfg)
        assert isinstance(model, RbfSvmClassifier)

    def test_missing_label_rejected(self, rng):
        X, y = clustered_points(rng, n_classes=2)
        with pytest.raises(ValidationError,
                           match=r"no training features for labels \[2, 3\]"):
            train_singleton_classifier(X, y, num_classes=4)

    def test_assign_singletons_empty(self, rng):
        X, y = clustered_points(rng)
        model = train_singleton_classifier(X, y)
        out = assign_singletons(model, np.zeros((0, X.shape[1])))
        assert out.shape == (0,) and out.dtype == np.int64


class TestConfusionMatrix:
    def test_identity_labels(self):
        matrix, accuracy = confusion_matrix([0, 1, 1, 2], [0, 1, 1, 2])
        assert accuracy == 1.0
        assert np.trace(matrix) == 4

    def test_alignment_fixes_permuted_labels(self):
        truth = [0] * 5 + [1] * 5
        predicted = [1] * 5 + [0] * 5
        matrix, accuracy = confusion_matrix(predicted, truth)
        assert accuracy == 1.0
        assert matrix[0, 0] == 5 and matrix[1, 1] == 5

    def test_matches_permutation_oracle(self, rng):
        for _ in range(30):
            n = int(rng.integers(5, 60))
            k = int(rng.integers(2, 5))
            truth = rng.integers(0, k, size=n)
            predicted = rng.integers(0, k, size=n)
            _, accuracy = confusion_matrix(predicted, truth)
            assert accuracy == pytest.approx(
                permutation_accuracy_oracle(predicted, truth), abs=1e-12)

    def test_accuracy_invariant_to_prediction_relabeling(self, rng):
        truth = rng.integers(0, 4, size=80)
        predicted = rng.integers(0, 4, size=80)
        perm = rng.permutation(4)
        _, base = confusion_matrix(predicted, truth)
        _, relabeled = confusion_matrix(perm[predicted], truth)
        assert base == pytest.approx(relabeled, abs=1e-12)

    def test_rejects_empty_and_negative(self):
        with pytest.raises(ValidationError, match="at least one pair"):
            confusion_matrix([], [])
        with pytest.raises(ValidationError, match="non-negative"):
            confusion_matrix([0, -1], [0, 1])
