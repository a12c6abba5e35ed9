"""Identity clustering: Ward agglomeration over tracklet features, singleton
classification, and evaluation against ground truth.

Ward merge cost between clusters A and B is |A||B| / (|A| + |B|) times the
squared centroid distance.  The linkage keeps a full pairwise cost matrix
and applies the Lance-Williams recurrence after each merge, so centroids are
never recomputed; ties break on (cost, smaller left node id, smaller right
node id) with scipy-style node numbering.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator

from .model import ClassifierConfig, Dendrogram, Merge, ValidationError, _require


def _feature_matrix(features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    _require(X.ndim == 2, "features must be a (n, d) matrix")
    _require(bool(np.isfinite(X).all()), "features must be finite")
    return X


def ward_linkage(features) -> Dendrogram:
    """Agglomerate all rows of ``features`` into a dendrogram."""
    X = _feature_matrix(features)
    n = X.shape[0]
    _require(n >= 2, "ward_linkage needs at least 2 observations")

    sq = (X * X).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    upper = np.triu(d2, 1)
    cost = (upper + upper.T) / 2.0          # bit-symmetric initial Ward costs
    np.fill_diagonal(cost, np.inf)

    alive = np.ones(n, dtype=bool)
    node_id = list(range(n))
    size = np.ones(n, dtype=np.float64)

    def row_best(i: int) -> tuple[float, int, int, int] | None:
        mask = alive.copy()
        mask[i] = False
        if not mask.any():
            return None
        row = np.where(mask, cost[i], np.inf)
        m = float(row.min())
        if not math.isfinite(m):
            return None
        key = None
        for j in np.flatnonzero(row == m):
            a, b = sorted((node_id[i], node_id[j]))
            if key is None or (a, b) < key[1:3]:
                key = (m, a, b, int(j))
        return key

    best: list[tuple[float, int, int, int] | None] = [row_best(i) for i in range(n)]

    merges: list[Merge] = []
    for step in range(n - 1):
        pick = None
        pick_slot = -1
        for i in range(n):
            if alive[i] and best[i] is not None:
                if pick is None or best[i][:3] < pick[:3]:
                    pick = best[i]
                    pick_slot = i
        assert pick is not None
        i, j = pick_slot, pick[3]
        if not alive[j]:
            raise AssertionError("stale row cache")
        merged_cost, left, right = pick[0], pick[1], pick[2]
        si, sj = size[i], size[j]
        new_id = n + step
        merges.append(Merge(left, right, merged_cost, int(si + sj)))

        others = alive.copy()
        others[i] = False
        others[j] = False
        sk = size[others]
        updated = ((si + sk) * cost[i, others] + (sj + sk) * cost[j, others]
                   - sk * merged_cost) / (si + sj + sk)
        cost[i, others] = updated
        cost[others, i] = updated
        alive[j] = False
        cost[j, :] = np.inf
        cost[:, j] = np.inf
        cost[i, i] = np.inf
        node_id[i] = new_id
        size[i] = si + sj
        best[j] = None

        # refresh caches: the merged row fully, neighbours only where stale
        best[i] = row_best(i)
        for k in range(n):
            if not alive[k] or k == i or best[k] is None:
                continue
            if best[k][3] in (i, j):
                best[k] = row_best(k)
            else:
                ck = cost[k, i]
                if math.isfinite(ck):
                    a, b = sorted((node_id[k], node_id[i]))
                    cand = (float(ck), a, b, i)
                    if cand[:3] < best[k][:3]:
                        best[k] = cand
    return Dendrogram(n_leaves=n, merges=tuple(merges))


def cut_dendrogram(dendrogram: Dendrogram, k: int) -> np.ndarray:
    """Labels for a cut into ``k`` clusters (undo the last k-1 merges).

    Labels run 0..k-1 ordered by each cluster's smallest leaf index.
    """
    n = dendrogram.n_leaves
    _require(1 <= k <= n, f"k must be in [1, {n}], got {k}")
    leaves: dict[int, list[int]] = {i: [i] for i in range(n)}
    alive = set(range(n))
    for t, m in enumerate(dendrogram.merges[: n - k]):
        node = n + t
        leaves[node] = leaves.pop(m.left) + leaves.pop(m.right)
        alive.discard(m.left)
        alive.discard(m.right)
        alive.add(node)
    groups = sorted((min(leaves[node]), sorted(leaves[node])) for node in alive)
    labels = np.empty(n, dtype=np.int64)
    for label, (_, members) in enumerate(groups):
        labels[members] = label
    return labels


class WardAgglomerative(BaseEstimator):
    """Estimator wrapper: fit stores ``dendrogram_`` and ``labels_``."""

    def __init__(self, n_clusters: int = 4):
        self.n_clusters = n_clusters

    def fit(self, X, y=None) -> "WardAgglomerative":
        self.dendrogram_ = ward_linkage(X)
        self.labels_ = cut_dendrogram(self.dendrogram_, self.n_clusters)
        return self

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).labels_


def _canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Training-order independent row permutation: sort by label, then lexically."""
    return np.lexsort(tuple(X[:, d] for d in reversed(range(X.shape[1]))) + (y,))


class NearestCentroidClassifier(BaseEstimator):
    """Assign unit vectors to the per-label centroid with the largest dot product."""

    def fit(self, X, y) -> "NearestCentroidClassifier":
        X = _feature_matrix(X)
        y = np.asarray(y, dtype=np.int64)
        _require(X.shape[0] == y.shape[0], "X and y must align")
        _require(X.shape[0] >= 1, "need at least one training vector")
        order = _canonical_order(X, y)
        X, y = X[order], y[order]
        self.classes_ = np.unique(y)
        centroids = []
        for label in self.classes_:
            mean = X[y == label].mean(axis=0)
            norm = np.linalg.norm(mean)
            _require(norm > 1e-12, f"degenerate centroid for label {label}")
            centroids.append(mean / norm)
        self.centroids_ = np.stack(centroids)
        return self

    def decision_function(self, X) -> np.ndarray:
        return _feature_matrix(X) @ self.centroids_.T

    def predict(self, X) -> np.ndarray:
        sims = self.decision_function(X)
        return self.classes_[np.argmax(sims, axis=1)]

    def confidence_margin(self, X) -> np.ndarray:
        """Best minus second-best similarity, 0 when only one class exists."""
        sims = self.decision_function(X)
        if sims.shape[1] == 1:
            return np.zeros(sims.shape[0])
        part = np.sort(sims, axis=1)
        return part[:, -1] - part[:, -2]


def _rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    sq_a = (A * A).sum(axis=1)
    sq_b = (B * B).sum(axis=1)
    d2 = sq_a[:, None] + sq_b[None, :] - 2.0 * (A @ B.T)
    np.maximum(d2, 0.0, out=d2)
    return np.exp(-gamma * d2)


class _BinarySmo:
    """Sequential minimal optimization for one soft-margin RBF problem.

    Deterministic variant: candidate loops run in ascending index order and
    the second-choice heuristic breaks ties on the lower index, so a given
    (X, y) always yields the same multipliers.
    """

    def __init__(self, K: np.ndarray, y: np.ndarray, c: float, tol: float):
        self.K = K
        self.y = y.astype(np.float64)
        self.c = float(c)
        self.tol = float(tol)
        n = len(y)
        self.alpha = np.zeros(n)
        self.b = 0.0
        self.fcache = np.zeros(n)        # f(x_i) with b folded in

    def _take_step(self, i1: int, i2: int) -> bool:
        if i1 == i2:
            return False
        K, y, alpha, c = self.K, self.y, self.alpha, self.c
        a1, a2 = alpha[i1], alpha[i2]
        y1, y2 = y[i1], y[i2]
        e1 = self.fcache[i1] - y1
        e2 = self.fcache[i2] - y2
        s = y1 * y2
        if s > 0:
            lo, hi = max(0.0, a1 + a2 - c), min(c, a1 + a2)
        else:
            lo, hi = max(0.0, a2 - a1), min(c, c + a2 - a1)
        if lo >= hi:
            return False
        k11, k12, k22 = K[i1, i1], K[i1, i2], K[i2, i2]
        eta = k11 + k22 - 2.0 * k12
        if eta > 1e-12:
            a2_new = a2 + y2 * (e1 - e2) / eta
            a2_new = min(hi, max(lo, a2_new))
        else:
            # flat direction: evaluate the dual objective at both bounds
            f1 = y1 * (e1 + self.b) - a1 * k11 - s * a2 * k12
            f2 = y2 * (e2 + self.b) - s * a1 * k12 - a2 * k22
            l1 = a1 + s * (a2 - lo)
            h1 = a1 + s * (a2 - hi)
            obj_lo = (l1 * f1 + lo * f2 + 0.5 * l1 * l1 * k11
                      + 0.5 * lo * lo * k22 + s * lo * l1 * k12)
            obj_hi = (h1 * f1 + hi * f2 + 0.5 * h1 * h1 * k11
                      + 0.5 * hi * hi * k22 + s * hi * h1 * k12)
            if obj_lo < obj_hi - 1e-12:
                a2_new = lo
            elif obj_hi < obj_lo - 1e-12:
                a2_new = hi
            else:
                a2_new = a2
        if abs(a2_new - a2) < 1e-12 * (a2_new + a2 + 1e-12):
            return False
        a1_new = a1 + s * (a2 - a2_new)
        b1 = self.b - e1 - y1 * (a1_new - a1) * k11 - y2 * (a2_new - a2) * k12
        b2 = self.b - e2 - y1 * (a1_new - a1) * k12 - y2 * (a2_new - a2) * k22
        if 0.0 < a1_new < c:
            b_new = b1
        elif 0.0 < a2_new < c:
            b_new = b2
        else:
            b_new = (b1 + b2) / 2.0
        self.fcache += (y1 * (a1_new - a1) * K[:, i1]
                        + y2 * (a2_new - a2) * K[:, i2]
                        + (b_new - self.b))
        alpha[i1], alpha[i2] = a1_new, a2_new
        self.b = b_new
        return True

    def _examine(self, i2: int) -> bool:
        y2, a2 = self.y[i2], self.alpha[i2]
        e2 = self.fcache[i2] - y2
        r2 = e2 * y2
        if not ((r2 < -self.tol and a2 < self.c) or (r2 > self.tol and a2 > 0.0)):
            return False
        non_bound = np.flatnonzero((self.alpha > 0.0) & (self.alpha < self.c))
        if len(non_bound) > 1:
            errs = np.abs(self.fcache[non_bound] - self.y[non_bound] - e2)
            i1 = int(non_bound[int(np.argmax(errs))])
            if self._take_step(i1, i2):
                return True
        for i1 in non_bound:
            if self._take_step(int(i1), i2):
                return True
        for i1 in range(len(self.y)):
            if self._take_step(i1, i2):
                return True
        return False

    def solve(self, max_passes: int = 200) -> None:
        n = len(self.y)
        examine_all = True
        num_changed = 0
        passes = 0
        while (num_changed > 0 or examine_all) and passes < max_passes:
            num_changed = 0
            if examine_all:
                for i in range(n):
                    num_changed += int(self._examine(i))
            else:
                for i in np.flatnonzero((self.alpha > 0.0) & (self.alpha < self.c)):
                    num_changed += int(self._examine(int(i)))
            if examine_all:
                examine_all = False
            elif num_changed == 0:
                examine_all = True
            passes += 1


class RbfSvmClassifier(BaseEstimator):
    """One-vs-rest soft-margin SVM with an RBF kernel, trained by SMO."""

    def __init__(self, c: float = 10.0, gamma: float | None = None, tol: float = 1e-3):
        self.c = c
        self.gamma = gamma
        self.tol = tol

    def fit(self, X, y) -> "RbfSvmClassifier":
        X = _feature_matrix(X)
        y = np.asarray(y, dtype=np.int64)
        _require(X.shape[0] == y.shape[0], "X and y must align")
        order = _canonical_order(X, y)
        X, y = X[order], y[order]
        self.classes_ = np.unique(y)
        self.gamma_ = self.gamma if self.gamma is not None else 1.0 / X.shape[1]
        self.X_ = X
        self._duals: list[tuple[np.ndarray, float]] = []
        if len(self.classes_) == 1:
            return self
        K = _rbf_kernel(X, X, self.gamma_)
        for label in self.classes_:
            y_bin = np.where(y == label, 1.0, -1.0)
            smo = _BinarySmo(K, y_bin, self.c, self.tol)
            smo.solve()
            self._duals.append((smo.alpha * y_bin, smo.b))
        return self

    def decision_function(self, X) -> np.ndarray:
        X = _feature_matrix(X)
        if len(self.classes_) == 1:
            return np.zeros((X.shape[0], 1))
        K = _rbf_kernel(X, self.X_, self.gamma_)
        cols = [K @ coef + b for coef, b in self._duals]
        return np.stack(cols, axis=1)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


def train_singleton_classifier(features, labels, cfg: ClassifierConfig = ClassifierConfig(),
                               num_classes: int | None = None):
    """Train the configured singleton classifier on tracklet features.

    Every expected label must be represented at least once.
    """
    X = _feature_matrix(features)
    y = np.asarray(labels, dtype=np.int64)
    present = set(np.unique(y).tolist())
    expected = set(range(num_classes)) if num_classes is not None else present
    missing = sorted(expected - present)
    if missing:
        raise ValidationError(f"no training features for labels {missing}")
    if cfg.strategy == "svm":
        model = RbfSvmClassifier(c=cfg.svm_c, gamma=cfg.svm_gamma, tol=cfg.svm_tol)
    else:
        model = NearestCentroidClassifier()
    return model.fit(X, y)


def assign_singletons(model, embeddings) -> np.ndarray:
    """Predict identity labels for singleton detection embeddings."""
    X = _feature_matrix(embeddings)
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return model.predict(X).astype(np.int64)


def confusion_matrix(predicted, truth) -> tuple[np.ndarray, float]:
    """Confusion counts after majority-overlap label alignment.

    Rows are ground-truth identities, columns are aligned predictions;
    the column permutation maximizes the total overlap (Hungarian
    assignment), and accuracy is the aligned trace over the total count.
    """
    pred = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    _require(pred.shape == true.shape and pred.ndim == 1,
             "predicted and truth must be equal-length 1-D arrays")
    _require(pred.size > 0, "confusion_matrix needs at least one pair")
    _require(bool(pred.min() >= 0 and true.min() >= 0), "labels must be non-negative")
    k = int(max(pred.max(), true.max())) + 1
    counts = np.bincount(true * k + pred, minlength=k * k).reshape(k, k)
    rows, cols = linear_sum_assignment(-counts)
    perm = np.empty(k, dtype=np.int64)
    perm[rows] = cols
    aligned = counts[:, perm]
    accuracy = float(np.trace(aligned)) / float(pred.size)
    return aligned, accuracy
