"""Multi-class gradient-boosted decision trees for scene classification.

One boosting stream per class: every round fits a depth-limited regression
tree per class to the softmax cross-entropy residuals ``y_k - p_k`` and adds
its damped Newton leaf values to that class score. Splits are chosen by
squared-error reduction and use ``x <= threshold`` with thresholds taken
from training values, so predictions only depend on the rank order of each
feature column.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import softmax
from .errors import ArtifactError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAX_LEAF_STEP = 4.0
CONSTANT_LOGIT_GAP = 30.0


@dataclass
class DecisionTree:
    """Flat array tree; ``feature == -1`` marks a leaf. Nodes are in preorder."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth: int

    @property
    def n_nodes(self):
        return len(self.feature)

    def predict(self, X):
        X = np.atleast_2d(X)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        for _ in range(self.max_depth):
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                break
            go_left = X[rows, np.where(internal, f, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)
        return self.value[node]

    def scaled(self, factor):
        return DecisionTree(self.feature, self.threshold, self.left, self.right,
                            self.value * factor, self.max_depth)


class _TreeBuilder:
    def __init__(self, X, sorted_idx, max_depth, min_samples_leaf, n_classes):
        self.X = X
        self.sorted_idx = sorted_idx
        self.max_depth = max_depth
        self.min_leaf = min_samples_leaf
        self.newton_scale = (n_classes - 1) / n_classes

    def build(self, residual, hessian):
        self.r = residual
        self.h = hessian
        self.nodes = []
        in_node = np.ones(len(self.X), dtype=bool)
        self._grow(in_node, 0)
        arr = np.array(self.nodes, dtype=object)
        return DecisionTree(
            feature=arr[:, 0].astype(np.int64),
            threshold=arr[:, 1].astype(float),
            left=arr[:, 2].astype(np.int64),
            right=arr[:, 3].astype(np.int64),
            value=arr[:, 4].astype(float),
            max_depth=self.max_depth,
        )

    def _leaf_value(self, mask):
        num = self.r[mask].sum()
        den = self.h[mask].sum()
        if den <= 1e-12:
            return 0.0
        return float(np.clip(self.newton_scale * num / den, -MAX_LEAF_STEP, MAX_LEAF_STEP))

    def _best_split(self, in_node):
        n = int(in_node.sum())
        if n < 2 * self.min_leaf:
            return None
        total = self.r[in_node].sum()
        base = total * total / n
        best = None
        for f, order in enumerate(self.sorted_idx):
            idx = order[in_node[order]]
            xs = self.X[idx, f]
            cs = np.cumsum(self.r[idx])[:-1]
            n_left = np.arange(1, n)
            valid = (xs[:-1] < xs[1:]) & (n_left >= self.min_leaf) & (n - n_left >= self.min_leaf)
            if not valid.any():
                continue
            gain = cs**2 / n_left + (total - cs) ** 2 / (n - n_left) - base
            gain = np.where(valid, gain, -np.inf)
            pos = int(np.argmax(gain))
            if gain[pos] > 1e-12 and (best is None or gain[pos] > best[0]):
                best = (gain[pos], f, xs[pos])
        return best

    def _grow(self, in_node, depth):
        me = len(self.nodes)
        self.nodes.append([-1, 0.0, -1, -1, 0.0])
        split = self._best_split(in_node) if depth < self.max_depth else None
        if split is None:
            self.nodes[me][4] = self._leaf_value(in_node)
            return me
        _, f, thr = split
        go_left = self.X[:, f] <= thr
        left = self._grow(in_node & go_left, depth + 1)
        right = self._grow(in_node & ~go_left, depth + 1)
        self.nodes[me][:4] = [f, thr, left, right]
        return me


@dataclass
class SceneClassifier:
    k: int
    base_scores: np.ndarray
    trees: list = field(default_factory=list)  # trees[round][class]
    learning_rate: float = 0.1
    max_depth: int = 4

    @property
    def n_rounds(self):
        return len(self.trees)

    def decision_function(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        scores = np.tile(self.base_scores, (len(X), 1))
        for round_trees in self.trees:
            for c, tree in enumerate(round_trees):
                scores[:, c] += tree.predict(X)
        return scores

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        """1-based labels; argmax ties resolve to the lowest class."""
        return np.argmax(self.predict_proba(X), axis=1) + 1

    def save(self, path):
        lines = [
            f"scene_classifier v{FORMAT_VERSION}",
            f"k {self.k}",
            f"rounds {self.n_rounds}",
            f"depth {self.max_depth}",
            f"learning_rate {self.learning_rate!r}",
            "base_scores " + " ".join(repr(float(v)) for v in self.base_scores),
        ]
        for r, round_trees in enumerate(self.trees):
            for c, t in enumerate(round_trees):
                lines.append(f"tree {r} {c} {t.n_nodes}")
                for i in range(t.n_nodes):
                    lines.append(
                        f"node {int(t.feature[i])} {float(t.threshold[i])!r} "
                        f"{int(t.left[i])} {int(t.right[i])} {float(t.value[i])!r}"
                    )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = [ln.split() for ln in fh if ln.strip()]
        if not lines or lines[0] != ["scene_classifier", f"v{FORMAT_VERSION}"]:
            raise ArtifactError(f"{path}: not a v{FORMAT_VERSION} scene classifier")
        head = {ln[0]: ln[1:] for ln in lines[1:6]}
        k = int(head["k"][0])
        depth = int(head["depth"][0])
        model = cls(
            k=k,
            base_scores=np.array([float(v) for v in head["base_scores"]]),
            learning_rate=float(head["learning_rate"][0]),
            max_depth=depth,
        )
        pos = 6
        rounds = []
        while pos < len(lines):
            _, r, c, n_nodes = lines[pos]
            nodes = np.array([[float(v) for v in ln[1:]] for ln in lines[pos + 1: pos + 1 + int(n_nodes)]])
            pos += 1 + int(n_nodes)
            tree = DecisionTree(
                feature=nodes[:, 0].astype(np.int64), threshold=nodes[:, 1],
                left=nodes[:, 2].astype(np.int64), right=nodes[:, 3].astype(np.int64),
                value=nodes[:, 4], max_depth=depth,
            )
            if int(c) == 0:
                rounds.append([])
            rounds[int(r)].append(tree)
        model.trees = rounds
        if model.n_rounds != int(head["rounds"][0]):
            raise ArtifactError(f"{path}: truncated tree listing")
        return model


@dataclass
class TrainReport:
    final_train_ce: float
    final_val_ce: float
    val_accuracy: float
    confusion: np.ndarray
    train_ce_history: list = field(default_factory=list)
    val_ce_history: list = field(default_factory=list)
    n_rounds: int = 0
    warning: str = ""

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "train_ce", "val_ce"])
            for i, tr in enumerate(self.train_ce_history):
                va = self.val_ce_history[i] if i < len(self.val_ce_history) else ""
                w.writerow([i, repr(tr), repr(va) if va != "" else ""])

    def confusion_text(self):
        return format_confusion(self.confusion)


@dataclass(frozen=True)
class ClassifierParams:
    max_depth: int = 4
    n_rounds: int = 100
    learning_rate: float = 0.1
    min_samples_leaf: int = 5
    patience: int = 10
    base_score: str = "prior"  # or "uniform"
    seed: int = 0


def cross_entropy(scores, labels0):
    """Mean negative log-likelihood of 0-based labels under softmax(scores)."""
    if len(labels0) == 0:
        return float("nan")
    shifted = scores - scores.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(logz - shifted[np.arange(len(labels0)), labels0]))


def stratified_split(labels, val_fraction, seed):
    """Per-class seeded shuffle; the first floor(frac * n_c) of each class go to validation."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    val = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(len(members))]
        val.extend(members[: int(math.floor(val_fraction * len(members)))].tolist())
    is_val = np.zeros(len(labels), dtype=bool)
    is_val[val] = True
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


def _label_array(labels):
    return np.array([getattr(lab, "label", lab) for lab in labels], dtype=int)


def constant_classifier(label, k):
    base = np.full(k, -CONSTANT_LOGIT_GAP)
    base[label - 1] = 0.0
    return SceneClassifier(k=k, base_scores=base)


def train(features, labels, val_fraction=0.2, params=None, k=None):
    """Fit a boosted classifier on (features, 1-based labels).

    Returns ``(SceneClassifier, TrainReport)``. With a single distinct label a
    constant classifier is returned and the report carries a warning.
    """
    params = params or ClassifierParams()
    if not 0 < val_fraction < 0.5:
        raise ValueError("val_fraction must lie in (0, 0.5)")
    X = np.asarray(features, dtype=float)
    y = _label_array(labels)
    k = k or int(y.max())
    y0 = y - 1

    present = np.unique(y)
    if len(present) == 1:
        model = constant_classifier(int(present[0]), k)
        scores = model.decision_function(X)
        ce = cross_entropy(scores, y0)
        conf = confusion_from_pairs(y, model.predict(X), k)
        msg = f"single-class training set (class {present[0]}); constant classifier"
        log.warning(msg)
        return model, TrainReport(ce, ce, 1.0, conf, [ce], [ce], 0, msg)

    tr, va = stratified_split(y, val_fraction, params.seed)
    Xtr, ytr, Xva, yva = X[tr], y0[tr], X[va], y0[va]
    Y = np.eye(k)[ytr]

    if params.base_score == "uniform":
        base = np.zeros(k)
    else:
        counts = np.bincount(ytr, minlength=k)
        base = np.log((counts + 1.0) / (len(ytr) + k))
    model = SceneClassifier(k=k, base_scores=base, learning_rate=params.learning_rate,
                            max_depth=params.max_depth)

    sorted_idx = [np.argsort(Xtr[:, f], kind="stable") for f in range(X.shape[1])]
    builder = _TreeBuilder(Xtr, sorted_idx, params.max_depth, params.min_samples_leaf, k)
    F = np.tile(base, (len(Xtr), 1))
    Fva = np.tile(base, (len(Xva), 1))
    train_hist = [cross_entropy(F, ytr)]
    val_hist = [cross_entropy(Fva, yva)] if len(va) else []
    best_val, best_round, stale = (val_hist[0] if val_hist else math.inf), 0, 0

    for rnd in range(params.n_rounds):
        P = softmax(F, axis=1)
        trees = []
        U = np.zeros_like(F)
        for c in range(k):
            resid = Y[:, c] - P[:, c]
            tree = builder.build(resid, P[:, c] * (1.0 - P[:, c]))
            trees.append(tree)
            U[:, c] = tree.predict(Xtr)
        step = params.learning_rate
        for _ in range(30):
            cand = F + step * U
            ce = cross_entropy(cand, ytr)
            if ce <= train_hist[-1] + 1e-9:
                break
            step *= 0.5
        else:
            log.info("boosting stalled at round %d", rnd)
            break
        if ce > train_hist[-1] + 1e-9:
            raise AssertionError(f"training cross-entropy increased at round {rnd}")
        trees = [t.scaled(step) for t in trees]
        model.trees.append(trees)
        F = cand
        train_hist.append(ce)
        if len(va):
            Fva = Fva + np.column_stack([t.predict(Xva) for t in trees])
            vce = cross_entropy(Fva, yva)
            val_hist.append(vce)
            if vce < best_val - 1e-12:
                best_val, best_round, stale = vce, rnd + 1, 0
            else:
                stale += 1
                if stale >= params.patience:
                    break
        else:
            best_round = rnd + 1

    model.trees = model.trees[:best_round]
    train_hist = train_hist[: best_round + 1]
    val_hist = val_hist[: best_round + 1]
    if len(va):
        pred = model.predict(Xva)
        acc = float(np.mean(pred == yva + 1))
        conf = confusion_from_pairs(yva + 1, pred, k)
    else:
        acc = float(np.mean(model.predict(Xtr) == ytr + 1))
        conf = confusion_from_pairs(ytr + 1, model.predict(Xtr), k)
    report = TrainReport(
        final_train_ce=train_hist[-1],
        final_val_ce=val_hist[-1] if val_hist else float("nan"),
        val_accuracy=acc,
        confusion=conf,
        train_ce_history=train_hist,
        val_ce_history=val_hist,
        n_rounds=model.n_rounds,
    )
    return model, report


def predict_proba(model, z):
    z = z.as_array() if hasattr(z, "as_array") else z
    return model.predict_proba(z)[0]


def predict(model, z):
    z = z.as_array() if hasattr(z, "as_array") else z
    return int(model.predict(z)[0])


def confusion_from_pairs(true, pred, k):
    m = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(true, pred):
        m[int(t) - 1, int(p) - 1] += 1
    return m


def confusion_matrix(model, features, labels):
    """K x K counts, rows are true classes and columns predicted classes."""
    y = _label_array(labels)
    return confusion_from_pairs(y, model.predict(features), model.k)


def format_confusion(matrix):
    matrix = np.asarray(matrix)
    k = len(matrix)
    width = max(6, len(str(int(matrix.max()))) + 2 if matrix.size else 6)
    head = "true\\pred".ljust(10) + "".join(f"C{j + 1}".rjust(width) for j in range(k)) + "  recall"
    out = [head]
    for i in range(k):
        total = matrix[i].sum()
        recall = f"{matrix[i, i] / total:.3f}" if total else "  n/a"
        out.append(f"C{i + 1}".ljust(10) + "".join(str(int(v)).rjust(width) for v in matrix[i])
                   + "  " + recall)
    return "\n".join(out)
