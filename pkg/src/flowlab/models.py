"""From-scratch supervised baselines: CART decision tree, bagged random
forest, and brute-force k-NN, plus exhaustive grid search over k-fold CV.

Everything is deterministic: split ties break on the lowest feature index
then lowest threshold, distance ties on the lowest train row index, vote
ties on the lowest class index, and all randomness flows from explicit
seeds.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, FitError, LeakageError, ShapeError
from . import evaluation
from .partition import kfold


def _encode_labels(y) -> tuple[np.ndarray, list[str]]:
    classes = sorted({str(v) for v in y})
    index = {c: i for i, c in enumerate(classes)}
    return np.asarray([index[str(v)] for v in y], dtype=np.int64), classes


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - (p ** 2).sum())


@dataclass
class TreeNode:
    impurity: float
    n_samples: int
    probabilities: np.ndarray               # class-frequency vector
    feature: int = -1                       # -1 for leaves
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    # sample-weighted impurity decrease credited to self.feature
    importance: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    @property
    def majority(self) -> int:
        return int(np.argmax(self.probabilities))

    def to_dict(self) -> dict:
        d = {"impurity": self.impurity, "n": self.n_samples,
             "probs": self.probabilities.tolist()}
        if not self.is_leaf:
            d.update(feature=self.feature, threshold=self.threshold,
                     importance=self.importance,
                     left=self.left.to_dict(), right=self.right.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        node = cls(impurity=d["impurity"], n_samples=d["n"],
                   probabilities=np.asarray(d["probs"]))
        if "feature" in d:
            node.feature = d["feature"]
            node.threshold = d["threshold"]
            node.importance = d.get("importance", 0.0)
            node.left = cls.from_dict(d["left"])
            node.right = cls.from_dict(d["right"])
        return node


@dataclass
class TreeParams:
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    min_impurity_decrease: float = 0.0


@dataclass
class TreeModel:
    root: TreeNode
    classes: list[str]
    n_features: int

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, "
                             f"got shape {X.shape}")
        out = np.empty((len(X), len(self.classes)))
        for i, x in enumerate(X):
            node = self.root
            while not node.is_leaf:
                node = node.left if x[node.feature] <= node.threshold \
                    else node.right
            out[i] = node.probabilities
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        probs = self.predict_proba(X)
        return np.asarray([self.classes[i] for i in probs.argmax(axis=1)],
                          dtype=object)


def _best_split(X: np.ndarray, y: np.ndarray, n_classes: int,
                feature_ids: Sequence[int]) -> Optional[tuple]:
    """(weighted-impurity decrease, feature, threshold) or None.

    Per-feature sorted scan with prefix class counts; ties resolved by
    (lowest feature id, lowest threshold) via strict-improvement compare
    over features iterated in ascending order.
    """
    n = len(y)
    parent_counts = np.bincount(y, minlength=n_classes)
    parent_imp = _gini(parent_counts)
    best = None
    for f in sorted(feature_ids):
        xs = X[:, f]
        order = np.argsort(xs, kind="stable")
        xs_sorted = xs[order]
        ys_sorted = y[order]
        left = np.zeros(n_classes)
        right = parent_counts.astype(np.float64).copy()
        for i in range(n - 1):
            c = ys_sorted[i]
            left[c] += 1
            right[c] -= 1
            if xs_sorted[i] == xs_sorted[i + 1]:
                continue
            nl = i + 1
            nr = n - nl
            dec = parent_imp - (nl * _gini(left) + nr * _gini(right)) / n
            thr = (xs_sorted[i] + xs_sorted[i + 1]) / 2.0
            if best is None or dec > best[0] + 1e-15:
                best = (float(dec), int(f), float(thr))
    return best


def _grow(X: np.ndarray, y: np.ndarray, n_classes: int, depth: int,
          params: TreeParams, n_total: int,
          rng: Optional[np.random.Generator], m: Optional[int]) -> TreeNode:
    counts = np.bincount(y, minlength=n_classes)
    node = TreeNode(impurity=_gini(counts), n_samples=len(y),
                    probabilities=counts / len(y))
    if (node.impurity == 0.0
            or len(y) < params.min_samples_split
            or (params.max_depth is not None and depth >= params.max_depth)):
        return node
    if m is not None and rng is not None and m < X.shape[1]:
        feature_ids = np.sort(rng.permutation(X.shape[1])[:m])
    else:
        feature_ids = range(X.shape[1])
    found = _best_split(X, y, n_classes, feature_ids)
    if found is None:
        return node
    dec, f, thr = found
    if dec <= 0.0 or dec < params.min_impurity_decrease:
        return node
    mask = X[:, f] <= thr
    node.feature = f
    node.threshold = thr
    node.importance = (len(y) / n_total) * dec
    node.left = _grow(X[mask], y[mask], n_classes, depth + 1, params,
                      n_total, rng, m)
    node.right = _grow(X[~mask], y[~mask], n_classes, depth + 1, params,
                       n_total, rng, m)
    return node


def tree_fit(X: np.ndarray, y, params: Optional[TreeParams] = None
             ) -> TreeModel:
    """Greedy CART with Gini decrease; thresholds at midpoints."""
    params = params or TreeParams()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise FitError("empty or non-2D training matrix")
    if len(X) != len(y):
        raise ShapeError("X and y length mismatch")
    y_enc, classes = _encode_labels(y)
    root = _grow(X, y_enc, len(classes), 0, params, len(y_enc), None, None)
    return TreeModel(root=root, classes=classes, n_features=X.shape[1])


def tree_predict(model: TreeModel, X) -> tuple[np.ndarray, np.ndarray]:
    probs = model.predict_proba(np.asarray(X, dtype=np.float64))
    return model.predict(X), probs


@dataclass
class ForestModel:
    trees: list[TreeModel]
    classes: list[str]
    n_features: int
    m: int
    seed: int
    oob_masks: list[np.ndarray] = field(default_factory=list)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, "
                             f"got shape {X.shape}")
        acc = np.zeros((len(X), len(self.classes)))
        for tree in self.trees:
            # trees share the forest-level class vocabulary
            acc += tree.predict_proba(X)
        return acc / len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        probs = self.predict_proba(X)
        return np.asarray([self.classes[i] for i in probs.argmax(axis=1)],
                          dtype=object)


@dataclass
class ForestParams:
    n_trees: int = 50
    m: Optional[int] = None          # features per split; default ceil(sqrt)
    tree: TreeParams = field(default_factory=TreeParams)
    bootstrap: bool = True


def forest_fit(X: np.ndarray, y, params: Optional[ForestParams] = None,
               seed: int = 0) -> ForestModel:
    params = params or ForestParams()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise FitError("empty or non-2D training matrix")
    y_enc, classes = _encode_labels(y)
    n, d = X.shape
    m = params.m if params.m is not None else max(1, math.ceil(math.sqrt(d)))
    if not (1 <= m <= d):
        raise ConfigError(f"m={m} out of [1, {d}]")
    rng = np.random.default_rng(seed)
    trees, oob = [], []
    for _ in range(params.n_trees):
        tree_rng = np.random.default_rng(rng.integers(2 ** 63))
        if params.bootstrap:
            idx = tree_rng.integers(0, n, size=n)
        else:
            idx = np.arange(n)
        mask = np.ones(n, dtype=bool)
        mask[np.unique(idx)] = False
        root = _grow(X[idx], y_enc[idx], len(classes), 0, params.tree,
                     len(idx), tree_rng, m if m < d else None)
        trees.append(TreeModel(root=root, classes=classes, n_features=d))
        oob.append(mask)
    return ForestModel(trees=trees, classes=classes, n_features=d, m=m,
                       seed=seed, oob_masks=oob)


def forest_predict(model: ForestModel, X) -> tuple[np.ndarray, np.ndarray]:
    probs = model.predict_proba(np.asarray(X, dtype=np.float64))
    return model.predict(X), probs


@dataclass
class KnnModel:
    X: np.ndarray
    y: np.ndarray           # encoded
    classes: list[str]
    k: int

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def predict_proba(self, Q: np.ndarray) -> np.ndarray:
        Q = np.asarray(Q, dtype=np.float64)
        if Q.ndim != 2 or Q.shape[1] != self.X.shape[1]:
            raise ShapeError(f"expected {self.X.shape[1]} features, "
                             f"got shape {Q.shape}")
        out = np.empty((len(Q), len(self.classes)))
        for i, q in enumerate(Q):
            d2 = ((self.X - q) ** 2).sum(axis=1)
            # stable sort: equal distances resolved by lower train index
            nn = np.argsort(d2, kind="stable")[:self.k]
            votes = np.bincount(self.y[nn], minlength=len(self.classes))
            out[i] = votes / self.k
        return out

    def predict(self, Q: np.ndarray) -> np.ndarray:
        probs = self.predict_proba(Q)
        return np.asarray([self.classes[i] for i in probs.argmax(axis=1)],
                          dtype=object)


def knn_fit(X: np.ndarray, y, k: int) -> KnnModel:
    X = np.asarray(X, dtype=np.float64)
    if k < 1 or k > len(X):
        raise ConfigError(f"k={k} out of [1, {len(X)}]")
    y_enc, classes = _encode_labels(y)
    return KnnModel(X=X, y=y_enc, classes=classes, k=k)


def knn_predict(model: KnnModel, Q) -> tuple[np.ndarray, np.ndarray]:
    probs = model.predict_proba(np.asarray(Q, dtype=np.float64))
    return model.predict(Q), probs


# -- serialization ----------------------------------------------------------------

def model_to_json(model) -> str:
    if isinstance(model, TreeModel):
        d = {"kind": "tree", "classes": model.classes,
             "n_features": model.n_features, "root": model.root.to_dict()}
    elif isinstance(model, ForestModel):
        d = {"kind": "forest", "classes": model.classes,
             "n_features": model.n_features, "m": model.m,
             "seed": model.seed,
             "trees": [t.root.to_dict() for t in model.trees]}
    elif isinstance(model, KnnModel):
        d = {"kind": "knn", "classes": model.classes, "k": model.k,
             "X": model.X.tolist(), "y": model.y.tolist()}
    else:
        raise ConfigError(f"unknown model type {type(model).__name__}")
    return json.dumps(d, sort_keys=True)


def model_from_json(text: str):
    d = json.loads(text)
    if d["kind"] == "tree":
        return TreeModel(root=TreeNode.from_dict(d["root"]),
                         classes=d["classes"], n_features=d["n_features"])
    if d["kind"] == "forest":
        trees = [TreeModel(root=TreeNode.from_dict(t), classes=d["classes"],
                           n_features=d["n_features"]) for t in d["trees"]]
        return ForestModel(trees=trees, classes=d["classes"],
                           n_features=d["n_features"], m=d["m"],
                           seed=d["seed"])
    if d["kind"] == "knn":
        return KnnModel(X=np.asarray(d["X"], dtype=np.float64),
                        y=np.asarray(d["y"], dtype=np.int64),
                        classes=d["classes"], k=d["k"])
    raise ConfigError(f"unknown model kind {d['kind']!r}")


# -- grid search ----------------------------------------------------------------

@dataclass
class HyperGrid:
    values: dict[str, list]            # param name -> candidate values
    metric: str = "accuracy"
    cv_folds: int = 3

    def __post_init__(self):
        if not self.values or any(not v for v in self.values.values()):
            raise ConfigError("grid must be nonempty")
        if self.metric not in evaluation.METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}; known: "
                              f"{sorted(evaluation.METRICS)}")


def _fit_by_kind(kind: str, X, y, params: dict, seed: int):
    if kind == "tree":
        return tree_fit(X, y, TreeParams(
            max_depth=params.get("max_depth"),
            min_samples_split=params.get("min_samples_split", 2),
            min_impurity_decrease=params.get("min_impurity_decrease", 0.0)))
    if kind == "forest":
        return forest_fit(X, y, ForestParams(
            n_trees=params.get("n_trees", 50),
            m=params.get("m"),
            tree=TreeParams(
                max_depth=params.get("max_depth"),
                min_samples_split=params.get("min_samples_split", 2),
                min_impurity_decrease=params.get("min_impurity_decrease", 0.0))),
            seed=seed)
    if kind == "knn":
        return knn_fit(X, y, params.get("k", 5))
    raise ConfigError(f"unknown model kind {kind!r}")


def _simplicity(kind: str, params: dict) -> tuple:
    # tie-break toward the simpler model
    return (params.get("n_trees", 0), params.get("max_depth") or 0,
            params.get("k", 0),
            tuple(sorted(params.items(), key=lambda kv: kv[0])).__repr__())


def grid_search(design, grid: HyperGrid, model_kind: str, seed: int = 0,
                preprocess=None) -> tuple[dict, list[dict]]:
    """Exhaustive k-fold CV over the grid on the design (train+val) set.

    `design` is a Dataset that must carry no test-tagged rows. `preprocess`,
    if given, is called per fold as preprocess(train_ds, val_ds) ->
    (train_ds, val_ds) so fold-local transforms are refit each time.
    Returns (best entry, full cv table); the best entry carries the model
    refit on the whole design set.
    """
    if design.partitions is not None and (design.partitions == "test").any():
        raise LeakageError("grid search design set contains test rows")
    score_fn = evaluation.METRICS[grid.metric]
    folds = kfold(design, grid.cv_folds, seed=seed,
                  allow_temporal_override=True)
    table = []
    names = sorted(grid.values)
    for combo in itertools.product(*(grid.values[n] for n in names)):
        params = dict(zip(names, combo))
        scores = []
        for train_idx, val_idx in folds:
            tr = design.subset(train_idx)
            va = design.subset(val_idx)
            if preprocess is not None:
                tr, va = preprocess(tr, va)
            Xtr, _ = tr.feature_matrix()
            Xva, _ = va.feature_matrix()
            model = _fit_by_kind(model_kind, Xtr, tr.labels(), params, seed)
            pred = model.predict(Xva)
            scores.append(score_fn(va.labels(), pred))
        mean = float(np.mean(scores))
        std = float(np.std(scores))
        table.append({"params": params, "mean_score": mean,
                      "std_score": std, "fold_scores": scores})
    best = min(table, key=lambda e: (-e["mean_score"],
                                     _simplicity(model_kind, e["params"])))
    full = design if preprocess is None else preprocess(design, design)[0]
    Xd, _ = full.feature_matrix()
    best = dict(best)
    best["model"] = _fit_by_kind(model_kind, Xd, full.labels(),
                                 best["params"], seed)
    return best, table
