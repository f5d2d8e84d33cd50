"""Weighted random forests for regression and classification.

Each tree draws a uniform bootstrap of N indices (with replacement). Sample
weights enter only the split criterion (weighted MSE or weighted Gini) and the
leaf statistics, never the bootstrap. Per-tree randomness comes from the seed
stream ``(seed, tree_index)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _tree
from .datamodel import CategoryEncoder, Dataset, FeatureSet, as_weights

FORMAT = "sigmap-forest"
VERSION = 1


@dataclass(frozen=True)
class ForestHyper:
    n_trees: int = 20
    max_depth: int = 20
    min_samples_leaf: int = 1
    max_features: str | int | None = None  # "all", "sqrt", an int, or None for the task default
    task: str = "regression"
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("need n_trees, max_depth, min_samples_leaf >= 1")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if isinstance(self.max_features, str) and self.max_features not in ("all", "sqrt"):
            raise ValueError(f"max_features must be 'all', 'sqrt' or an int, got {self.max_features!r}")

    def n_split_features(self, n_features: int) -> int:
        mf = self.max_features
        if mf is None:
            mf = "all" if self.task == "regression" else "sqrt"
        if mf == "all":
            return n_features
        if mf == "sqrt":
            return max(1, int(np.sqrt(n_features)))
        return int(min(max(1, mf), n_features))


@dataclass(frozen=True)
class DecisionTree:
    feature: np.ndarray    # split feature, -1 for leaves
    threshold: np.ndarray  # numeric threshold or category code
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray      # (n_nodes, 2) mean/var, or (n_nodes, n_classes) proportions
    n_samples: np.ndarray  # bootstrap records reaching the node
    weight: np.ndarray     # total sample weight at the node
    depth: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.left == _tree.LEAF

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def apply(self, X: np.ndarray, is_cat: np.ndarray) -> np.ndarray:
        return _tree.apply_tree(X, is_cat, self.feature, self.threshold, self.left, self.right)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("feature", "threshold", "left", "right", "value", "n_samples", "weight", "depth")}

    @classmethod
    def from_dict(cls, d) -> "DecisionTree":
        ints = {"feature", "left", "right", "n_samples", "depth"}
        return cls(**{k: np.asarray(v, dtype=np.int64 if k in ints else float) for k, v in d.items()})


@dataclass
class ForestModel:
    hyper: ForestHyper
    trees: list
    is_cat: np.ndarray
    classes: np.ndarray | None = None
    encoder: CategoryEncoder | None = None
    feature_set: FeatureSet | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return len(self.is_cat)

    def _check(self, X):
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def tree_outputs(self, X) -> np.ndarray:
        """(n_trees, n_queries) leaf means (regression only)."""
        X = self._check(X)
        return np.stack([t.value[t.apply(X, self.is_cat), 0] for t in self.trees])

    def predict_mean(self, X) -> np.ndarray:
        if self.hyper.task != "regression":
            raise ValueError("predict_mean needs a regression forest")
        return self.tree_outputs(X).mean(axis=0)

    def predict_std(self, X) -> np.ndarray:
        """Population standard deviation of the per-tree predictions."""
        if self.hyper.task != "regression":
            raise ValueError("predict_std needs a regression forest")
        return self.tree_outputs(X).std(axis=0)

    def predict_proba(self, X) -> np.ndarray:
        if self.hyper.task != "classification":
            raise ValueError("predict_proba needs a classification forest")
        X = self._check(X)
        acc = np.zeros((X.shape[0], len(self.classes)))
        for t in self.trees:
            acc += t.value[t.apply(X, self.is_cat)]
        p = acc / len(self.trees)
        return p / p.sum(axis=1, keepdims=True)

    def predict_class(self, X) -> np.ndarray:
        # argmax takes the first maximum: ties go to the lower class label
        return self.classes[np.argmax(self.predict_proba(X), axis=1)]

    def predict(self, X) -> np.ndarray:
        return self.predict_mean(X) if self.hyper.task == "regression" else self.predict_class(X)

    def count_unseen(self, X) -> int:
        """Categorical codes in ``X`` that the training encoder never saw (routed right)."""
        X = self._check(X)
        return int((X[:, self.is_cat] == CategoryEncoder.UNSEEN).sum())

    def construction_variance(self, X_holdout, y_holdout) -> float:
        """Held-out residual variance, an estimate of the forest's own error term."""
        r = np.asarray(y_holdout, dtype=float) - self.predict_mean(X_holdout)
        v = float(np.mean(r ** 2))
        self.diagnostics["construction_variance"] = v
        return v

    # dataset-level helpers
    def encode(self, d: Dataset) -> np.ndarray:
        ds = d if self.feature_set is None else d.with_feature_set(self.feature_set)
        return ds.feature_matrix(self.encoder)

    def predict_dataset(self, d: Dataset) -> np.ndarray:
        X = self.encode(d)
        self.diagnostics["unseen_categories"] = self.count_unseen(X)
        return self.predict(X)

    # serialization
    def to_json(self) -> str:
        doc = {
            "format": FORMAT, "version": VERSION,
            "hyper": asdict(self.hyper),
            "is_cat": self.is_cat.tolist(),
            "classes": None if self.classes is None else self.classes.tolist(),
            "encoder": None if self.encoder is None else self.encoder.to_dict(),
            "feature_set": None if self.feature_set is None else self.feature_set.value,
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        doc = json.loads(text)
        if doc.get("format") != FORMAT:
            raise ValueError("not a sigmap forest file")
        if doc.get("version") != VERSION:
            raise ValueError(f"unsupported forest format version {doc.get('version')}")
        return cls(
            hyper=ForestHyper(**doc["hyper"]),
            trees=[DecisionTree.from_dict(t) for t in doc["trees"]],
            is_cat=np.asarray(doc["is_cat"], dtype=bool),
            classes=None if doc["classes"] is None else np.asarray(doc["classes"], dtype=float),
            encoder=None if doc["encoder"] is None else CategoryEncoder.from_dict(doc["encoder"]),
            feature_set=None if doc["feature_set"] is None else FeatureSet(doc["feature_set"]),
        )


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(tree_index)])


def bootstrap_indices(n: int, seed: int, n_trees: int) -> list[np.ndarray]:
    return [tree_rng(seed, t).integers(0, n, n) for t in range(n_trees)]


def fit(X, y, w=None, hp: ForestHyper = ForestHyper(), is_cat=None, *, bootstrap=None,
        feature_keys=None, classes=None, encoder=None, feature_set=None) -> ForestModel:
    """Grow a forest.

    ``bootstrap`` (one index array per tree) and ``feature_keys`` (one
    ``(>= 2 * len(sample) + 1, n_features)`` array per tree) override the
    seeded draws; they exist so tests can replay index streams on sub-problems.
    """
    X = np.ascontiguousarray(np.asarray(X, dtype=float))
    if X.ndim != 2:
        raise ValueError("X must be 2-D")
    y = np.asarray(y, dtype=float)
    n, n_features = X.shape
    if y.shape != (n,):
        raise ValueError("y must align with X")
    if n < 2 * hp.min_samples_leaf:
        raise ValueError(f"need at least {2 * hp.min_samples_leaf} training records, got {n}")
    wv = np.ascontiguousarray(as_weights(w, n), dtype=float)
    is_cat = np.zeros(n_features, dtype=bool) if is_cat is None else np.asarray(is_cat, dtype=bool)

    if hp.task == "classification":
        if not np.all(y == np.round(y)):
            raise ValueError("classification labels must be integers")
        cls = np.unique(y) if classes is None else np.asarray(sorted(classes), dtype=float)
        missing = set(np.unique(y)) - set(cls)
        if missing:
            raise ValueError(f"labels {sorted(missing)} not among classes")
        y_enc = np.searchsorted(cls, y).astype(float)
        n_classes = len(cls)
    else:
        cls = None
        y_enc = y
        n_classes = 0

    mf = hp.n_split_features(n_features)
    trees = []
    for t in range(hp.n_trees):
        rng = tree_rng(hp.seed, t)
        sample = rng.integers(0, n, n) if bootstrap is None else np.asarray(bootstrap[t], dtype=np.int64)
        keys = rng.random((2 * len(sample) + 1, n_features)) if feature_keys is None else feature_keys[t]
        parts = _tree.build_tree(X, y_enc, wv, sample.astype(np.int64), is_cat, hp.max_depth,
                                 hp.min_samples_leaf, mf, n_classes, np.ascontiguousarray(keys))
        trees.append(DecisionTree(*parts))
    return ForestModel(hp, trees, is_cat, cls, encoder, feature_set)


def fit_dataset(d: Dataset, hp: ForestHyper = ForestHyper(), w=None, classes=None) -> ForestModel:
    X = d.feature_matrix()
    return fit(X, d.labels, w, hp, d.feature_set.categorical, classes=classes,
               encoder=d.encoder, feature_set=d.feature_set)
