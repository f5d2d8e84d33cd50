"""Data valuation: truncated Monte-Carlo Shapley, exact enumeration, leave-one-out,
and removal curves for cleaning and data minimization.

Training and test data are passed as ``(X, y)`` pairs or :class:`~sigmap.datamodel.Dataset`
objects. A learner is any object with ``task`` and
``fit_predict(X, y, Xq, seed) -> predictions``.
"""
from __future__ import annotations

import io
import json
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import forest
from .datamodel import Dataset
from .metrics import recall_of
from .reweight import ImportanceWeights, reweighted_error

EXACT_MAX_N = 12
PHI_EPS = 1e-12
_CACHE_MAX_N = 16


# metrics

@dataclass(frozen=True)
class PerfMetric:
    kind: str = "neg_mse"  # neg_mse | neg_reweighted | recall0 | accuracy
    weights: ImportanceWeights | np.ndarray | None = None  # test-set weights for neg_reweighted

    def __post_init__(self):
        if self.kind not in ("neg_mse", "neg_reweighted", "recall0", "accuracy"):
            raise ValueError(f"unknown metric {self.kind!r}")
        if self.kind == "neg_reweighted" and self.weights is None:
            raise ValueError("neg_reweighted needs test-set weights")

    def __call__(self, pred, truth) -> float:
        pred = np.asarray(pred, dtype=float)
        truth = np.asarray(truth, dtype=float)
        if self.kind == "neg_mse":
            return -float(np.mean((pred - truth) ** 2))
        if self.kind == "neg_reweighted":
            return -reweighted_error(pred, truth, self.weights)
        if self.kind == "recall0":
            return recall_of(pred, truth, 0.0)
        return float(np.mean(pred == truth))


# learners

def constant_prediction(y, task: str) -> float:
    y = np.asarray(y, dtype=float)
    if task == "regression":
        return float(np.mean(y))
    vals, counts = np.unique(y, return_counts=True)
    return float(vals[np.argmax(counts)])  # ties -> lower label


@dataclass(frozen=True)
class KnnLearner:
    """k-nearest-neighbor mean (regression) or majority vote (classification)."""
    k: int = 1
    task: str = "regression"
    seed_invariant = True

    def fit_predict(self, X, y, Xq, seed=0):
        k = min(self.k, len(y))
        _, nn = cKDTree(X).query(Xq, k=k)
        nn = np.asarray(nn).reshape(len(Xq), k)
        lab = np.asarray(y, dtype=float)[nn]
        if self.task == "regression":
            return lab.mean(axis=1)
        out = np.empty(len(Xq))
        for r in range(len(Xq)):
            out[r] = constant_prediction(lab[r], "classification")
        return out


@dataclass(frozen=True)
class MeanLearner:
    """Predicts the training mean (or mode) everywhere."""
    task: str = "regression"
    seed_invariant = True

    def fit_predict(self, X, y, Xq, seed=0):
        return np.full(len(Xq), constant_prediction(y, self.task))


@dataclass(frozen=True)
class ForestLearner:
    hyper: forest.ForestHyper
    is_cat: tuple | None = None
    classes: tuple | None = None
    seed_invariant = False

    @property
    def task(self):
        return self.hyper.task

    @classmethod
    def for_dataset(cls, d: Dataset, hyper: forest.ForestHyper, classes=None) -> "ForestLearner":
        return cls(hyper, tuple(d.feature_set.categorical.tolist()), None if classes is None else tuple(classes))

    def fit_predict(self, X, y, Xq, seed=0):
        if len(y) < 2 * self.hyper.min_samples_leaf:
            return np.full(len(Xq), constant_prediction(y, self.task))
        hp = forest.ForestHyper(self.hyper.n_trees, self.hyper.max_depth, self.hyper.min_samples_leaf,
                                self.hyper.max_features, self.hyper.task, int(seed))
        m = forest.fit(X, y, None, hp, self.is_cat, classes=self.classes)
        return m.predict(Xq)


def _xy(d, encoder=None):
    if isinstance(d, Dataset):
        return np.asarray(d.feature_matrix(encoder), dtype=float), np.asarray(d.labels, dtype=float)
    X, y = d
    return np.atleast_2d(np.asarray(X, dtype=float)), np.asarray(y, dtype=float)


def _split_xy(train, test):
    Xtr, ytr = _xy(train)
    Xte, yte = _xy(test, train.encoder if isinstance(train, Dataset) else None)
    if len(ytr) < 1:
        raise ValueError("empty training set")
    return Xtr, ytr, Xte, yte


class _Valuer:
    """V(S) for subsets of the training set, with an optional bitmask cache."""

    def __init__(self, Xtr, ytr, Xte, yte, learner, metric):
        self.X, self.y, self.Xq, self.yq = Xtr, ytr, Xte, yte
        self.learner, self.metric = learner, metric
        self.v_empty = metric(np.full(len(yte), constant_prediction(ytr, learner.task)), yte)
        self.cache = {} if (getattr(learner, "seed_invariant", False) and len(ytr) <= _CACHE_MAX_N) else None
        self.knn = None
        if isinstance(learner, KnnLearner) and self.cache is None:
            self.knn = np.sqrt(((Xtr[:, None, :] - Xte[None, :, :]) ** 2).sum(axis=2))  # (n_train, n_test)

    def __call__(self, idx, seed=0) -> float:
        if len(idx) == 0:
            return self.v_empty
        if self.cache is not None:
            key = int(np.bitwise_or.reduce(np.left_shift(1, np.asarray(idx, dtype=np.int64))))
            v = self.cache.get(key)
            if v is None:
                v = self._eval(idx, seed)
                self.cache[key] = v
            return v
        return self._eval(idx, seed)

    def _eval(self, idx, seed):
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        return float(self.metric(self.learner.fit_predict(self.X[idx], self.y[idx], self.Xq, seed), self.yq))


# exact and leave-one-out

def exact_shapley(train, test, learner, metric: PerfMetric, seed: int = 0) -> np.ndarray:
    """Enumeration over all subsets, ``phi_i = (1/n) sum_S [V(S+i) - V(S)] / C(n-1, |S|)``."""
    Xtr, ytr, Xte, yte = _split_xy(train, test)
    n = len(ytr)
    if n > EXACT_MAX_N:
        raise ValueError(f"exact Shapley is limited to {EXACT_MAX_N} training points, got {n}")
    val = _Valuer(Xtr, ytr, Xte, yte, learner, metric)
    V = np.empty(1 << n)
    for mask in range(1 << n):
        V[mask] = val([i for i in range(n) if mask >> i & 1], seed)
    sizes = np.array([bin(m).count("1") for m in range(1 << n)])
    phi = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        masks = np.array([m for m in range(1 << n) if not m & bit])
        wts = 1.0 / np.array([math.comb(n - 1, int(s)) for s in sizes[masks]])
        phi[i] = np.sum((V[masks | bit] - V[masks]) * wts) / n
    return phi


def loo_values(train, test, learner, metric: PerfMetric, seed: int = 0) -> np.ndarray:
    """``V(D) - V(D - {i})`` for every training point."""
    Xtr, ytr, Xte, yte = _split_xy(train, test)
    n = len(ytr)
    if n < 2:
        raise ValueError("leave-one-out needs at least two training points")
    val = _Valuer(Xtr, ytr, Xte, yte, learner, metric)
    full = val(np.arange(n), seed)
    allx = np.arange(n)
    return np.array([full - val(np.delete(allx, i), seed) for i in range(n)])


# truncated Monte Carlo

@dataclass(frozen=True)
class ShapleyConfig:
    convergence_tol: float = 0.05
    convergence_window: int = 100
    max_iter_factor: float = 2.0
    relaxed_tol: float = 0.30
    truncation_tol: float | None = None  # None -> 0.01 * |V(full)|
    seed: int = 0
    n_permutations: int | None = None    # fixed budget, disables the stopping rule
    hard_cap: int | None = None          # default 10 * max_iter_factor * N + window
    block: int = 32                      # permutations evaluated per parallel round

    def __post_init__(self):
        if not (self.convergence_tol > 0 and self.relaxed_tol > 0):
            raise ValueError("tolerances must be > 0")
        if self.convergence_window < 1:
            raise ValueError("convergence window must be >= 1")
        if self.truncation_tol is not None and self.truncation_tol < 0:
            raise ValueError("truncation tolerance must be >= 0")
        if self.n_permutations is not None and self.n_permutations < 1:
            raise ValueError("n_permutations must be >= 1")


@dataclass
class ShapleyResult:
    phi: np.ndarray
    iterations: int
    converged: bool
    stop_reason: str              # converged | relaxed | budget | cap
    history: list = field(default_factory=list)  # (iteration, phi snapshot)
    v_full: float = 0.0
    v_empty: float = 0.0

    def to_csv(self, locations=None) -> bytes:
        buf = io.StringIO()
        if locations is None:
            buf.write("index,phi\n")
            for i, p in enumerate(self.phi):
                buf.write(f"{i},{float(p)!r}\n")
        else:
            buf.write("index,phi,lat,lng\n")
            for i, (p, (la, ln)) in enumerate(zip(self.phi, np.asarray(locations))):
                buf.write(f"{i},{float(p)!r},{float(la)!r},{float(ln)!r}\n")
        return buf.getvalue().encode("utf-8")

    def to_geojson(self, locations) -> bytes:
        feats = [{"type": "Feature", "geometry": {"type": "Point", "coordinates": [float(ln), float(la)]},
                  "properties": {"index": i, "phi": float(p)}}
                 for i, (p, (la, ln)) in enumerate(zip(self.phi, np.asarray(locations)))]
        return json.dumps({"type": "FeatureCollection", "features": feats}, separators=(",", ":")).encode()


def permutation_stream(seed: int, t: int, n: int):
    """Permutation and learner seed for permutation index ``t``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(t)]))
    perm = rng.permutation(n)
    return perm, int(rng.integers(0, 2 ** 31 - 1))


def _knn_prefix_walk(val: _Valuer, perm, v_full, tol):
    """Marginals along ``perm`` for a kNN learner, updating neighbor sets incrementally.

    Equivalent to refitting on every prefix except that equidistant neighbors are
    kept in insertion order.
    """
    D, yq = val.knn, val.yq
    k = val.learner.k
    cls = val.learner.task == "classification"
    m = len(yq)
    nd = np.full((m, k), np.inf)
    nl = np.zeros((m, k))
    filled = np.zeros((m, k), dtype=bool)
    pred = np.zeros(m)
    labels = np.unique(val.y) if cls else None
    marg = np.zeros(len(perm))
    v_prev = val.v_empty
    for j, p in enumerate(perm):
        if tol > 0 and abs(v_prev - v_full) < tol:
            break
        worst = np.argmax(nd, axis=1)
        d = D[p]
        rows = np.flatnonzero(d < nd[np.arange(m), worst])
        nd[rows, worst[rows]] = d[rows]
        nl[rows, worst[rows]] = val.y[p]
        filled[rows, worst[rows]] = True
        if cls:
            counts = ((nl[rows, :, None] == labels) & filled[rows, :, None]).sum(axis=1)
            pred[rows] = labels[np.argmax(counts, axis=1)]  # ties -> lower label
        else:
            pred[rows] = (nl[rows] * filled[rows]).sum(axis=1) / filled[rows].sum(axis=1)
        v = float(val.metric(pred, yq))
        marg[p] = v - v_prev
        v_prev = v
    return marg


def _walk(val: _Valuer, n, seed, t, v_full, tol):
    perm, lseed = permutation_stream(seed, t, n)
    if val.knn is not None:
        return _knn_prefix_walk(val, perm, v_full, tol)
    marg = np.zeros(n)
    v_prev = val.v_empty
    for j in range(n):
        if tol > 0 and abs(v_prev - v_full) < tol:
            break
        v = val(perm[:j + 1], lseed)
        marg[perm[j]] = v - v_prev
        v_prev = v
    return marg


def _criterion(phi_now, phi_then) -> float:
    m = np.abs(phi_now) >= PHI_EPS
    if not m.any():
        return 0.0
    return float(np.mean(np.abs(phi_now[m] - phi_then[m]) / np.abs(phi_now[m])))


def tmc_shapley(train, test, learner, metric: PerfMetric, cfg: ShapleyConfig = ShapleyConfig(),
                threads: int = 1, history_every: int | None = None) -> ShapleyResult:
    """Truncated Monte-Carlo Shapley values.

    Permutation ``t`` is fully determined by ``(cfg.seed, t)`` and marginals are
    accumulated in permutation order, so the result does not depend on ``threads``.
    """
    Xtr, ytr, Xte, yte = _split_xy(train, test)
    n = len(ytr)
    if n < 2:
        raise ValueError("TMC-Shapley needs at least two training points")
    val = _Valuer(Xtr, ytr, Xte, yte, learner, metric)
    v_full = val(np.arange(n), cfg.seed)
    tol = 0.01 * abs(v_full) if cfg.truncation_tol is None else cfg.truncation_tol
    window = cfg.convergence_window
    max_iter = int(math.ceil(cfg.max_iter_factor * n))
    cap = cfg.n_permutations or cfg.hard_cap or int(10 * max_iter + window)
    every = history_every or window

    total = np.zeros(n)
    snaps = deque(maxlen=window + 1)  # running means of the last window+1 iterations
    history = []
    t = 0
    reason = "cap"
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        while t < cap:
            span = range(t, min(t + cfg.block, cap))
            if pool is not None:
                margs = list(pool.map(lambda s: _walk(val, n, cfg.seed, s, v_full, tol), span))
            else:
                margs = [_walk(val, n, cfg.seed, s, v_full, tol) for s in span]
            stop = False
            for marg in margs:
                total += marg
                t += 1
                phi = total / t
                snaps.append(phi)
                if t % every == 0:
                    history.append((t, phi.copy()))
                if cfg.n_permutations is not None:
                    if t >= cfg.n_permutations:
                        reason, stop = "budget", True
                        break
                    continue
                if t > window:
                    c = _criterion(phi, snaps[0])
                    if c < cfg.convergence_tol:
                        reason, stop = "converged", True
                        break
                    if t > max_iter and c < cfg.relaxed_tol:
                        reason, stop = "relaxed", True
                        break
            if stop:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    phi = total / t
    if not history or history[-1][0] != t:
        history.append((t, phi.copy()))
    return ShapleyResult(phi, t, reason == "converged", reason, history, v_full, val.v_empty)


# removal curves

@dataclass
class RemovalCurve:
    order: str
    batch: int
    rows: list  # dicts: step, fraction_removed, n_remaining, score, class/pred counts
    truncated: bool
    classes: tuple | None = None

    @property
    def fractions(self) -> np.ndarray:
        return np.array([r["fraction_removed"] for r in self.rows])

    @property
    def scores(self) -> np.ndarray:
        return np.array([r["score"] for r in self.rows])

    def to_csv(self) -> bytes:
        buf = io.StringIO()
        cols = ["step", "fraction_removed", "n_remaining", "score"]
        if self.classes is not None:
            cols += [f"train_n_{c:g}" for c in self.classes] + [f"pred_n_{c:g}" for c in self.classes]
        buf.write(",".join(cols) + "\n")
        for r in self.rows:
            vals = [r["step"], repr(r["fraction_removed"]), r["n_remaining"], repr(r["score"])]
            if self.classes is not None:
                vals += r["train_counts"] + r["pred_counts"]
            buf.write(",".join(str(v) for v in vals) + "\n")
        return buf.getvalue().encode("utf-8")


def removal_order(values, order: str, seed: int = 0) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if order == "low":
        return np.argsort(values, kind="stable")
    if order == "high":
        return np.argsort(-values, kind="stable")
    if order == "random":
        return np.random.default_rng(np.random.SeedSequence([int(seed), 7919])).permutation(len(values))
    raise ValueError(f"unknown removal order {order!r}")


def removal_curve(train, heldout, values, learner, metric: PerfMetric, batch_frac: float = 0.05,
                  order: str = "low", seed: int = 0, max_fraction: float = 1.0,
                  min_train: int | None = None) -> RemovalCurve:
    """Remove ``round(batch_frac * N)`` points per step in value order, refit, score on ``heldout``."""
    Xtr, ytr, Xho, yho = _split_xy(train, heldout)
    n = len(ytr)
    values = np.asarray(values, dtype=float)
    if values.shape != (n,):
        raise ValueError("values must align with the training set")
    batch = max(1, int(math.floor(batch_frac * n + 0.5)))
    if min_train is None:
        hp = getattr(learner, "hyper", None)
        min_train = 2 * hp.min_samples_leaf if hp is not None else 1
    ordr = removal_order(values, order, seed)
    classes = None
    if learner.task == "classification":
        classes = tuple(np.unique(np.concatenate([ytr, yho])).tolist())
    rows = []
    truncated = False
    step = 0
    while True:
        removed = step * batch
        if removed / n > max_fraction + 1e-12 or removed >= n:
            break
        keep = np.sort(ordr[removed:])
        if len(keep) < min_train:
            truncated = True
            break
        pred = learner.fit_predict(Xtr[keep], ytr[keep], Xho, seed)
        row = {"step": step, "fraction_removed": removed / n, "n_remaining": int(len(keep)),
               "score": float(metric(pred, yho))}
        if classes is not None:
            row["train_counts"] = [int(np.sum(ytr[keep] == c)) for c in classes]
            row["pred_counts"] = [int(np.sum(pred == c)) for c in classes]
        rows.append(row)
        step += 1
    return RemovalCurve(order, batch, rows, truncated, classes)
