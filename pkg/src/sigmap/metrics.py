"""Regression and classification metrics, and forest hyperparameter grid search."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import forest
from .datamodel import Dataset
from .reweight import reweighted_error


def _aligned(pred, truth):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth must align")
    if pred.size == 0:
        raise ValueError("cannot score an empty prediction")
    return pred, truth


def mse(pred, truth) -> float:
    pred, truth = _aligned(pred, truth)
    return float(np.mean((truth - pred) ** 2))


def rmse(pred, truth) -> float:
    return float(np.sqrt(mse(pred, truth)))


@dataclass(frozen=True)
class ConfusionMatrix:
    classes: tuple
    counts: np.ndarray  # [true, predicted]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_rows(self):
        return [[c] + self.counts[i].tolist() for i, c in enumerate(self.classes)]


def confusion_matrix(pred, truth, classes=None) -> ConfusionMatrix:
    pred, truth = _aligned(pred, truth)
    cls = np.unique(np.concatenate([truth, pred])) if classes is None else np.asarray(sorted(classes), float)
    ti = np.searchsorted(cls, truth)
    pi = np.searchsorted(cls, pred)
    if np.any(cls[np.minimum(ti, len(cls) - 1)] != truth) or np.any(cls[np.minimum(pi, len(cls) - 1)] != pred):
        raise ValueError("labels outside the class set")
    counts = np.zeros((len(cls), len(cls)), dtype=np.int64)
    np.add.at(counts, (ti, pi), 1)
    return ConfusionMatrix(tuple(cls.tolist()), counts)


@dataclass(frozen=True)
class ClassificationReport:
    confusion: ConfusionMatrix
    recall: dict
    precision: dict
    f1: dict
    accuracy: float
    balanced_accuracy: float
    degenerate: dict = field(default_factory=dict)  # e.g. {"precision": [0.0]}

    def recall_of(self, c) -> float:
        return self.recall.get(float(c), 0.0)


def classification_metrics(pred, truth, classes=None) -> ClassificationReport:
    """Per-class recall/precision/F1, accuracy and balanced accuracy.

    Empty denominators yield 0 and are listed under ``degenerate``.
    """
    cm = confusion_matrix(pred, truth, classes)
    c = cm.counts
    tp = np.diag(c).astype(float)
    n_true = c.sum(axis=1).astype(float)
    n_pred = c.sum(axis=0).astype(float)
    deg = {"recall": [], "precision": [], "f1": []}
    rec, prec, f1 = {}, {}, {}
    for k, lab in enumerate(cm.classes):
        if n_true[k] > 0:
            rec[lab] = tp[k] / n_true[k]
        else:
            rec[lab] = 0.0
            deg["recall"].append(lab)
        if n_pred[k] > 0:
            prec[lab] = tp[k] / n_pred[k]
        else:
            prec[lab] = 0.0
            deg["precision"].append(lab)
        s = rec[lab] + prec[lab]
        if s > 0:
            f1[lab] = 2 * rec[lab] * prec[lab] / s
        else:
            f1[lab] = 0.0
            deg["f1"].append(lab)
    present = [lab for k, lab in enumerate(cm.classes) if n_true[k] > 0]
    bal = float(np.mean([rec[lab] for lab in present])) if present else 0.0
    acc = float(tp.sum() / cm.total)
    return ClassificationReport(cm, rec, prec, f1, acc, bal, {k: v for k, v in deg.items() if v})


def recall_of(pred, truth, c=0.0) -> float:
    pred, truth = _aligned(pred, truth)
    m = truth == c
    if not m.any():
        return 0.0
    return float(np.mean(pred[m] == c))


# grid search

@dataclass(frozen=True)
class GridResult:
    best: forest.ForestHyper
    table: list  # (n_trees, max_depth, loss) in evaluation order


def hyper_grid(base: forest.ForestHyper, n_trees=(20,), max_depth=(20,)) -> list:
    return [replace(base, n_trees=int(t), max_depth=int(d)) for t in n_trees for d in max_depth]


def grid_search(train: Dataset, holdout: Dataset, grid, w=None, holdout_w=None, objective=None,
                classes=None) -> GridResult:
    """Exhaustive search minimizing holdout loss; ties go to smaller (n_trees, max_depth).

    The default loss is RMSE (weighted RMSE when ``holdout_w`` is given) for
    regression and 1 - accuracy for classification.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    order = sorted(range(len(grid)), key=lambda i: (grid[i].n_trees, grid[i].max_depth))
    table = []
    best, best_loss = None, np.inf
    for i in order:
        hp = grid[i]
        m = forest.fit_dataset(train, hp, w, classes)
        pred = m.predict_dataset(holdout)
        if objective is not None:
            loss = float(objective(pred, holdout.labels))
        elif hp.task == "regression":
            loss = (rmse(pred, holdout.labels) if holdout_w is None
                    else float(np.sqrt(reweighted_error(pred, holdout.labels, holdout_w))))
        else:
            loss = 1.0 - classification_metrics(pred, holdout.labels, classes).accuracy
        table.append((hp.n_trees, hp.max_depth, loss))
        if loss < best_loss:
            best, best_loss = hp, loss
    return GridResult(best, table)
