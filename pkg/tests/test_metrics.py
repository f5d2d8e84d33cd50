import numpy as np
import pytest
from hypothesis import given, strategies as st

from sigmap import forest, metrics
from conftest import xy_dataset


def test_rmse_hand_value():
    assert metrics.rmse([0, 0], [3, 4]) == pytest.approx(3.5355339, abs=1e-6)
    assert metrics.mse([1, 2], [1, 2]) == 0.0
    with pytest.raises(ValueError):
        metrics.rmse([], [])
    with pytest.raises(ValueError):
        metrics.rmse([1, 2], [1])


def test_classification_hand_values():
    r = metrics.classification_metrics([0, 1, 1, 1], [0, 0, 1, 1])
    assert r.recall == {0.0: 0.5, 1.0: 1.0}
    assert r.precision[0.0] == 1.0 and r.precision[1.0] == pytest.approx(2 / 3)
    assert r.balanced_accuracy == 0.75 and r.accuracy == 0.75
    assert r.f1[0.0] == pytest.approx(2 / 3)
    assert r.confusion.counts.tolist() == [[1, 1], [0, 2]]
    assert metrics.recall_of([0, 1, 1, 1], [0, 0, 1, 1], 0) == 0.5


def test_degenerate_classes_are_reported():
    r = metrics.classification_metrics([1, 1], [1, 1], classes=(0, 1))
    assert r.recall[0.0] == 0.0 and r.degenerate == {"recall": [0.0], "precision": [0.0], "f1": [0.0]}
    assert r.balanced_accuracy == 1.0
    with pytest.raises(ValueError):
        metrics.confusion_matrix([2], [0], classes=(0, 1))


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_balanced_accuracy_is_mean_recall(pairs):
    pred, truth = np.array(pairs, dtype=float).T
    r = metrics.classification_metrics(pred, truth)
    present = np.unique(truth)
    assert r.balanced_accuracy == pytest.approx(np.mean([r.recall[c] for c in present]))
    assert r.confusion.total == len(pairs)
    assert r.accuracy == pytest.approx(np.mean(pred == truth))


def test_grid_search_prefers_smaller_on_ties_and_uses_holdout():
    rng = np.random.default_rng(0)
    xy = rng.uniform(-300, 300, (200, 2))
    y = -90 + 10 * np.sign(xy[:, 0])
    d = xy_dataset(xy, y)
    tr, ho = d.subset(range(150)), d.subset(range(150, 200))
    grid = metrics.hyper_grid(forest.ForestHyper(seed=1), n_trees=(5, 2), max_depth=(3, 1))
    res = metrics.grid_search(tr, ho, grid)
    assert [(t, dd) for t, dd, _ in res.table] == [(2, 1), (2, 3), (5, 1), (5, 3)]
    assert res.best.n_trees == 2 and res.best.max_depth == 1  # a stump already fits the step
    custom = metrics.grid_search(tr, ho, grid, objective=lambda p, t: 0.0)
    assert custom.best == min(grid, key=lambda h: (h.n_trees, h.max_depth))
    with pytest.raises(ValueError):
        metrics.grid_search(tr, ho, [])
