import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdfadv.detector import BevBox, Detection
from sdfadv.errors import EmptyOutcomes
from sdfadv.metrics import (Curve, TrialOutcome, auc, match_detection, score_reduction_grid,
                            threshold_recall, write_curve_csv, write_grid_csv)

GT = BevBox(0.0, 0.0, 4.5, 1.9)


def _det(x, y, s):
    return Detection(BevBox(x, y, 4.5, 1.9), s)


def _outcomes(scores):
    return [TrialOutcome(GT, s, s > 0) for s in scores]


# -- matching ---------------------------------------------------------------------------------

def test_empty_detections_unmatched():
    o = match_detection([], GT)
    assert not o.matched and o.score == 0.0


def test_highest_score_within_radius_wins():
    o = match_detection([_det(3, 0, 0.4), _det(0, 3, 0.9), _det(6, 0, 0.99)], GT)
    assert o.matched and o.score == 0.9


def test_match_radius_is_strict():
    assert not match_detection([_det(5.0, 0.0, 0.7)], GT).matched
    assert match_detection([_det(np.nextafter(5.0, 0.0), 0.0, 0.7)], GT).score == 0.7


def test_unmatched_outcome_must_have_zero_score():
    with pytest.raises(ValueError):
        TrialOutcome(GT, 0.3, False)


# -- curves -------------------------------------------------------------------------------------

def test_recall_examples():
    c = threshold_recall(_outcomes([0.2, 0.8]))
    assert c.recall[500] == 0.5  # t = 0.5
    assert len(c.thresholds) == 1001
    assert np.all(threshold_recall(_outcomes([0.0, 0.0])).recall == 0)
    near_one = threshold_recall(_outcomes([1 - 1e-7] * 3))
    assert np.all(near_one.recall[:-1] == 1.0) and near_one.recall[-1] == 0.0


def test_recall_threshold_is_strict():
    c = threshold_recall(_outcomes([0.5]), n_thresholds=3)  # t = 0, 0.5, 1
    assert list(c.recall) == [1.0, 0.0, 0.0]


def test_empty_outcomes_raise():
    with pytest.raises(EmptyOutcomes):
        threshold_recall([])


def test_auc_examples():
    t = np.linspace(0, 1, 11)
    assert auc(Curve(t, np.ones(11))) == 1.0
    assert auc(Curve(t, np.zeros(11))) == 0.0
    for s in (0.0, 0.123456, 0.6, 0.9999):
        assert abs(auc(threshold_recall(_outcomes([s]))) - s) <= 1e-3


def test_curve_validation():
    with pytest.raises(ValueError):
        Curve(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        Curve(np.array([1.0, 0.0]), np.array([1.0, 0.0]))


scores = st.lists(st.floats(0.0, 1.0, exclude_max=True), min_size=1, max_size=30)


@settings(max_examples=100, deadline=None)
@given(scores, st.randoms(use_true_random=False))
def test_recall_order_invariant(vals, rnd):
    shuffled = list(vals)
    rnd.shuffle(shuffled)
    a, b = threshold_recall(_outcomes(vals)), threshold_recall(_outcomes(shuffled))
    assert np.array_equal(a.recall, b.recall)


@settings(max_examples=100, deadline=None)
@given(scores, st.floats(0.0, 0.5))
def test_auc_bounded_and_monotone(vals, drop):
    hi = auc(threshold_recall(_outcomes(vals)))
    lo = auc(threshold_recall(_outcomes([max(v - drop, 0.0) for v in vals])))
    assert 0.0 <= lo <= hi <= 1.0


def test_auc_approaches_mean_score_for_equal_scores():
    for s in np.linspace(0.05, 0.95, 7):
        assert abs(auc(threshold_recall(_outcomes([s] * 5))) - s) <= 1e-3


# -- grid -----------------------------------------------------------------------------------------

def test_grid_examples():
    assert all(m == 0.0 for m, _ in score_reduction_grid([(3, 4, 0.5, 0.5), (25, -3, 0.7, 0.7)]).values())
    g = score_reduction_grid([(3, 4, 0.9, 0.1)])
    assert list(g) == [(0, 0)] and abs(g[(0, 0)][0] - 0.8) < 1e-12
    g = score_reduction_grid([(1, 1, 0.8, 0.2), (9, 9, 0.6, 0.4)])
    assert abs(g[(0, 0)][0] - 0.4) < 1e-12 and g[(0, 0)][1] == 2
    g = score_reduction_grid([(-0.5, 15, 0.5, 0.2)])
    assert list(g) == [(-1, 1)]


def test_csv_outputs(tmp_path):
    write_curve_csv(threshold_recall(_outcomes([0.2, 0.8]), n_thresholds=3), tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines() == [
        "threshold,recall", "0.000000,1.000000", "0.500000,0.500000", "1.000000,0.000000"]
    write_grid_csv({(0, -1): (0.25, 3)}, tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().splitlines() == [
        "cell_x,cell_y,mean_reduction,count", "0,-10,0.250000,3"]
