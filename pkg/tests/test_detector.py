import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import monte_carlo_iou, soft_count
from sdfadv.detector import (BevBox, Detection, ToyDetector, adv_loss, adv_loss_from_scores, detect,
                             detect_backward, iou_bev, shape_objective, sigmoid, write_detections_csv)
from sdfadv.errors import ScoreOutOfRange


def _random_points(rng, n, lo=(-1, -1), hi=(5, 5)):
    return np.c_[rng.uniform(lo, hi, (n, 2)), rng.uniform(0.0, 2.0, n)]


# -- boxes -------------------------------------------------------------------------------

def test_box_length_at_least_width():
    b = BevBox(1.0, 2.0, 1.0, 3.0, 0.2)
    assert (b.length, b.width) == (3.0, 1.0)
    assert b.heading == pytest.approx(0.2 + math.pi / 2)
    # same footprint as the unswapped description
    assert iou_bev(b, BevBox(1.0, 2.0, 3.0, 1.0, 0.2 + math.pi / 2)) == pytest.approx(1.0)


def test_box_rejects_non_positive():
    with pytest.raises(ValueError):
        BevBox(0, 0, 0.0, 1.0)


def test_detection_score_open_interval():
    with pytest.raises(ScoreOutOfRange):
        Detection(BevBox(0, 0, 2, 1), 1.0)


# -- scores ----------------------------------------------------------------------------------

def test_empty_points_score_is_sigmoid_bias():
    det = ToyDetector()
    np.testing.assert_allclose(det.scores(np.empty((0, 3))), 1 / (1 + math.exp(3.0)), rtol=1e-14)


def test_soft_count_against_loop_oracle():
    det = ToyDetector(nx=3, ny=3, gain=1.0, bias=-5.0, tau=0.2)
    a = det.anchors[4 * len(det.headings)]  # a center anchor, heading 0
    pts = np.tile([a[0], a[1], 1.0], (100, 1))
    C = det.soft_counts(pts)[4 * len(det.headings)]
    expected = soft_count(pts, a, det.length, det.width, det.tau)
    assert C == pytest.approx(expected, rel=1e-12)
    assert C == pytest.approx(100 * sigmoid(2.25 / 0.2) * sigmoid(1.0 / 0.2), rel=1e-12)
    score = det.scores(pts)[4 * len(det.headings)]
    assert score == pytest.approx(1 / (1 + math.exp(-(C - 5.0))), rel=1e-12)


@pytest.mark.parametrize("min_height", [None, 0.8])
def test_all_counts_against_loop_oracle(min_height):
    rng = np.random.default_rng(1)
    det = ToyDetector(nx=3, ny=3, tau=0.4, min_height=min_height)
    pts = _random_points(rng, 60)
    C = det.soft_counts(pts)
    for i, a in enumerate(det.anchors):
        assert C[i] == pytest.approx(soft_count(pts, a, det.length, det.width, det.tau, min_height,
                                                det.height_tau), abs=1e-7)


def test_translation_equivariance():
    rng = np.random.default_rng(2)
    pts = _random_points(rng, 80)
    shift = np.array([12.5, -7.25, 0.0])
    a = ToyDetector(nx=4, ny=4).scores(pts)
    b = ToyDetector(origin=(12.5, -7.25), nx=4, ny=4).scores(pts + shift)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_permutation_invariance_bit_exact():
    rng = np.random.default_rng(3)
    pts = _random_points(rng, 200)
    det = ToyDetector(nx=4, ny=4)
    perm = rng.permutation(len(pts))
    assert det.scores(pts).tobytes() == det.scores(pts[perm]).tobytes()


def test_anchor_subset_scores_equal_full_scores():
    rng = np.random.default_rng(4)
    pts = _random_points(rng, 150, (-3, -3), (20, 20))
    det = ToyDetector(nx=8, ny=8)
    idx = np.array([3, 17, 90, 200])
    np.testing.assert_allclose(det.scores(pts, idx), det.scores(pts)[idx], rtol=1e-12, atol=0)


def test_detect_wrapper_returns_every_anchor():
    det = ToyDetector(nx=2, ny=2)
    dets = detect(det, np.zeros((0, 3)))
    assert len(dets) == len(det.anchors)
    assert all(0 < d.score < 1 for d in dets)


# -- backward --------------------------------------------------------------------------------------

def test_backward_zero_upstream():
    rng = np.random.default_rng(5)
    det = ToyDetector(nx=3, ny=3)
    pts = _random_points(rng, 30)
    assert np.all(detect_backward(det, pts, np.zeros(len(det.anchors))) == 0.0)


@pytest.mark.parametrize("min_height", [None, 0.8])
def test_backward_matches_fd(min_height):
    rng = np.random.default_rng(6)
    det = ToyDetector(nx=3, ny=3, min_height=min_height, height_tau=0.2)
    pts = _random_points(rng, 40)
    w = rng.uniform(0, 1, len(det.anchors))
    grad = det.backward(pts, w)
    h = 1e-5
    fd = np.zeros_like(pts)
    for i in range(pts.shape[0]):
        for j in range(3):
            p, m = pts.copy(), pts.copy()
            p[i, j] += h
            m[i, j] -= h
            fd[i, j] = (w @ det.scores(p) - w @ det.scores(m)) / (2 * h)
    err = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-3 * np.abs(fd).max())
    assert err.max() < 1e-4


def test_backward_subset_matches_full():
    rng = np.random.default_rng(7)
    det = ToyDetector(nx=4, ny=4)
    pts = _random_points(rng, 50)
    w = np.zeros(len(det.anchors))
    idx = np.array([5, 9, 33])
    w[idx] = [0.3, 1.2, 0.7]
    np.testing.assert_allclose(det.backward(pts, w[idx], idx), det.backward(pts, w), atol=1e-15)


def test_backward_saturated_far_point():
    det = ToyDetector(nx=2, ny=2, tau=0.25)
    xmax = det.anchors[:, 0].max() + det.length / 2 + 10 * det.tau + 1.0
    pts = np.array([[xmax, 0.0, 1.0]])
    grad = det.backward(pts, np.ones(len(det.anchors)))
    assert np.abs(grad).max() < 1e-6


# -- IoU ---------------------------------------------------------------------------------------------------

def test_iou_identical_and_disjoint():
    a = BevBox(1.0, 2.0, 4.0, 2.0, 0.3)
    assert iou_bev(a, a) == pytest.approx(1.0, abs=1e-12)
    assert iou_bev(a, BevBox(50.0, 2.0, 4.0, 2.0, 0.3)) == 0.0


def test_iou_offset_squares_is_one_third():
    assert abs(iou_bev(BevBox(0, 0, 2, 2), BevBox(1, 0, 2, 2)) - 1 / 3) < 1e-9


boxes = st.builds(BevBox, st.floats(-5, 5), st.floats(-5, 5), st.floats(0.2, 6), st.floats(0.2, 6),
                  st.floats(-4, 4))


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    ab, ba = iou_bev(a, b), iou_bev(b, a)
    assert abs(ab - ba) < 1e-12
    assert 0.0 <= ab <= 1.0


@settings(max_examples=200, deadline=None)
@given(boxes, boxes, st.floats(-20, 20), st.floats(-20, 20), st.floats(-4, 4))
def test_iou_invariant_under_joint_rigid_motion(a, b, tx, ty, rot):
    c, s = math.cos(rot), math.sin(rot)

    def move(box):
        return BevBox(c * box.cx - s * box.cy + tx, s * box.cx + c * box.cy + ty, box.length, box.width,
                      box.heading + rot)

    assert abs(iou_bev(a, b) - iou_bev(move(a), move(b))) < 1e-9


def test_iou_matches_monte_carlo_small():
    rng = np.random.default_rng(8)
    for k in range(10):
        a = BevBox(*rng.uniform(-1, 1, 2), *rng.uniform(0.5, 4, 2), rng.uniform(0, math.pi))
        b = BevBox(*rng.uniform(-1, 1, 2), *rng.uniform(0.5, 4, 2), rng.uniform(0, math.pi))
        assert abs(iou_bev(a, b) - monte_carlo_iou(a, b, 400_000, seed=k)) < 4e-3


# -- loss -----------------------------------------------------------------------------------------------------

def test_loss_zero_iou():
    loss, grad = adv_loss_from_scores([0.3, 0.9], [0.0, 0.0])
    assert loss == 0.0 and np.all(grad == 0.0)


def test_loss_single_detection():
    loss, grad = adv_loss_from_scores([0.5], [1.0])
    assert loss == pytest.approx(math.log(2.0), rel=1e-15)
    assert grad[0] == pytest.approx(2.0, rel=1e-15)


def test_loss_linear_in_iou():
    l1, g1 = adv_loss_from_scores([0.7], [0.3])
    l2, g2 = adv_loss_from_scores([0.7], [0.6])
    assert l2 == pytest.approx(2 * l1, rel=1e-14)
    assert g2[0] == pytest.approx(2 * g1[0], rel=1e-14)


def test_loss_rejects_out_of_range():
    for p in (0.0, 1.0, -0.1, math.nan):
        with pytest.raises(ScoreOutOfRange):
            adv_loss_from_scores([p], [1.0])


def test_loss_clamps_extreme_scores():
    loss, grad = adv_loss_from_scores([1 - 1e-12], [1.0])
    assert loss == pytest.approx(-math.log(1e-7))
    assert grad[0] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 0.9), st.floats(0.01, 1.0))
def test_loss_gradient_matches_fd(p, w):
    # truncation error h^2/6 * 2w/(1-p)^3 stays below 1e-8 relative for p <= 0.9
    h = 1e-5
    _, g = adv_loss_from_scores([p], [w])
    fd = (adv_loss_from_scores([p + h], [w])[0] - adv_loss_from_scores([p - h], [w])[0]) / (2 * h)
    assert abs(g[0] - fd) <= 1e-8 * max(1.0, abs(fd))


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 0.9), st.floats(1e-3, 0.09), st.floats(0.01, 1.0))
def test_loss_monotone_in_score(p, dp, w):
    assert adv_loss_from_scores([p + dp], [w])[0] > adv_loss_from_scores([p], [w])[0]


def test_adv_loss_from_detections():
    gt = BevBox(0, 0, 4.5, 2.0)
    dets = [Detection(BevBox(0, 0, 4.5, 2.0), 0.5), Detection(BevBox(30, 0, 4.5, 2.0), 0.9)]
    loss, grad = adv_loss(dets, gt)
    assert loss == pytest.approx(math.log(2.0))
    assert grad.tolist() == pytest.approx([2.0, 0.0])


def test_shape_objective():
    z0 = np.zeros(4)
    assert shape_objective(1.5, z0, z0, 10.0)[0] == 1.5
    z = np.array([0.5, 0, 0, 0])
    assert shape_objective(1.5, z, z0, 0.0)[0] == 1.5
    val, grad = shape_objective(0.0, z, z0, 10.0)
    assert val == pytest.approx(2.5)
    np.testing.assert_allclose(grad, 2 * 10.0 * z)
    with pytest.raises(ValueError):
        shape_objective(0.0, z, z0, -1.0)


def test_detections_csv(tmp_path):
    det = ToyDetector(nx=1, ny=1)
    path = tmp_path / "d.csv"
    write_detections_csv(detect(det, np.zeros((0, 3))), path)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["cx", "cy", "length", "width", "heading", "score"]
    assert len(rows) == len(det.anchors)
    assert float(rows[0]["length"]) == det.length
