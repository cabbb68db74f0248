import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.boxes import Box, boxes_to_array, encode_offsets
from src.proposals import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    assign_rpn_targets,
    generate_proposals,
    sample_rois,
    select_inference_rois,
)

GT = Box(0, 0, 10, 10)


def test_rpn_labels_by_hand():
    anchors = [Box(0, 0, 10, 10), Box(0, 0, 6, 10), Box(0, 0, 1, 10)]
    targets = assign_rpn_targets(anchors, [GT], pos_iou=0.7, neg_iou=0.3)
    assert targets.labels.tolist() == [POSITIVE, IGNORE, NEGATIVE]
    assert_allclose(targets.offsets[0], 0.0)
    assert targets.num_positive == 1
    assert targets.num_negative == 1


def test_rpn_best_anchor_is_positive_below_threshold():
    anchors = [Box(0, 0, 6, 10), Box(50, 50, 60, 60)]
    targets = assign_rpn_targets(anchors, [GT])
    assert targets.labels.tolist() == [POSITIVE, NEGATIVE]
    expected = encode_offsets(GT, anchors[0]).as_array()
    assert_allclose(targets.offsets[0], expected)


def test_rpn_without_groundtruth_is_all_negative():
    anchors = [Box(i, i, i + 5, i + 5) for i in range(6)]
    targets = assign_rpn_targets(anchors, [], batch_size=256)
    assert (targets.labels == NEGATIVE).all()


def test_rpn_subsampling_respects_batch(rng):
    xy = rng.uniform(0, 80, size=(400, 2))
    anchors = np.hstack([xy, xy + 10])
    targets = assign_rpn_targets(anchors, [Box(20, 20, 30, 30), Box(60, 10, 70, 20)], batch_size=32, rng_seed=3)
    sampled = targets.labels != IGNORE
    assert sampled.sum() <= 32
    assert targets.num_positive <= 16
    assert_allclose(targets.offsets[targets.labels != POSITIVE], 0.0)


def test_rpn_targets_are_deterministic(rng):
    xy = rng.uniform(0, 80, size=(300, 2))
    anchors = np.hstack([xy, xy + 12])
    a = assign_rpn_targets(anchors, [GT], batch_size=16, rng_seed=5)
    b = assign_rpn_targets(anchors, [GT], batch_size=16, rng_seed=5)
    assert np.array_equal(a.labels, b.labels)


def test_generate_proposals_zero_deltas_keeps_anchors():
    anchors = np.array([[0, 0, 10, 10], [40, 40, 50, 50], [1, 0, 11, 10]], dtype=float)
    boxes, scores = generate_proposals(
        anchors, np.array([0.2, 0.9, 0.5]), np.zeros((3, 4)), (64, 64), nms_iou=0.7
    )
    assert scores.tolist() == [0.9, 0.5]
    assert_allclose(boxes, anchors[[1, 2]])


def test_generate_proposals_clips_and_drops_small():
    anchors = np.array([[-10, -10, 20, 20], [70, 70, 80, 80]], dtype=float)
    boxes, scores = generate_proposals(anchors, np.array([0.6, 0.7]), np.zeros((2, 4)), (64, 64))
    assert scores.tolist() == [0.6]
    assert_allclose(boxes, [[0, 0, 20, 20]])


def test_generate_proposals_caps_output():
    anchors = np.array([[i * 20, 0, i * 20 + 10, 10] for i in range(5)], dtype=float)
    boxes, _ = generate_proposals(anchors, np.linspace(0.1, 0.5, 5), np.zeros((5, 4)), (20, 200), post_nms_top_n=2)
    assert boxes.shape == (2, 4)


def test_sample_rois_ratio():
    proposals = [Box(0, 0, 10, 10), Box(1, 0, 11, 10)] + [Box(30 + i, 30, 40 + i, 40) for i in range(8)]
    scores = np.linspace(1.0, 0.1, 10)
    samples = sample_rois(boxes_to_array(proposals), scores, [GT], [2], rng_seed=1)
    labels = [s.label for s in samples]
    assert labels.count(2) == 2
    assert labels.count(0) == 6
    assert all(s.matched_gt == 0 for s in samples if s.label)


def test_sample_rois_proposal_equal_to_gt_is_positive():
    samples = sample_rois(GT.as_array()[None], np.array([0.5]), [GT], [1])
    assert len(samples) == 1
    assert samples[0].label == 1
    assert samples[0].roi.box == GT


def test_sample_rois_without_positives_is_all_negative():
    proposals = np.array([[50 + i, 50, 60 + i, 60] for i in range(20)], dtype=float)
    samples = sample_rois(proposals, np.ones(20), [GT], [1], batch_size=8)
    assert len(samples) == 8
    assert all(s.label == 0 for s in samples)


def test_sample_rois_respects_k_train():
    proposals = np.array([[0, 0, 10, 10], [50, 50, 60, 60]], dtype=float)
    samples = sample_rois(proposals, np.array([0.1, 0.9]), [GT], [1], k_train=1)
    assert [s.label for s in samples] == [0]


def test_select_inference_rois():
    proposals = np.array([[0, 0, 1, 1], [1, 1, 2, 2], [2, 2, 3, 3]], dtype=float)
    rois = select_inference_rois(proposals, [0.1, 0.9, 0.5], 2)
    assert [r.box.x1 for r in rois] == [1.0, 2.0]
    assert len(select_inference_rois(proposals, [0.1, 0.9, 0.5], 1000)) == 3


def test_roi_sample_label_consistency():
    from src.layers import RoI
    from src.proposals import RoISample

    with pytest.raises(ValueError):
        RoISample(RoI(GT), 1, None)
