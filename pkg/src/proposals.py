"""
Region proposal bookkeeping: RPN anchor targets, proposal generation from
RPN outputs, RoI sampling for the heads and RoI selection at inference.

Every random choice draws from np.random.default_rng(rng_seed), so results
are a deterministic function of the inputs and the seed.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from src.boxes import Box, boxes_to_array, clip_boxes, decode_boxes, encode_boxes, iou_matrix, nms
from src.errors import ShapeError
from src.layers import RoI

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

# exp() guard for decoding untrained regressions
MAX_LOG_SCALE = math.log(1000.0 / 16.0)


@dataclass
class RpnTargets:
    """
    Per-anchor objectness labels (POSITIVE / NEGATIVE / IGNORE) and box
    offsets; offsets are zero for every non-positive anchor.
    """

    labels: np.ndarray
    offsets: np.ndarray

    @property
    def num_positive(self) -> int:
        return int((self.labels == POSITIVE).sum())

    @property
    def num_negative(self) -> int:
        return int((self.labels == NEGATIVE).sum())


@dataclass(frozen=True)
class RoISample:
    """A sampled RoI with its object class (0 = background) and matched object."""

    roi: RoI
    label: int
    matched_gt: Optional[int] = None

    def __post_init__(self):
        if (self.label >= 1) != (self.matched_gt is not None):
            raise ValueError("label >= 1 exactly when a groundtruth object is matched")


def _subsample(indices: np.ndarray, limit: int, rng: np.random.Generator) -> np.ndarray:
    if indices.size <= limit:
        return indices
    return np.sort(rng.choice(indices, size=limit, replace=False))


def assign_rpn_targets(
    anchors: Sequence[Box],
    gt_boxes: Sequence[Box],
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
    batch_size: int = 256,
    pos_fraction: float = 0.5,
    rng_seed: int = 0,
) -> RpnTargets:
    """
    Label anchors for RPN training.

    An anchor is positive if its IoU with some groundtruth box is at least
    pos_iou, or if it is the best match of some groundtruth box; negative if
    its best IoU is below neg_iou; ignored otherwise. Labels are then
    subsampled to batch_size anchors with at most pos_fraction positives.

    Returns:
        RpnTargets for every anchor
    """
    if not 0.0 <= neg_iou <= pos_iou <= 1.0:
        raise ValueError(f"need 0 <= neg_iou <= pos_iou <= 1, got {neg_iou}, {pos_iou}")
    anchors = boxes_to_array(anchors)
    gt = boxes_to_array(gt_boxes)
    rng = np.random.default_rng(rng_seed)

    num_anchors = anchors.shape[0]
    labels = np.full(num_anchors, IGNORE, dtype=np.int64)
    offsets = np.zeros((num_anchors, 4), dtype=np.float64)

    if gt.shape[0] == 0:
        labels[:] = NEGATIVE
    else:
        overlaps = iou_matrix(anchors, gt)
        best_gt = overlaps.argmax(axis=1)
        best_iou = overlaps.max(axis=1)

        labels[best_iou < neg_iou] = NEGATIVE
        labels[best_iou >= pos_iou] = POSITIVE

        # every groundtruth box claims its best-matching anchor(s)
        gt_best = overlaps.max(axis=0)
        for g in range(gt.shape[0]):
            if gt_best[g] <= 0:
                continue
            winners = np.where(overlaps[:, g] == gt_best[g])[0]
            labels[winners] = POSITIVE
            best_gt[winners] = g

        positive = labels == POSITIVE
        if positive.any():
            offsets[positive] = encode_boxes(gt[best_gt[positive]], anchors[positive])

    pos_idx = np.where(labels == POSITIVE)[0]
    keep_pos = _subsample(pos_idx, int(batch_size * pos_fraction), rng)
    labels[np.setdiff1d(pos_idx, keep_pos)] = IGNORE
    offsets[labels != POSITIVE] = 0.0

    neg_idx = np.where(labels == NEGATIVE)[0]
    keep_neg = _subsample(neg_idx, batch_size - keep_pos.size, rng)
    labels[np.setdiff1d(neg_idx, keep_neg)] = IGNORE

    return RpnTargets(labels=labels, offsets=offsets)


def generate_proposals(
    anchors: np.ndarray,
    objectness: np.ndarray,
    deltas: np.ndarray,
    image_size: tuple,
    pre_nms_top_n: int = 6000,
    nms_iou: float = 0.7,
    post_nms_top_n: int = 2000,
    min_size: float = 1.0,
):
    """
    Turn RPN outputs into scored proposals.

    Args:
        anchors: (A, 4)
        objectness: (A,) foreground probabilities
        deltas: (A, 4) predicted offsets
        image_size: (height, width)
        pre_nms_top_n: Candidates kept before NMS
        nms_iou: NMS threshold
        post_nms_top_n: Proposals kept after NMS
        min_size: Minimum proposal side in pixels

    Returns:
        (boxes (P, 4), scores (P,)) sorted by descending score
    """
    height, width = image_size
    boxes = decode_boxes(deltas, anchors, max_log_scale=MAX_LOG_SCALE)
    boxes = clip_boxes(boxes, width, height)
    scores = np.asarray(objectness, dtype=np.float64)

    sizes_ok = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
    boxes, scores = boxes[sizes_ok], scores[sizes_ok]

    order = np.argsort(-scores, kind="stable")[:pre_nms_top_n]
    boxes, scores = boxes[order], scores[order]

    keep = nms(boxes, scores, nms_iou)[:post_nms_top_n]
    return boxes[keep], scores[keep]


def sample_rois(
    proposals: np.ndarray,
    scores: np.ndarray,
    gt_boxes: Sequence[Box],
    gt_classes: Sequence[int],
    k_train: int = 2000,
    batch_size: int = 128,
    pos_ratio: float = 0.25,
    iou_threshold: float = 0.5,
    rng_seed: int = 0,
) -> List[RoISample]:
    """
    Pick the RoIs that supervise the detection and affordance heads.

    The top k_train proposals by score are kept, then split into positives
    (max IoU >= iou_threshold, labelled with the matched object's class) and
    negatives (label 0). Positives are capped at batch_size * pos_ratio and
    negatives at three per positive; with no positive at all the sample is
    up to batch_size negatives.

    Returns:
        Positives first (in proposal order), then negatives
    """
    proposals = boxes_to_array(proposals)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if proposals.shape[0] != scores.shape[0]:
        raise ShapeError(f"{proposals.shape[0]} proposals but {scores.shape[0]} scores")
    gt = boxes_to_array(gt_boxes)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    if gt.shape[0] != gt_classes.shape[0]:
        raise ShapeError(f"{gt.shape[0]} groundtruth boxes but {gt_classes.shape[0]} classes")
    rng = np.random.default_rng(rng_seed)

    order = np.argsort(-scores, kind="stable")[:k_train]
    pool = proposals[order]

    if gt.shape[0] > 0 and pool.shape[0] > 0:
        overlaps = iou_matrix(pool, gt)
        best_gt = overlaps.argmax(axis=1)
        best_iou = overlaps.max(axis=1)
    else:
        best_gt = np.zeros(pool.shape[0], dtype=np.int64)
        best_iou = np.zeros(pool.shape[0], dtype=np.float64)

    pos_idx = np.where(best_iou >= iou_threshold)[0]
    neg_idx = np.where(best_iou < iou_threshold)[0]

    num_pos = min(pos_idx.size, int(math.floor(batch_size * pos_ratio)))
    pos_keep = _subsample(pos_idx, num_pos, rng)
    if pos_keep.size > 0:
        negatives_per_positive = (1.0 - pos_ratio) / pos_ratio
        num_neg = min(neg_idx.size, int(round(negatives_per_positive * pos_keep.size)))
    else:
        num_neg = min(neg_idx.size, batch_size)
    neg_keep = _subsample(neg_idx, num_neg, rng)

    samples = []
    for i in pos_keep:
        g = int(best_gt[i])
        samples.append(RoISample(RoI(Box.from_array(pool[i])), int(gt_classes[g]), g))
    for i in neg_keep:
        samples.append(RoISample(RoI(Box.from_array(pool[i])), 0, None))
    return samples


def top_k_indices(scores: Sequence[float], k: int) -> np.ndarray:
    """Indices of the k highest scores, descending (ties: lower index first)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    return np.argsort(-scores, kind="stable")[:k]


def select_inference_rois(
    proposals: np.ndarray, scores: Sequence[float], k_infer: int = 1000
) -> List[RoI]:
    """The top k_infer proposals by objectness score, as RoIs."""
    proposals = boxes_to_array(proposals)
    return [RoI(Box.from_array(proposals[i])) for i in top_k_indices(scores, k_infer)]
