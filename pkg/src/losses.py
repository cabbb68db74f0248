"""
Multi-task objective: object classification, per-class box regression with
Smooth L1, and the per-pixel multiclass affordance loss, gated by the
positive-RoI indicator I[u >= 1].

Each loss has a matching *_backward. The *_from_logits helpers fuse the
softmax with its cross-entropy for training, where the gradient w.r.t. the
logits is simply (probs - onehot) / N.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.boxes import BoxOffset
from src.errors import ShapeError
from src.layers import softmax
from src.maskops import LabelMask
from src.proposals import IGNORE, POSITIVE, RpnTargets

PROB_FLOOR = 1e-12

OffsetLike = Union[BoxOffset, np.ndarray, Sequence[float]]


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cls: float = Field(default=1.0, ge=0)
    loc: float = Field(default=1.0, ge=0)
    aff: float = Field(default=1.0, ge=0)


@dataclass
class DetectionTarget:
    """
    Supervision for one RoI: object class u (0 = background), box offset v
    for that class and the affordance mask s at head resolution. v and s
    may be None when u == 0.
    """

    u: int
    v: Optional[BoxOffset] = None
    s: Optional[LabelMask] = None

    def __post_init__(self):
        if self.u < 0:
            raise ValueError(f"class index must be non-negative, got {self.u}")

    @property
    def is_foreground(self) -> bool:
        return self.u >= 1


@dataclass
class HeadPrediction:
    """
    Head outputs for one RoI.

    Args:
        p: (K+1,) class probabilities
        t: (K+1, 4) box offsets, one row per class
        m: (C+1, H, W) per-pixel affordance probabilities, or None
    """

    p: np.ndarray
    t: np.ndarray
    m: Optional[np.ndarray] = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1, 4)
        if self.t.shape[0] != self.p.shape[0]:
            raise ShapeError(f"{self.p.shape[0]} classes but {self.t.shape[0]} offset rows")
        if self.m is not None:
            self.m = np.asarray(self.m, dtype=np.float64)
            if self.m.ndim != 3:
                raise ShapeError(f"mask prediction must be (C+1, H, W), got {self.m.shape}")

    @property
    def num_classes(self) -> int:
        return int(self.p.shape[0])


def _offset_array(offset: OffsetLike) -> np.ndarray:
    if isinstance(offset, BoxOffset):
        return offset.as_array()
    array = np.asarray(offset, dtype=np.float64).reshape(-1)
    if array.shape != (4,):
        raise ShapeError(f"box offset needs 4 components, got {array.shape}")
    return array


def classification_loss(p: np.ndarray, u: int) -> float:
    """-log p_u with p_u floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if not 0 <= u < p.size:
        raise ShapeError(f"class {u} outside 0..{p.size - 1}")
    return float(-np.log(max(p[u], PROB_FLOOR)))


def classification_loss_backward(p: np.ndarray, u: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    dp = np.zeros_like(p)
    if p[u] > PROB_FLOOR:
        dp[u] = -1.0 / p[u]
    return dp


def smooth_l1(x):
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise. Scalar or elementwise."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    value = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return float(value) if value.ndim == 0 else value


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=np.float64)
    grad = np.where(np.abs(x) < 1.0, x, np.sign(x))
    return float(grad) if grad.ndim == 0 else grad


def box_regression_loss(t_u: OffsetLike, v: OffsetLike) -> float:
    """Sum of smooth_l1 over the (x, y, w, h) offset differences."""
    return float(np.sum(smooth_l1(_offset_array(t_u) - _offset_array(v))))


def box_regression_loss_backward(t_u: OffsetLike, v: OffsetLike) -> np.ndarray:
    return smooth_l1_grad(_offset_array(t_u) - _offset_array(v))


def _check_mask_pair(m: np.ndarray, s: LabelMask) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 3 or m.shape[1:] != s.labels.shape:
        raise ShapeError(f"mask prediction {m.shape} does not match target {s.labels.shape}")
    if s.labels.size and s.labels.max() >= m.shape[0]:
        raise ShapeError(f"target label {int(s.labels.max())} has no channel in {m.shape[0]}")
    return m


def _true_label_probs(m: np.ndarray, s: LabelMask) -> np.ndarray:
    return np.take_along_axis(m, s.labels[None], axis=0)[0]


def affordance_loss(m: np.ndarray, s: LabelMask) -> float:
    """Mean over pixels of -log m[s_i, i] (floored like classification_loss)."""
    m = _check_mask_pair(m, s)
    picked = _true_label_probs(m, s)
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def affordance_loss_backward(m: np.ndarray, s: LabelMask) -> np.ndarray:
    m = _check_mask_pair(m, s)
    picked = _true_label_probs(m, s)
    n = picked.size
    grad_picked = np.where(picked > PROB_FLOOR, -1.0 / (n * np.maximum(picked, PROB_FLOOR)), 0.0)
    dm = np.zeros_like(m)
    np.put_along_axis(dm, s.labels[None], grad_picked[None], axis=0)
    return dm


def multi_task_loss(
    pred: HeadPrediction, target: DetectionTarget, weights: Optional[LossWeights] = None
) -> Tuple[float, Dict[str, float]]:
    """
    L = L_cls + I[u >= 1] L_loc(t^u, v) + I[u >= 1] L_aff(m, s).

    Returns:
        (total, {"cls", "loc", "aff"}); loc and aff are 0 for background
    """
    weights = weights or LossWeights()
    parts = {"cls": classification_loss(pred.p, target.u), "loc": 0.0, "aff": 0.0}
    if target.is_foreground:
        if target.v is None:
            raise ValueError("a foreground target needs a box offset")
        parts["loc"] = box_regression_loss(pred.t[target.u], target.v)
        if target.s is not None and pred.m is not None:
            parts["aff"] = affordance_loss(pred.m, target.s)
    total = weights.cls * parts["cls"] + weights.loc * parts["loc"] + weights.aff * parts["aff"]
    return total, parts


def multi_task_loss_backward(
    pred: HeadPrediction, target: DetectionTarget, weights: Optional[LossWeights] = None
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """
    Gradients of multi_task_loss w.r.t. (p, t, m). The t and m gradients are
    all zero for a background target.
    """
    weights = weights or LossWeights()
    dp = weights.cls * classification_loss_backward(pred.p, target.u)
    dt = np.zeros_like(pred.t)
    dm = None if pred.m is None else np.zeros_like(pred.m)
    if target.is_foreground:
        dt[target.u] = weights.loc * box_regression_loss_backward(pred.t[target.u], target.v)
        if target.s is not None and dm is not None:
            dm = weights.aff * affordance_loss_backward(pred.m, target.s)
    return dp, dt, dm


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray, axis: int = 1
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Mean cross-entropy of softmax(logits) against integer labels, where
    labels has the shape of logits with `axis` removed.

    Returns:
        (loss, probs, dlogits)
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    axis = axis % logits.ndim
    expected = logits.shape[:axis] + logits.shape[axis + 1:]
    if labels.shape != expected:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape} on axis {axis}")
    probs = softmax(logits, axis=axis)
    index = np.expand_dims(labels, axis)
    picked = np.take_along_axis(probs, index, axis=axis)
    n = max(1, labels.size)
    loss = float(-np.sum(np.log(np.maximum(picked, PROB_FLOOR))) / n)

    dlogits = probs.copy()
    np.put_along_axis(dlogits, index, picked - 1.0, axis=axis)
    dlogits /= n
    return loss, probs, dlogits


@dataclass
class HeadLossResult:
    """Head loss averaged over the sampled RoIs plus logit gradients."""

    total: float
    parts: Dict[str, float]
    dcls: np.ndarray
    dbox: np.ndarray
    dmask: List[Optional[np.ndarray]]


def head_loss_from_logits(
    cls_logits: np.ndarray,
    box_deltas: np.ndarray,
    mask_logits: Sequence[Optional[np.ndarray]],
    targets: Sequence[DetectionTarget],
    weights: Optional[LossWeights] = None,
) -> HeadLossResult:
    """
    Mean multi-task loss over R RoIs, straight from logits.

    Args:
        cls_logits: (R, K+1)
        box_deltas: (R, 4 (K+1))
        mask_logits: R entries, each (C+1, H, W) or None where no mask was run
        targets: R DetectionTargets
    """
    weights = weights or LossWeights()
    num_rois = len(targets)
    if cls_logits.shape[0] != num_rois or box_deltas.shape[0] != num_rois or len(mask_logits) != num_rois:
        raise ShapeError(f"head outputs do not cover {num_rois} RoIs")

    labels = np.array([t.u for t in targets], dtype=np.int64)
    cls_value, _, dcls = softmax_cross_entropy(cls_logits, labels, axis=1)
    parts = {"cls": cls_value, "loc": 0.0, "aff": 0.0}

    deltas = box_deltas.reshape(num_rois, -1, 4)
    dbox = np.zeros_like(deltas)
    dmask: List[Optional[np.ndarray]] = [None] * num_rois
    for r, target in enumerate(targets):
        if not target.is_foreground:
            continue
        diff = deltas[r, target.u] - _offset_array(target.v)
        parts["loc"] += float(np.sum(smooth_l1(diff))) / num_rois
        dbox[r, target.u] = weights.loc * smooth_l1_grad(diff) / num_rois
        if target.s is not None and mask_logits[r] is not None:
            value, _, grad = softmax_cross_entropy(mask_logits[r], target.s.labels, axis=0)
            parts["aff"] += value / num_rois
            dmask[r] = weights.aff * grad / num_rois

    total = weights.cls * parts["cls"] + weights.loc * parts["loc"] + weights.aff * parts["aff"]
    return HeadLossResult(total, parts, weights.cls * dcls, dbox.reshape(box_deltas.shape), dmask)


def rpn_loss_from_logits(
    objectness_logits: np.ndarray, deltas: np.ndarray, targets: RpnTargets
) -> Tuple[float, Dict[str, float], np.ndarray, np.ndarray]:
    """
    RPN objectness cross-entropy over the sampled (non-ignored) anchors plus
    Smooth L1 on positive anchors, both normalised by the sampled count.

    Args:
        objectness_logits: (A, 2) background / object logits per anchor
        deltas: (A, 4)
        targets: Output of assign_rpn_targets

    Returns:
        (total, {"rpn_cls", "rpn_loc"}, dlogits, ddeltas)
    """
    labels = targets.labels
    if objectness_logits.shape != (labels.size, 2) or deltas.shape != (labels.size, 4):
        raise ShapeError(
            f"RPN outputs {objectness_logits.shape}, {deltas.shape} do not match {labels.size} anchors"
        )
    sampled = labels != IGNORE
    num_sampled = max(1, int(sampled.sum()))
    dlogits = np.zeros_like(objectness_logits, dtype=np.float64)
    cls_value = 0.0
    if sampled.any():
        value, _, grad = softmax_cross_entropy(
            objectness_logits[sampled], (labels[sampled] == POSITIVE).astype(np.int64), axis=1
        )
        cls_value = value
        dlogits[sampled] = grad

    positive = labels == POSITIVE
    diff = deltas - targets.offsets
    loc_value = float(np.sum(smooth_l1(diff[positive]))) / num_sampled
    ddeltas = np.zeros_like(deltas, dtype=np.float64)
    ddeltas[positive] = smooth_l1_grad(diff[positive]) / num_sampled

    parts = {"rpn_cls": float(cls_value), "rpn_loc": loc_value}
    return parts["rpn_cls"] + parts["rpn_loc"], parts, dlogits, ddeltas


