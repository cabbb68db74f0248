"""
Box geometry: IoU, anchors, offset encoding, clipping and NMS.

Boxes are continuous (x1, y1, x2, y2) corner coordinates in image pixels,
with area max(0, x2 - x1) * max(0, y2 - y1) (no +1 pixel convention).
Array versions take (N, 4) float arrays in the same column order.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.errors import ShapeError


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class BoxOffset:
    """Scale-invariant centre shift and log-space size shift."""

    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "BoxOffset":
        tx, ty, tw, th = (float(v) for v in values)
        return cls(tx, ty, tw, th)


class AnchorConfig(BaseModel):
    """Anchor scales (side length in pixels), ratios (height / width) and stride."""

    model_config = ConfigDict(extra="forbid")

    scales: List[float] = Field(default=[16.0, 24.0, 32.0, 48.0, 64.0], min_length=1)
    ratios: List[float] = Field(default=[0.5, 1.0, 2.0], min_length=1)
    stride: float = Field(default=4.0, gt=0)

    @field_validator("scales", "ratios")
    @classmethod
    def _positive(cls, values: List[float]) -> List[float]:
        if any(v <= 0 for v in values):
            raise ValueError("anchor scales and ratios must be positive")
        return values

    @property
    def num_anchors(self) -> int:
        return len(self.scales) * len(self.ratios)


BoxesLike = Union[np.ndarray, Sequence[Box]]


def boxes_to_array(boxes: BoxesLike) -> np.ndarray:
    """(N, 4) float64 array from a list of Box or an array-like."""
    if isinstance(boxes, np.ndarray):
        array = boxes.astype(np.float64, copy=False)
    elif len(boxes) == 0:
        array = np.zeros((0, 4), dtype=np.float64)
    elif isinstance(boxes[0], Box):
        array = np.stack([b.as_array() for b in boxes])
    else:
        array = np.asarray(boxes, dtype=np.float64)
    array = array.reshape(-1, 4) if array.size else np.zeros((0, 4), dtype=np.float64)
    return array


def box_areas(boxes: np.ndarray) -> np.ndarray:
    return np.maximum(boxes[:, 2] - boxes[:, 0], 0.0) * np.maximum(boxes[:, 3] - boxes[:, 1], 0.0)


def iou_matrix(a: BoxesLike, b: BoxesLike) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b)); 0 where the union is empty."""
    a = boxes_to_array(a)
    b = boxes_to_array(b)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(ix2 - ix1, 0.0) * np.maximum(iy2 - iy1, 0.0)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        overlap = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return overlap


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    return float(iou_matrix([a], [b])[0, 0])


def _center_size(boxes: np.ndarray):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Row-wise offsets of boxes relative to anchors, shape (N, 4)."""
    boxes = boxes_to_array(boxes)
    anchors = boxes_to_array(anchors)
    if boxes.shape != anchors.shape:
        raise ShapeError(f"encode needs matching shapes, got {boxes.shape} and {anchors.shape}")
    cx, cy, w, h = _center_size(boxes)
    acx, acy, aw, ah = _center_size(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ShapeError("anchor boxes must have positive width and height")
    if np.any(w <= 0) or np.any(h <= 0):
        raise ShapeError("encoded boxes must have positive width and height")
    return np.stack(
        [(cx - acx) / aw, (cy - acy) / ah, np.log(w / aw), np.log(h / ah)], axis=1
    )


def decode_boxes(
    offsets: np.ndarray, anchors: np.ndarray, max_log_scale: Optional[float] = None
) -> np.ndarray:
    """
    Inverse of encode_boxes.

    Args:
        offsets: (N, 4) (t_x, t_y, t_w, t_h)
        anchors: (N, 4) reference boxes
        max_log_scale: Optional clamp on t_w / t_h (proposal decoding uses
            log(1000 / 16) to keep exp finite on untrained weights)
    """
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    anchors = boxes_to_array(anchors)
    acx, acy, aw, ah = _center_size(anchors)
    tw, th = offsets[:, 2], offsets[:, 3]
    if max_log_scale is not None:
        tw = np.minimum(tw, max_log_scale)
        th = np.minimum(th, max_log_scale)
    cx = offsets[:, 0] * aw + acx
    cy = offsets[:, 1] * ah + acy
    w = np.exp(tw) * aw
    h = np.exp(th) * ah
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_offsets(box: Box, anchor: Box) -> BoxOffset:
    return BoxOffset.from_array(encode_boxes(box.as_array()[None], anchor.as_array()[None])[0])


def decode_offsets(offset: BoxOffset, anchor: Box) -> Box:
    return Box.from_array(decode_boxes(offset.as_array()[None], anchor.as_array()[None])[0])


def anchor_shapes(config: AnchorConfig) -> np.ndarray:
    """(A, 2) anchor (width, height) pairs, scale-major; w*h == scale**2."""
    shapes = []
    for scale in config.scales:
        for ratio in config.ratios:
            root = math.sqrt(ratio)
            shapes.append((scale / root, scale * root))
    return np.array(shapes, dtype=np.float64)


def anchor_grid(config: AnchorConfig, feature_h: int, feature_w: int) -> np.ndarray:
    """
    Anchors for every feature cell as an (H * W * A, 4) array ordered
    (row, column, scale, ratio), centred at ((x + 0.5) * stride, (y + 0.5) * stride).
    """
    if feature_h <= 0 or feature_w <= 0:
        raise ShapeError(f"feature map size must be positive, got {feature_h}x{feature_w}")
    shapes = anchor_shapes(config)
    cy, cx = np.meshgrid(
        (np.arange(feature_h) + 0.5) * config.stride,
        (np.arange(feature_w) + 0.5) * config.stride,
        indexing="ij",
    )
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)       # (H*W, 2)
    half = 0.5 * shapes                                          # (A, 2)
    mins = centers[:, None, :] - half[None, :, :]
    maxs = centers[:, None, :] + half[None, :, :]
    return np.concatenate([mins, maxs], axis=2).reshape(-1, 4)


def generate_anchors(config: AnchorConfig, feature_h: int, feature_w: int) -> List[Box]:
    """feature_h * feature_w * |scales| * |ratios| anchors as Box objects."""
    return [Box.from_array(row) for row in anchor_grid(config, feature_h, feature_w)]


def nms(boxes: BoxesLike, scores: Sequence[float], iou_threshold: float) -> List[int]:
    """
    Greedy non-maximum suppression.

    Repeatedly keeps the highest-scoring remaining box (ties: lower index
    first) and drops every remaining box whose IoU with it exceeds the
    threshold.

    Returns:
        Kept indices, by descending score
    """
    boxes = boxes_to_array(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise ShapeError(f"{boxes.shape[0]} boxes but {scores.shape[0]} scores")
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")

    # stable sort on -score keeps lower indices first among ties
    order = np.argsort(-scores, kind="stable")
    areas = box_areas(boxes)
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        xx1 = np.maximum(boxes[i, 0], boxes[rest, 0])
        yy1 = np.maximum(boxes[i, 1], boxes[rest, 1])
        xx2 = np.minimum(boxes[i, 2], boxes[rest, 2])
        yy2 = np.minimum(boxes[i, 3], boxes[rest, 3])
        inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
        union = areas[i] + areas[rest] - inter
        overlap = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        order = rest[overlap <= iou_threshold]
    return keep


def clip_boxes(boxes: np.ndarray, image_w: float, image_h: float) -> np.ndarray:
    boxes = boxes_to_array(boxes).copy()
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, image_w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, image_h)
    return boxes


def clip_box(box: Box, image_w: float, image_h: float) -> Box:
    """Clamp coordinates to [0, image_w] x [0, image_h]."""
    if image_w <= 0 or image_h <= 0:
        raise ShapeError(f"image size must be positive, got {image_w}x{image_h}")
    return Box.from_array(clip_boxes(box.as_array()[None], image_w, image_h)[0])
