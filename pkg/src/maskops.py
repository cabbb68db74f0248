"""
Multiclass affordance-mask machinery: the multi-threshold resizing that
never invents labels, training-target construction, projection of
predicted maps onto detected boxes, and priority-based merging of
overlapping objects.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage

from src.boxes import Box
from src.errors import AnnotationError, ShapeError
from src.layers import RoI


@dataclass
class LabelMask:
    """
    2-D grid of affordance labels (0 = background), indexed [row, column].
    """

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ShapeError(f"label mask must be 2-D, got shape {self.labels.shape}")
        if self.labels.size and not np.issubdtype(self.labels.dtype, np.integer):
            raise ShapeError(f"label mask must hold integers, got {self.labels.dtype}")
        self.labels = self.labels.astype(np.int64, copy=False)
        if self.labels.size and self.labels.min() < 0:
            raise ShapeError("label mask values must be non-negative")

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    @classmethod
    def zeros(cls, height: int, width: int) -> "LabelMask":
        return cls(np.zeros((height, width), dtype=np.int64))

    def unique_labels(self) -> np.ndarray:
        return np.unique(self.labels)

    def validate(self, num_classes: int, source=None) -> None:
        """Raise AnnotationError if any value is >= num_classes (C + 1)."""
        if self.labels.size and self.labels.max() >= num_classes:
            raise AnnotationError(
                f"mask label {int(self.labels.max())} outside 0..{num_classes - 1}", path=source
            )


class MaskResizeSpec(BaseModel):
    """Target (height, width) and the band half-width alpha around each remapped label."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    target_size: Tuple[int, int] = (244, 244)
    alpha: float = Field(default=0.005, gt=0.0, lt=0.5)

    @field_validator("target_size")
    @classmethod
    def _positive_size(cls, size):
        if size[0] <= 0 or size[1] <= 0:
            raise ValueError(f"target size must be positive, got {size}")
        return size


@dataclass
class AffordancePriority:
    """
    Labels from high to low priority. Labels not listed rank below every
    listed label, or above them when unlisted_first is set; among
    themselves unlisted labels prefer the lower value.
    """

    order: List[int]
    unlisted_first: bool = False
    _rank: Dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.order)) != len(self.order):
            raise ValueError(f"priority order repeats a label: {self.order}")
        if any(label <= 0 for label in self.order):
            raise ValueError("priority order lists affordance labels (>= 1) only")
        self._rank = {label: len(self.order) - i for i, label in enumerate(self.order)}

    def rank_array(self, labels: np.ndarray) -> np.ndarray:
        """
        Strict total order as floats: higher wins, background is -inf.
        """
        labels = np.asarray(labels)
        rank = np.empty(labels.shape, dtype=np.float64)
        listed = np.zeros(labels.shape, dtype=bool)
        for label, r in self._rank.items():
            hit = labels == label
            rank[hit] = r
            listed |= hit
        # unlisted: lower label wins, kept strictly on one side of the listed ranks
        unlisted_rank = 1.0 / (labels.astype(np.float64) + 2.0)
        if self.unlisted_first:
            rank[~listed] = len(self.order) + 1 + unlisted_rank[~listed]
        else:
            rank[~listed] = unlisted_rank[~listed]
        rank[labels == 0] = -np.inf
        return rank

    @classmethod
    def from_names(cls, priority: Sequence[str], affordance_names: Sequence[str]) -> "AffordancePriority":
        """
        Build from affordance names (label = index in affordance_names + 1).
        An empty priority list means label order with "contain" moved last.
        """
        index = {name: i + 1 for i, name in enumerate(affordance_names)}
        if not priority:
            names = [n for n in affordance_names if n != "contain"]
            if "contain" in index:
                names.append("contain")
            priority = names
        unknown = [name for name in priority if name not in index]
        if unknown:
            raise ValueError(f"unknown affordance names in priority: {unknown}")
        return cls([index[name] for name in priority])


def bilinear_resize(values: np.ndarray, target_size: Tuple[int, int]) -> np.ndarray:
    """
    Bilinear resampling of a 2-D real array with pixel-centre alignment;
    reads beyond the border clamp to the edge.
    """
    height, width = values.shape
    out_h, out_w = target_size
    if out_h == 0 or out_w == 0:
        return np.zeros((out_h, out_w), dtype=np.float64)
    if (out_h, out_w) == (height, width):
        return values.astype(np.float64, copy=True)
    rows = (np.arange(out_h) + 0.5) * (height / out_h) - 0.5
    cols = (np.arange(out_w) + 0.5) * (width / out_w) - 0.5
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(
        values.astype(np.float64), [grid_r, grid_c], order=1, mode="nearest"
    )


def resize_multiclass_mask(mask: LabelMask, spec: MaskResizeSpec) -> LabelMask:
    """
    Resize a multiclass label mask without creating labels it did not have.

    1. Collect the sorted label set P and map it onto 0..n-1.
    2. Resize the remapped mask bilinearly to the target size.
    3. A pixel within +/- alpha of some remapped value takes that value;
       every other pixel becomes background.
    4. Map 0..n-1 back to P.

    Returns:
        LabelMask of spec.target_size with labels in P plus {0}
    """
    if mask.labels.size == 0:
        raise ShapeError("cannot resize an empty mask")
    palette = np.unique(mask.labels)
    remapped = np.searchsorted(palette, mask.labels).astype(np.float64)
    resized = bilinear_resize(remapped, spec.target_size)

    nearest = np.rint(resized)
    in_band = (np.abs(resized - nearest) <= spec.alpha) & (nearest >= 0) & (nearest <= palette.size - 1)
    labels = np.zeros(resized.shape, dtype=np.int64)
    labels[in_band] = palette[nearest[in_band].astype(np.int64)]
    return LabelMask(labels)


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _box_window(box: Box, height: int, width: int):
    """Integer pixel window [r0:r1, c0:c1] covered by a box, clipped to the grid."""
    c0 = max(0, _round_half_up(box.x1))
    r0 = max(0, _round_half_up(box.y1))
    c1 = min(width, _round_half_up(box.x2))
    r1 = min(height, _round_half_up(box.y2))
    return r0, max(r0, r1), c0, max(c0, c1)


def build_target_mask(roi: RoI, gt_mask: LabelMask, spec: MaskResizeSpec) -> LabelMask:
    """
    Training target for one RoI: the RoI's crop of the object's groundtruth
    mask (pixels outside the object are background), resized to the head
    resolution with resize_multiclass_mask.

    Args:
        roi: RoI in image coordinates
        gt_mask: Image-sized mask holding only the matched object's labels
        spec: Head resolution and alpha
    """
    box = roi.box
    if not (box.width > 0 and box.height > 0):
        raise ShapeError(f"RoI {box} has no area")
    crop_h = max(1, _round_half_up(box.y2) - _round_half_up(box.y1))
    crop_w = max(1, _round_half_up(box.x2) - _round_half_up(box.x1))
    crop = np.zeros((crop_h, crop_w), dtype=np.int64)

    r0, r1, c0, c1 = _box_window(box, gt_mask.height, gt_mask.width)
    top = r0 - _round_half_up(box.y1)
    left = c0 - _round_half_up(box.x1)
    rows = min(r1 - r0, crop_h - top)
    cols = min(c1 - c0, crop_w - left)
    if rows > 0 and cols > 0:
        crop[top:top + rows, left:left + cols] = gt_mask.labels[r0:r0 + rows, c0:c0 + cols]

    return resize_multiclass_mask(LabelMask(crop), spec)


def projected_size(box: Box) -> Tuple[int, int]:
    """(height, width) in pixels for a box's mask: half-up rounding, at least 1."""
    if not (box.width > 0 and box.height > 0):
        return 0, 0
    return max(1, _round_half_up(box.height)), max(1, _round_half_up(box.width))


def project_mask_to_box(pred: np.ndarray, box: Box, spec: MaskResizeSpec) -> LabelMask:
    """
    Turn a (C+1, H, W) per-pixel probability map into a label mask at box size:
    per-pixel argmax (ties go to the lower class), then multi-threshold resize.
    A box with no area yields an empty 0x0 mask.
    """
    if pred.ndim != 3:
        raise ShapeError(f"prediction must be (C+1, H, W), got shape {pred.shape}")
    size = projected_size(box)
    if size == (0, 0):
        return LabelMask(np.zeros((0, 0), dtype=np.int64))
    labels = LabelMask(np.argmax(pred, axis=0))
    return resize_multiclass_mask(labels, spec.model_copy(update={"target_size": size}))


def merge_overlaps_by_priority(
    masks: Sequence[Tuple[Box, LabelMask]],
    priority: AffordancePriority,
    image_size: Tuple[int, int],
) -> LabelMask:
    """
    Paste per-object masks into one image-sized map. Where non-background
    labels collide the higher-priority label wins; background never
    overwrites a label. The result does not depend on the input order.

    Args:
        masks: (box, mask at box size) pairs
        priority: Label ranking
        image_size: (height, width)
    """
    height, width = image_size
    canvas = np.zeros((height, width), dtype=np.int64)
    canvas_rank = np.full((height, width), -np.inf)

    for box, mask in masks:
        if mask.labels.size == 0:
            continue
        top, left = _round_half_up(box.y1), _round_half_up(box.x1)
        r0, c0 = max(0, top), max(0, left)
        r1 = min(height, top + mask.height)
        c1 = min(width, left + mask.width)
        if r1 <= r0 or c1 <= c0:
            continue
        patch = mask.labels[r0 - top:r1 - top, c0 - left:c1 - left]
        patch_rank = priority.rank_array(patch)
        region_rank = canvas_rank[r0:r1, c0:c1]
        wins = patch_rank > region_rank
        canvas[r0:r1, c0:c1][wins] = patch[wins]
        region_rank[wins] = patch_rank[wins]

    return LabelMask(canvas)
