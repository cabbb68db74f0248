from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import jsonlines
import numpy as np

from src.boxes import Box
from src.data import MANIFEST_NAME, check_part_connectivity, read_image, read_mask, tight_box
from src.errors import AnnotationError
from src.maskops import LabelMask

#######################################################
#  Manage the loading and validation of annotated     #
#  datasets (JSONL manifest + PPM images + PGM masks) #
#######################################################


@dataclass
class AnnotatedObject:
    bbox: Box
    class_id: int
    mask: Path


@dataclass
class Annotation:
    image: Path
    objects: List[AnnotatedObject]
    line: int = 0

    @property
    def image_id(self) -> str:
        return self.image.stem


@dataclass
class TrainingExample:
    """
    One decoded image with its objects. gt_masks[i] is image-sized and
    holds only object i's affordance labels.
    """

    image_id: str
    image: np.ndarray
    gt_boxes: List[Box]
    gt_classes: List[int]
    gt_masks: List[LabelMask]

    @property
    def image_size(self):
        return self.image.shape[0], self.image.shape[1]

    def merged_mask(self) -> LabelMask:
        """Union of the object masks (objects do not overlap in generated scenes)."""
        merged = np.zeros(self.image_size, dtype=np.int64)
        for mask in self.gt_masks:
            merged = np.where(mask.labels > 0, mask.labels, merged)
        return LabelMask(merged)


def resolve_manifest(path: Path) -> Path:
    """Accept a dataset directory or the manifest file itself."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return path


def _parse_object(raw, manifest: Path, line: int, num_object_classes: Optional[int]) -> AnnotatedObject:
    if not isinstance(raw, dict) or set(raw) != {"bbox", "class", "mask"}:
        raise AnnotationError("object needs exactly the keys bbox, class, mask", path=manifest, line=line)
    bbox = raw["bbox"]
    if not isinstance(bbox, list) or len(bbox) != 4 or not all(isinstance(v, (int, float)) for v in bbox):
        raise AnnotationError(f"bbox must be 4 numbers, got {bbox!r}", path=manifest, line=line)
    box = Box.from_array(bbox)
    if not (box.width > 0 and box.height > 0):
        raise AnnotationError(f"bbox {bbox} has no area", path=manifest, line=line)
    class_id = raw["class"]
    if not isinstance(class_id, int) or isinstance(class_id, bool) or class_id < 1:
        raise AnnotationError(f"class must be a positive integer, got {class_id!r}", path=manifest, line=line)
    if num_object_classes is not None and class_id > num_object_classes:
        raise AnnotationError(
            f"class {class_id} outside 1..{num_object_classes}", path=manifest, line=line
        )
    if not isinstance(raw["mask"], str):
        raise AnnotationError("mask must be a path string", path=manifest, line=line)
    mask_path = manifest.parent / raw["mask"]
    if not mask_path.exists():
        raise AnnotationError(f"mask file not found: {mask_path}", path=manifest, line=line)
    return AnnotatedObject(bbox=box, class_id=class_id, mask=mask_path)


def load_annotations(
    manifest_path: Path,
    num_object_classes: Optional[int] = None,
    num_affordance_classes: Optional[int] = None,
    validate_masks: bool = True,
) -> List[Annotation]:
    """
    Strictly parse a JSONL manifest. Paths are relative to the manifest's
    directory.

    With validate_masks, each mask is read and checked: labels below C+1,
    the bbox equal to the mask's tight box and every affordance region
    4-connected. Errors name the manifest line.
    """
    manifest = resolve_manifest(manifest_path)
    annotations = []
    with jsonlines.open(manifest) as reader:
        line = 0
        while True:
            line += 1
            try:
                record = reader.read()
            except EOFError:
                break
            except jsonlines.InvalidLineError as e:
                raise AnnotationError(f"invalid JSON: {e}", path=manifest, line=e.lineno)
            if not isinstance(record, dict) or set(record) != {"image", "objects"}:
                raise AnnotationError("record needs exactly the keys image, objects", path=manifest, line=line)
            if not isinstance(record["image"], str) or not isinstance(record["objects"], list):
                raise AnnotationError("image must be a string and objects a list", path=manifest, line=line)
            image_path = manifest.parent / record["image"]
            if not image_path.exists():
                raise AnnotationError(f"image file not found: {image_path}", path=manifest, line=line)
            objects = [
                _parse_object(raw, manifest, line, num_object_classes) for raw in record["objects"]
            ]
            annotation = Annotation(image=image_path, objects=objects, line=line)
            if validate_masks:
                _validate_masks(annotation, manifest, num_affordance_classes)
            annotations.append(annotation)

    ids = [a.image_id for a in annotations]
    if len(set(ids)) != len(ids):
        raise AnnotationError("image ids (file stems) must be unique", path=manifest)
    return annotations


def _validate_masks(annotation: Annotation, manifest: Path, num_affordance_classes: Optional[int]) -> None:
    num_labels = None if num_affordance_classes is None else num_affordance_classes + 1
    for obj in annotation.objects:
        try:
            mask = read_mask(obj.mask, num_labels)
            check_part_connectivity(mask, source=obj.mask)
        except AnnotationError as e:
            raise AnnotationError(str(e), path=manifest, line=annotation.line)
        box = tight_box(mask)
        if box is None or box != obj.bbox:
            raise AnnotationError(
                f"bbox {obj.bbox.as_array().tolist()} is not the tight box of {obj.mask.name} ({box})",
                path=manifest,
                line=annotation.line,
            )


def load_example(annotation: Annotation, num_affordance_classes: Optional[int] = None) -> TrainingExample:
    image = read_image(annotation.image)
    num_labels = None if num_affordance_classes is None else num_affordance_classes + 1
    masks = [read_mask(obj.mask, num_labels) for obj in annotation.objects]
    for obj, mask in zip(annotation.objects, masks):
        if mask.labels.shape != image.shape[:2]:
            raise AnnotationError(
                f"mask {obj.mask.name} is {mask.labels.shape}, image is {image.shape[:2]}",
                path=annotation.image,
            )
    return TrainingExample(
        image_id=annotation.image_id,
        image=image,
        gt_boxes=[obj.bbox for obj in annotation.objects],
        gt_classes=[obj.class_id for obj in annotation.objects],
        gt_masks=masks,
    )


def load_dataset(
    path: Path, num_object_classes: Optional[int] = None, num_affordance_classes: Optional[int] = None
) -> List[TrainingExample]:
    annotations = load_annotations(path, num_object_classes, num_affordance_classes)
    return [load_example(a, num_affordance_classes) for a in annotations]
