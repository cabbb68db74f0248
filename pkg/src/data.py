"""
Synthetic affordance scenes, NetPBM image / mask files and the network
input resize rule.

Scenes are drawn from object templates made of axis-aligned parts, each
part carrying one affordance label:

    tool (class 1): handle (grasp) + head block (pound)
    cup  (class 2): ring body (w-grasp) around its interior (contain)

Every scene is a pure function of (SceneSpec, scene index).
"""

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import jsonlines
import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from src.boxes import Box
from src.config import AFFORDANCE_NAMES, OBJECT_CLASS_NAMES, SceneSpec
from src.errors import AnnotationError, PlacementError, ShapeError
from src.maskops import LabelMask

MANIFEST_NAME = "manifest.jsonl"

# affordance label -> RGB fill
PART_COLORS = {
    1: (196, 64, 48),
    2: (72, 72, 200),
    3: (60, 170, 90),
    4: (230, 200, 60),
}
BACKGROUND_COLOR = (128, 128, 128)
OBJECT_SIZE_RANGE = (20, 36)
PLACEMENT_MARGIN = 2


def affordance_label(name: str) -> int:
    return AFFORDANCE_NAMES.index(name) + 1


def object_class(name: str) -> int:
    return OBJECT_CLASS_NAMES.index(name) + 1


#######################################################
#  Object templates                                   #
#######################################################

def template_parts(template: str, height: int, width: int) -> List[Tuple[int, Tuple[int, int, int, int]]]:
    """
    (affordance label, (top, bottom, left, right)) rectangles in paint order;
    later parts overwrite earlier ones.
    """
    if template == "tool":
        # handle: left 60%, middle third of the height; head: right 40%, full height
        split = int(round(width * 0.6))
        band_top, band_bottom = height // 3, height - height // 3
        return [
            (affordance_label("grasp"), (band_top, band_bottom, 0, split)),
            (affordance_label("pound"), (0, height, split, width)),
        ]
    if template == "cup":
        ring = max(2, min(height, width) // 5)
        return [
            (affordance_label("w-grasp"), (0, height, 0, width)),
            (affordance_label("contain"), (ring, height - ring, ring, width - ring)),
        ]
    raise ValueError(f"unknown template {template!r}")


def render_template(template: str, height: int, width: int) -> np.ndarray:
    """
    Label grid (height, width) of one object; each part is a single
    4-connected region.
    """
    labels = np.zeros((height, width), dtype=np.int64)
    for label, (top, bottom, left, right) in template_parts(template, height, width):
        labels[top:bottom, left:right] = label
    return labels


def template_label_areas(template: str, height: int, width: int) -> Dict[int, int]:
    labels = render_template(template, height, width)
    values, counts = np.unique(labels[labels > 0], return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}


@dataclass
class SceneObject:
    class_id: int
    box: Box
    mask: LabelMask


@dataclass
class Scene:
    image: np.ndarray
    objects: List[SceneObject]


def _object_size(spec: SceneSpec, rng: np.random.Generator) -> Tuple[int, int]:
    low, high = OBJECT_SIZE_RANGE
    cap = max(low, min(high, min(spec.image_size) // 2))
    height = int(rng.integers(low, cap + 1))
    width = int(rng.integers(low, cap + 1))
    return height, width


def _overlaps(box: Box, placed: List[Box]) -> bool:
    m = PLACEMENT_MARGIN
    for other in placed:
        if box.x1 < other.x2 + m and other.x1 < box.x2 + m and box.y1 < other.y2 + m and other.y1 < box.y2 + m:
            return True
    return False


def render_scene(spec: SceneSpec, index: int) -> Scene:
    """Draw scene `index`; objects never overlap."""
    rng = np.random.default_rng([spec.seed, index])
    image_h, image_w = spec.image_size
    low, high = spec.objects_per_scene
    count = int(rng.integers(low, high + 1))

    canvas = Image.new("RGB", (image_w, image_h), color=BACKGROUND_COLOR)
    draw = ImageDraw.Draw(canvas)
    objects: List[SceneObject] = []
    placed: List[Box] = []

    for _ in range(count):
        template = spec.templates[int(rng.integers(len(spec.templates)))]
        for _attempt in range(spec.max_retries):
            height, width = _object_size(spec, rng)
            if height > image_h or width > image_w:
                continue
            top = int(rng.integers(0, image_h - height + 1))
            left = int(rng.integers(0, image_w - width + 1))
            box = Box(left, top, left + width, top + height)
            if not _overlaps(box, placed):
                break
        else:
            raise PlacementError(
                f"scene {index}: could not place a {template} after {spec.max_retries} attempts"
            )

        full = np.zeros((image_h, image_w), dtype=np.int64)
        full[top:top + height, left:left + width] = render_template(template, height, width)
        for label, (r0, r1, c0, c1) in template_parts(template, height, width):
            # PIL rectangles include their right / bottom edge
            draw.rectangle(
                [left + c0, top + r0, left + c1 - 1, top + r1 - 1], fill=PART_COLORS[label]
            )
        placed.append(box)
        objects.append(SceneObject(object_class(template), tight_box(LabelMask(full)), LabelMask(full)))

    image = np.asarray(canvas, dtype=np.uint8).copy()
    # mild per-pixel noise
    noise = rng.integers(-6, 7, size=image.shape)
    image = np.clip(image.astype(np.int64) + noise, 0, 255).astype(np.uint8)
    return Scene(image=image, objects=objects)


def tight_box(mask: LabelMask):
    """Tight box of the non-background pixels (x2 = last column + 1), None if empty."""
    rows, cols = np.nonzero(mask.labels)
    if rows.size == 0:
        return None
    return Box(float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))


def check_part_connectivity(mask: LabelMask, source=None) -> None:
    """Each affordance label of one object must form a single 4-connected region."""
    for label in np.unique(mask.labels):
        if label == 0:
            continue
        _, components = ndimage.label(mask.labels == label)
        if components != 1:
            raise AnnotationError(
                f"affordance label {int(label)} splits into {components} regions", path=source
            )


#######################################################
#  NetPBM files                                       #
#######################################################

def atomic_write(path: Path, save) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            save(handle)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def _open_netpbm(path: Path, magic: bytes) -> Image.Image:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    with open(path, "rb") as handle:
        head = handle.read(2)
    if head != magic:
        raise AnnotationError(f"expected NetPBM magic {magic.decode()}, found {head!r}", path=path, line=1)
    try:
        image = Image.open(path)
        image.load()
    except Exception as e:
        raise AnnotationError(f"malformed NetPBM file: {e}", path=path, line=1)
    return image


def read_image(path: Path) -> np.ndarray:
    """Binary PPM (P6, maxval 255) as a (H, W, 3) uint8 array."""
    image = _open_netpbm(path, b"P6")
    if image.mode != "RGB":
        raise AnnotationError(f"unsupported PPM mode {image.mode}", path=path, line=1)
    return np.asarray(image, dtype=np.uint8).copy()


def write_image(path: Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ShapeError(f"images are (H, W, 3) uint8, got {image.shape} {image.dtype}")
    atomic_write(path, lambda handle: Image.fromarray(image, "RGB").save(handle, format="PPM"))


def read_mask(path: Path, num_classes: int = None) -> LabelMask:
    """Binary PGM (P5) whose pixel values are affordance labels."""
    image = _open_netpbm(path, b"P5")
    if image.mode != "L":
        raise AnnotationError(f"mask must be an 8-bit PGM, got mode {image.mode}", path=path, line=1)
    mask = LabelMask(np.asarray(image, dtype=np.int64))
    if num_classes is not None:
        mask.validate(num_classes, source=path)
    return mask


def write_mask(path: Path, mask: LabelMask) -> None:
    if mask.labels.size and mask.labels.max() > 255:
        raise ShapeError(f"mask label {int(mask.labels.max())} does not fit an 8-bit PGM")
    pixels = mask.labels.astype(np.uint8)
    atomic_write(path, lambda handle: Image.fromarray(pixels, "L").save(handle, format="PPM"))


def render_overlay(image: np.ndarray, mask: LabelMask, alpha: float = 0.5) -> np.ndarray:
    """Blend PART_COLORS over labelled pixels; background pixels keep the input."""
    if mask.labels.shape != image.shape[:2]:
        raise ShapeError(f"mask {mask.labels.shape} does not cover image {image.shape[:2]}")
    palette = np.zeros((max(PART_COLORS) + 1, 3), dtype=np.uint8)
    for label, color in PART_COLORS.items():
        palette[label] = color
    colored = palette[np.clip(mask.labels, 0, len(palette) - 1)]
    blended = np.asarray(Image.blend(Image.fromarray(image, "RGB"), Image.fromarray(colored, "RGB"), alpha))
    return np.where((mask.labels > 0)[..., None], blended, image).astype(np.uint8)


#######################################################
#  Dataset generation and the input resize rule       #
#######################################################

def generate_synthetic_dataset(spec: SceneSpec, count: int, output_dir: Path) -> Path:
    """
    Write `count` scenes under output_dir (images/, masks/, manifest.jsonl).

    Returns:
        Path of the manifest
    """
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for index in range(count):
        scene = render_scene(spec, index)
        scene_id = f"scene_{index:05d}"
        image_rel = f"images/{scene_id}.ppm"
        write_image(output_dir / image_rel, scene.image)
        objects = []
        for k, obj in enumerate(scene.objects):
            mask_rel = f"masks/{scene_id}_obj{k}.pgm"
            write_mask(output_dir / mask_rel, obj.mask)
            objects.append(
                {
                    "bbox": [obj.box.x1, obj.box.y1, obj.box.x2, obj.box.y2],
                    "class": obj.class_id,
                    "mask": mask_rel,
                }
            )
        records.append({"image": image_rel, "objects": objects})

    manifest = output_dir / MANIFEST_NAME

    def save(handle):
        with jsonlines.Writer(handle, compact=True, sort_keys=True) as writer:
            writer.write_all(records)

    atomic_write(manifest, save)
    return manifest


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def network_scale(height: int, width: int, shorter_target: int = 600, longer_cap: int = 1000) -> float:
    """Scale that brings the shorter edge to shorter_target unless the longer edge would pass longer_cap."""
    if height <= 0 or width <= 0:
        raise ShapeError(f"image size must be positive, got {height}x{width}")
    scale = shorter_target / min(height, width)
    if max(height, width) * scale > longer_cap:
        scale = longer_cap / max(height, width)
    return scale


def resize_for_network(image: np.ndarray, shorter_target: int = 600, longer_cap: int = 1000):
    """
    Returns:
        (resized image, applied scale)
    """
    height, width = image.shape[:2]
    scale = network_scale(height, width, shorter_target, longer_cap)
    new_h, new_w = _round_half_up(height * scale), _round_half_up(width * scale)
    if (new_h, new_w) == (height, width):
        return image.copy(), scale
    resized = Image.fromarray(image).resize((new_w, new_h), Image.BILINEAR)
    return np.asarray(resized, dtype=image.dtype).copy(), scale
