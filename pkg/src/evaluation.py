"""
Affordance segmentation metrics and report tables.

The score is a simplified pixelwise F-beta (beta^2 = 0.3 by default): per
affordance class, precision and recall of the predicted pixels against the
groundtruth pixels. It is not the distance-weighted weighted-F measure, so
absolute values are not comparable with published tables; trends are.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import jsonlines
import numpy as np
import pandas as pd

from src.boxes import Box, iou_matrix
from src.config import EvalConfig
from src.data import MANIFEST_NAME, atomic_write, read_mask, write_mask
from src.data_loader import load_dataset
from src.errors import AnnotationError, ShapeError
from src.executor import ImageJobExecutor
from src.maskops import LabelMask

DETECTIONS_NAME = "detections.jsonl"
REPORT_COLUMNS = ["class", "precision", "recall", "f_beta"]
METRIC_LABEL = "simplified pixelwise F_beta"


@dataclass
class ClassScore:
    precision: float
    recall: float
    f_beta: float


@dataclass
class ImageRecord:
    """Boxes, labels and scores of one image plus its full-image label mask."""

    mask: LabelMask
    boxes: List[Box]
    labels: List[int]
    scores: List[float]


@dataclass
class DatasetReport:
    per_class: pd.DataFrame        # REPORT_COLUMNS, one row per class that appears
    average: ClassScore
    detection_recall: float
    num_images: int
    beta_squared: float
    iou_threshold: float = 0.5

    def table(self) -> pd.DataFrame:
        """per_class plus the terminal `average` row."""
        average = pd.DataFrame(
            [["average", self.average.precision, self.average.recall, self.average.f_beta]],
            columns=REPORT_COLUMNS,
        )
        return pd.concat([self.per_class, average], ignore_index=True)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_labels: int) -> np.ndarray:
    """(gt label, pred label) pixel counts."""
    index = num_labels * gt.reshape(-1).astype(np.int64) + pred.reshape(-1).astype(np.int64)
    return np.bincount(index, minlength=num_labels * num_labels).reshape(num_labels, num_labels)


def f_beta(precision: float, recall: float, beta_squared: float) -> float:
    if precision + recall == 0:
        return 0.0
    return (1.0 + beta_squared) * precision * recall / (beta_squared * precision + recall)


def f_beta_per_class(
    pred: LabelMask, gt: LabelMask, config: EvalConfig, num_classes: Optional[int] = None
) -> Dict[int, ClassScore]:
    """
    Precision, recall and F-beta for every affordance class c >= 1.

    Both pred_c and gt_c empty gives 1 for all three; exactly one empty gives 0.

    Args:
        num_classes: Affordance classes C; defaults to len(config.class_names)
            widened to cover every label present
    """
    if pred.labels.shape != gt.labels.shape:
        raise ShapeError(f"prediction {pred.labels.shape} and groundtruth {gt.labels.shape} differ in size")
    top = max(int(pred.labels.max(initial=0)), int(gt.labels.max(initial=0)))
    num_classes = max(num_classes or len(config.class_names), top)
    counts = confusion_matrix(pred.labels, gt.labels, num_classes + 1)
    scores = {}
    for c in range(1, num_classes + 1):
        overlap = counts[c, c]
        pred_count = counts[:, c].sum()
        gt_count = counts[c, :].sum()
        if pred_count == 0 and gt_count == 0:
            scores[c] = ClassScore(1.0, 1.0, 1.0)
        elif pred_count == 0 or gt_count == 0:
            scores[c] = ClassScore(0.0, 0.0, 0.0)
        else:
            precision = overlap / pred_count
            recall = overlap / gt_count
            scores[c] = ClassScore(float(precision), float(recall), f_beta(precision, recall, config.beta_squared))
    return scores


def match_detections(pred: ImageRecord, gt: ImageRecord, iou_threshold: float) -> int:
    """
    Greedy matching in descending score order; a detection matches the
    unmatched groundtruth object of its class with the highest IoU at or
    above the threshold. Returns the number of matched groundtruth objects.
    """
    if not gt.boxes or not pred.boxes:
        return 0
    overlaps = iou_matrix(pred.boxes, gt.boxes)
    matched = np.zeros(len(gt.boxes), dtype=bool)
    for i in np.argsort(-np.asarray(pred.scores, dtype=np.float64), kind="stable"):
        candidates = [
            g for g in range(len(gt.boxes))
            if not matched[g] and gt.labels[g] == pred.labels[i] and overlaps[i, g] >= iou_threshold
        ]
        if candidates:
            best = max(candidates, key=lambda g: (overlaps[i, g], -g))
            matched[best] = True
    return int(matched.sum())


def _score_image(pred: ImageRecord, gt: ImageRecord, config: EvalConfig, num_classes: int):
    scores = f_beta_per_class(pred.mask, gt.mask, config, num_classes)
    present = set(np.unique(pred.mask.labels)) | set(np.unique(gt.mask.labels))
    appearing = {c: s for c, s in scores.items() if c in present}
    return appearing, match_detections(pred, gt, config.iou_threshold), len(gt.boxes)


def class_name(label: int, names: Sequence[str]) -> str:
    return names[label - 1] if 1 <= label <= len(names) else f"label{label}"


def evaluate_dataset(
    predictions: Dict[str, ImageRecord],
    groundtruth: Dict[str, ImageRecord],
    config: EvalConfig,
    max_workers: Optional[int] = None,
) -> DatasetReport:
    """
    Per-class scores, their macro average, and detection recall at
    config.iou_threshold.

    A class is averaged over the images where it appears in the prediction
    or in the groundtruth. An image that predicts a class its groundtruth
    lacks contributes F = 0 for that class; images where neither mask holds
    the class are skipped. A class seen only in predictions still gets a row.
    """
    missing = sorted(set(groundtruth) - set(predictions))
    if missing:
        raise AnnotationError(f"no prediction for image(s): {', '.join(missing)}")

    num_classes = len(config.class_names)
    executor = ImageJobExecutor(
        lambda image_id, gt: _score_image(predictions[image_id], gt, config, num_classes),
        max_workers=max_workers,
    )
    per_image = executor.run_or_raise(groundtruth.items())

    collected: Dict[int, List[ClassScore]] = {}
    matched_total = 0
    gt_total = 0
    for image_id in sorted(per_image):
        scores, matched, count = per_image[image_id]
        for c, score in scores.items():
            collected.setdefault(c, []).append(score)
        matched_total += matched
        gt_total += count

    rows = []
    for c in sorted(collected):
        values = collected[c]
        rows.append(
            [
                class_name(c, config.class_names),
                float(np.mean([v.precision for v in values])),
                float(np.mean([v.recall for v in values])),
                float(np.mean([v.f_beta for v in values])),
            ]
        )
    per_class = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    if rows:
        average = ClassScore(
            float(per_class["precision"].mean()),
            float(per_class["recall"].mean()),
            float(per_class["f_beta"].mean()),
        )
    else:
        average = ClassScore(1.0, 1.0, 1.0)
    recall = matched_total / gt_total if gt_total else 1.0
    return DatasetReport(per_class, average, recall, len(groundtruth), config.beta_squared, config.iou_threshold)


#######################################################
#  Prediction / groundtruth directories               #
#######################################################

def prediction_record(image_id: str, boxes: Sequence[Box], labels: Sequence[int], scores: Sequence[float]) -> dict:
    return {
        "image_id": image_id,
        "detections": [
            {"box": [b.x1, b.y1, b.x2, b.y2], "label": int(l), "score": float(s)}
            for b, l, s in zip(boxes, labels, scores)
        ],
    }


def write_predictions(out_dir: Path, records: Sequence[dict], masks: Dict[str, LabelMask]) -> None:
    """detections.jsonl (records sorted by image id) and one <image_id>_mask.pgm per image."""
    out_dir = Path(out_dir)
    records = sorted(records, key=lambda r: r["image_id"])
    for record in records:
        write_mask(out_dir / f"{record['image_id']}_mask.pgm", masks[record["image_id"]])

    def save(handle):
        with jsonlines.Writer(handle, compact=True, sort_keys=True) as writer:
            writer.write_all(records)

    atomic_write(out_dir / DETECTIONS_NAME, save)


def load_groundtruth_dir(path: Path, num_affordance_classes: Optional[int] = None) -> Dict[str, ImageRecord]:
    examples = load_dataset(path, num_affordance_classes=num_affordance_classes)
    return {
        ex.image_id: ImageRecord(ex.merged_mask(), list(ex.gt_boxes), list(ex.gt_classes), [1.0] * len(ex.gt_boxes))
        for ex in examples
    }


def load_prediction_dir(path: Path, num_affordance_classes: Optional[int] = None) -> Dict[str, ImageRecord]:
    """
    A directory with detections.jsonl is read as predictions; a dataset
    directory (manifest.jsonl only) is read as perfect predictions of itself.
    """
    path = Path(path)
    detections = path / DETECTIONS_NAME
    if not detections.exists():
        if (path / MANIFEST_NAME).exists():
            return load_groundtruth_dir(path, num_affordance_classes)
        raise FileNotFoundError(f"no {DETECTIONS_NAME} or {MANIFEST_NAME} in {path}")

    num_labels = None if num_affordance_classes is None else num_affordance_classes + 1
    records: Dict[str, ImageRecord] = {}
    with jsonlines.open(detections) as reader:
        for line, record in enumerate(reader, start=1):
            try:
                image_id = record["image_id"]
                boxes = [Box.from_array(d["box"]) for d in record["detections"]]
                labels = [int(d["label"]) for d in record["detections"]]
                scores = [float(d["score"]) for d in record["detections"]]
            except (KeyError, TypeError, ValueError) as e:
                raise AnnotationError(f"malformed detection record: {e}", path=detections, line=line)
            mask = read_mask(path / f"{image_id}_mask.pgm", num_labels)
            records[image_id] = ImageRecord(mask, boxes, labels, scores)
    return records


class ReportFormatter:
    """
    Converts evaluation results into CSV files and aligned text tables.
    """

    def __init__(self, float_format: str = "%.6f"):
        self.float_format = float_format

    def write_report_csv(self, report: DatasetReport, path: Path) -> None:
        table = report.table()
        atomic_write(
            Path(path),
            lambda handle: handle.write(table.to_csv(index=False, float_format=self.float_format).encode("utf-8")),
        )

    def format_report(self, report: DatasetReport) -> str:
        """Table with a header naming the metric, plus detection recall."""
        title = f"{METRIC_LABEL} (beta^2={report.beta_squared:g}), {report.num_images} image(s)"
        body = report.table().to_string(index=False, float_format=lambda v: f"{v:.4f}")
        return f"{title}\n{body}\ndetection recall @ IoU {report.iou_threshold:g}: {report.detection_recall:.4f}"

    def ablation_table(self, rows: Sequence[dict]) -> pd.DataFrame:
        """One row per mask-head variant: variant, mask_size, f_beta, detection_recall."""
        return pd.DataFrame(rows, columns=["variant", "mask_size", "f_beta", "detection_recall"])

    def write_ablation_csv(self, table: pd.DataFrame, path: Path) -> None:
        atomic_write(
            Path(path),
            lambda handle: handle.write(table.to_csv(index=False, float_format=self.float_format).encode("utf-8")),
        )

    def format_ablation(self, table: pd.DataFrame) -> str:
        title = f"effect of mask size ({METRIC_LABEL})"
        return f"{title}\n{table.to_string(index=False, float_format=lambda v: f'{v:.4f}')}"
