"""
Joint detector and affordance segmenter at desk scale.

    image -> backbone (4 conv+ReLU, 2 max-pools, stride 4)
          -> RPN (3x3 conv+ReLU, 1x1 objectness / box convs) -> proposals
          -> RoIAlign 7x7 -> detection head (2 fc+ReLU, class + per-class box)
                          -> affordance head (conv+ReLU / deconv stages, per-pixel softmax)

Backbone features are computed once and shared by the RPN and RoIAlign.
Every layer runs on the numpy kernels of src.layers with explicit
backward passes; parameters are float32 so checkpoints round-trip exactly.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from src.boxes import Box, anchor_grid, boxes_to_array, clip_boxes, decode_boxes, encode_offsets, nms
from src.config import AFFORDANCE_NAMES, BACKBONE_POOL_AFTER, ModelConfig
from src.data import resize_for_network
from src.data_loader import TrainingExample
from src.errors import NonFiniteError, ShapeError
from src.layers import (
    DeconvSpec,
    RoI,
    conv2d,
    conv2d_backward,
    deconv2d,
    deconv2d_backward,
    fully_connected,
    fully_connected_backward,
    maxpool2d,
    maxpool2d_backward,
    relu,
    relu_backward,
    roi_align,
    roi_align_backward,
    softmax,
)
from src.losses import DetectionTarget, HeadPrediction, head_loss_from_logits, rpn_loss_from_logits, softmax_cross_entropy
from src.maskops import AffordancePriority, LabelMask, MaskResizeSpec, build_target_mask, merge_overlaps_by_priority, project_mask_to_box
from src.proposals import MAX_LOG_SCALE, assign_rpn_targets, generate_proposals, sample_rois, select_inference_rois
from src.tensor import Tensor, sgd_momentum_step

PARAM_DTYPE = np.float32
# appended groundtruth boxes outrank every objectness probability
GT_PROPOSAL_SCORE = 2.0


class LayerOp(NamedTuple):
    kind: str                       # conv | deconv | relu | pool
    name: Optional[str] = None
    padding: int = 0
    spec: Optional[DeconvSpec] = None


def run_layers(ops: Sequence[LayerOp], x: np.ndarray, params: Dict[str, np.ndarray]):
    """Forward through a layer sequence; returns (output, caches)."""
    caches = []
    for op in ops:
        if op.kind == "conv":
            x, cache = conv2d(x, params[f"{op.name}.weight"], params[f"{op.name}.bias"], padding=op.padding)
        elif op.kind == "deconv":
            x, cache = deconv2d(x, op.spec, params[f"{op.name}.weight"], params[f"{op.name}.bias"])
        elif op.kind == "relu":
            x, cache = relu(x)
        elif op.kind == "pool":
            x, cache = maxpool2d(x, 2)
        else:
            raise ValueError(f"unknown layer kind {op.kind!r}")
        caches.append((op, cache))
    return x, caches


def backprop_layers(caches, dout: np.ndarray, grads: Dict[str, np.ndarray]) -> np.ndarray:
    """Backward through run_layers caches, accumulating parameter gradients."""
    for op, cache in reversed(caches):
        if op.kind in ("conv", "deconv"):
            backward = conv2d_backward if op.kind == "conv" else deconv2d_backward
            dout, dweights, dbias = backward(dout, cache)
            grads[f"{op.name}.weight"] += dweights
            grads[f"{op.name}.bias"] += dbias
        elif op.kind == "relu":
            dout = relu_backward(dout, cache)
        else:
            dout = maxpool2d_backward(dout, cache)
    return dout


@dataclass
class LossReport:
    iteration: int
    total: float
    cls: float
    loc: float
    aff: float
    rpn: float
    lr: float
    num_positive_rois: int

    def as_row(self) -> Dict[str, float]:
        return {
            "iter": self.iteration,
            "total": self.total,
            "cls": self.cls,
            "loc": self.loc,
            "aff": self.aff,
            "rpn": self.rpn,
            "lr": self.lr,
        }


@dataclass
class Detection:
    box: Box
    label: int
    score: float
    mask: Optional[LabelMask] = None


@dataclass
class InferenceResult:
    detections: List[Detection]
    merged: LabelMask


@dataclass
class ForwardOutput:
    proposals: np.ndarray
    proposal_scores: np.ndarray
    rois: List[RoI]
    predictions: List[HeadPrediction] = field(default_factory=list)


@dataclass
class _RpnOutput:
    logits: np.ndarray      # (A_total, 2)
    deltas: np.ndarray      # (A_total, 4)
    feature_hw: Tuple[int, int]
    caches: list
    cls_cache: dict
    bbox_cache: dict


def default_priority(num_affordance_classes: int) -> AffordancePriority:
    """Label order with contain last for the standard label set, plain label order otherwise."""
    if num_affordance_classes == len(AFFORDANCE_NAMES):
        return AffordancePriority.from_names([], AFFORDANCE_NAMES)
    return AffordancePriority(list(range(1, num_affordance_classes + 1)))


def decode_class_detections(
    rois: Sequence[RoI],
    probs: np.ndarray,
    box_deltas: np.ndarray,
    image_size: Tuple[int, int],
    nms_iou: float,
) -> List[Detection]:
    """
    Per RoI: best foreground class, its score and its class-specific box.
    NMS runs per class; the result is sorted by descending score.
    """
    if not rois:
        return []
    height, width = image_size
    num_classes = probs.shape[1]
    roi_boxes = boxes_to_array([r.box for r in rois])
    labels = probs[:, 1:].argmax(axis=1) + 1
    scores = probs[np.arange(len(rois)), labels]
    deltas = box_deltas.reshape(len(rois), num_classes, 4)[np.arange(len(rois)), labels]
    boxes = clip_boxes(decode_boxes(deltas, roi_boxes, max_log_scale=MAX_LOG_SCALE), width, height)
    has_area = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])

    kept: List[Detection] = []
    for label in range(1, num_classes):
        index = np.where((labels == label) & has_area)[0]
        if index.size == 0:
            continue
        for k in nms(boxes[index], scores[index], nms_iou):
            i = index[k]
            kept.append(Detection(Box.from_array(boxes[i]), int(label), float(scores[i])))
    order = np.argsort([-d.score for d in kept], kind="stable")
    return [kept[i] for i in order]


def apply_score_gate(detections: Sequence[Detection], score_gate: float) -> List[Detection]:
    """
    Keep detections scoring above the gate. When none does, the single
    highest-scoring detection is kept instead.
    """
    passed = [d for d in detections if d.score > score_gate]
    if passed or not detections:
        return passed
    best = max(range(len(detections)), key=lambda i: (detections[i].score, -i))
    return [detections[best]]


class AffordanceDetector:
    """
    Network parameters, momentum buffers and the training iteration counter.

    Args:
        config: Validated model configuration
        seed: Seeds weight initialisation and per-iteration sampling
        params: Optional named parameters (from a checkpoint)
        velocity: Optional momentum buffers
        iteration: Training iterations already taken
    """

    def __init__(
        self,
        config: ModelConfig,
        seed: int = 0,
        params: Optional[Dict[str, np.ndarray]] = None,
        velocity: Optional[Dict[str, np.ndarray]] = None,
        iteration: int = 0,
    ):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.config = config
        self.seed = seed
        self.iteration = iteration
        self._build_layers()
        shapes = self.parameter_shapes()
        if params is None:
            params = self._init_params(shapes, seed)
        self._check_params(params, shapes, "parameter")
        self.params = {name: np.ascontiguousarray(params[name], dtype=PARAM_DTYPE) for name in shapes}
        if velocity is None:
            velocity = {name: np.zeros(shape, dtype=PARAM_DTYPE) for name, shape in shapes.items()}
        self._check_params(velocity, shapes, "velocity")
        self.velocity = {name: np.ascontiguousarray(velocity[name], dtype=PARAM_DTYPE) for name in shapes}

    # ------------------------------------------------------------------
    # architecture
    # ------------------------------------------------------------------

    def _build_layers(self) -> None:
        cfg = self.config
        widths = cfg.backbone_widths
        self._shapes: Dict[str, Tuple[int, ...]] = {}
        self._init_std: Dict[str, float] = {}

        def add_conv(name, c_out, c_in, k, std_scale=None):
            self._shapes[f"{name}.weight"] = (c_out, c_in, k, k)
            self._shapes[f"{name}.bias"] = (c_out,)
            self._init_std[f"{name}.weight"] = std_scale or np.sqrt(2.0 / (c_in * k * k))

        self.backbone_ops: List[LayerOp] = []
        c_in = 3
        for i, width in enumerate(widths):
            name = f"backbone.conv{i + 1}"
            add_conv(name, width, c_in, 3)
            self.backbone_ops += [LayerOp("conv", name, 1), LayerOp("relu")]
            if i in BACKBONE_POOL_AFTER:
                self.backbone_ops.append(LayerOp("pool"))
            c_in = width
        feature_channels = c_in

        num_anchors = cfg.anchors.num_anchors
        add_conv("rpn.conv", cfg.rpn.conv_width, feature_channels, 3)
        add_conv("rpn.cls", 2 * num_anchors, cfg.rpn.conv_width, 1, std_scale=0.01)
        add_conv("rpn.bbox", 4 * num_anchors, cfg.rpn.conv_width, 1, std_scale=0.01)
        self.rpn_ops = [LayerOp("conv", "rpn.conv", 1), LayerOp("relu")]

        pool_h, pool_w = cfg.roialign_output
        k1 = cfg.num_object_classes + 1
        fc_layers = [
            ("head.fc1", feature_channels * pool_h * pool_w, cfg.fc_width, None),
            ("head.fc2", cfg.fc_width, cfg.fc_width, None),
            ("head.cls", cfg.fc_width, k1, 0.01),
            ("head.bbox", cfg.fc_width, 4 * k1, 0.001),
        ]
        for name, d_in, d_out, std in fc_layers:
            self._shapes[f"{name}.weight"] = (d_in, d_out)
            self._shapes[f"{name}.bias"] = (d_out,)
            self._init_std[f"{name}.weight"] = std or np.sqrt(2.0 / d_in)

        self.mask_ops: List[LayerOp] = []
        c_in = feature_channels
        last = len(cfg.mask_head) - 1
        for j, stage in enumerate(cfg.mask_head):
            for i in range(cfg.mask_convs_per_stage):
                name = f"mask.stage{j + 1}.conv{i + 1}"
                add_conv(name, cfg.mask_width, c_in, 3)
                self.mask_ops += [LayerOp("conv", name, 1), LayerOp("relu")]
                c_in = cfg.mask_width
            c_out = cfg.num_affordance_classes + 1 if j == last else cfg.mask_width
            spec = stage.model_copy(update={"in_channels": c_in, "out_channels": c_out})
            name = f"mask.stage{j + 1}.deconv"
            k = spec.kernel_size
            self._shapes[f"{name}.weight"] = (c_in, c_out, k, k)
            self._shapes[f"{name}.bias"] = (c_out,)
            effective_fan_in = c_in * k * k / float(spec.stride * spec.stride)
            self._init_std[f"{name}.weight"] = 0.01 if j == last else np.sqrt(2.0 / effective_fan_in)
            self.mask_ops.append(LayerOp("deconv", name, spec=spec))
            if j != last:
                self.mask_ops.append(LayerOp("relu"))
            c_in = c_out

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return dict(self._shapes)

    def _init_params(self, shapes, seed: int) -> Dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in shapes.items():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape, dtype=PARAM_DTYPE)
            else:
                params[name] = (rng.standard_normal(shape) * self._init_std[name]).astype(PARAM_DTYPE)
        return params

    @staticmethod
    def _check_params(values, shapes, what: str) -> None:
        missing = sorted(set(shapes) - set(values))
        extra = sorted(set(values) - set(shapes))
        if missing or extra:
            raise ShapeError(f"{what} names do not match the architecture (missing {missing}, unexpected {extra})")
        for name, shape in shapes.items():
            if tuple(np.shape(values[name])) != tuple(shape):
                raise ShapeError(f"{what} {name} has shape {np.shape(values[name])}, expected {shape}")

    # ------------------------------------------------------------------
    # forward pieces
    # ------------------------------------------------------------------

    def _prepare(self, image) -> np.ndarray:
        """(H, W, 3) uint8 or [0, 1] float image -> (1, 3, H, W) float32, centred."""
        array = image.data if isinstance(image, Tensor) else np.asarray(image)
        if array.ndim != 3 or array.shape[2] != 3:
            raise ShapeError(f"image must be (H, W, 3), got shape {array.shape}")
        stride = self.config.feature_stride
        if array.shape[0] < stride or array.shape[1] < stride:
            raise ShapeError(f"image {array.shape[:2]} is smaller than one backbone stride ({stride})")
        if array.dtype == np.uint8:
            values = array.astype(PARAM_DTYPE) / 255.0
        else:
            values = array.astype(PARAM_DTYPE)
        return np.ascontiguousarray((values - 0.5).transpose(2, 0, 1)[None], dtype=PARAM_DTYPE)

    def _backbone(self, x: np.ndarray):
        return run_layers(self.backbone_ops, x, self.params)

    def _rpn(self, features: np.ndarray) -> _RpnOutput:
        hidden, caches = run_layers(self.rpn_ops, features, self.params)
        cls_map, cls_cache = conv2d(hidden, self.params["rpn.cls.weight"], self.params["rpn.cls.bias"])
        box_map, bbox_cache = conv2d(hidden, self.params["rpn.bbox.weight"], self.params["rpn.bbox.bias"])
        num_anchors = self.config.anchors.num_anchors
        fh, fw = features.shape[2], features.shape[3]
        # channel a * 2 + k -> (row, col, anchor, k), the anchor_grid order
        logits = cls_map[0].reshape(num_anchors, 2, fh, fw).transpose(2, 3, 0, 1).reshape(-1, 2)
        deltas = box_map[0].reshape(num_anchors, 4, fh, fw).transpose(2, 3, 0, 1).reshape(-1, 4)
        return _RpnOutput(logits, deltas, (fh, fw), caches, cls_cache, bbox_cache)

    def _rpn_backward(self, rpn: _RpnOutput, dlogits: np.ndarray, ddeltas: np.ndarray, grads) -> np.ndarray:
        num_anchors = self.config.anchors.num_anchors
        fh, fw = rpn.feature_hw
        dcls = dlogits.reshape(fh, fw, num_anchors, 2).transpose(2, 3, 0, 1).reshape(1, 2 * num_anchors, fh, fw)
        dbox = ddeltas.reshape(fh, fw, num_anchors, 4).transpose(2, 3, 0, 1).reshape(1, 4 * num_anchors, fh, fw)
        dhidden = np.zeros(rpn.cls_cache["x_shape"], dtype=np.float64)
        for prefix, dout, cache in (("rpn.cls", dcls, rpn.cls_cache), ("rpn.bbox", dbox, rpn.bbox_cache)):
            dx, dweights, dbias = conv2d_backward(dout, cache)
            grads[f"{prefix}.weight"] += dweights
            grads[f"{prefix}.bias"] += dbias
            dhidden += dx
        return backprop_layers(rpn.caches, dhidden, grads)

    def _anchors(self, feature_hw: Tuple[int, int]) -> np.ndarray:
        return anchor_grid(self.config.anchors, feature_hw[0], feature_hw[1])

    def _pool(self, features: np.ndarray, rois: Sequence[RoI]):
        scale = 1.0 / self.config.feature_stride
        outputs, caches = [], []
        for roi in rois:
            out, cache = roi_align(features, roi, self.config.roialign_output, scale)
            outputs.append(out)
            caches.append(cache)
        return np.stack(outputs), caches

    def _head(self, pooled: np.ndarray):
        p = self.params
        h1, c1 = fully_connected(pooled, p["head.fc1.weight"], p["head.fc1.bias"])
        a1, r1 = relu(h1)
        h2, c2 = fully_connected(a1, p["head.fc2.weight"], p["head.fc2.bias"])
        a2, r2 = relu(h2)
        cls_logits, cc = fully_connected(a2, p["head.cls.weight"], p["head.cls.bias"])
        box_deltas, cb = fully_connected(a2, p["head.bbox.weight"], p["head.bbox.bias"])
        return cls_logits, box_deltas, (c1, r1, c2, r2, cc, cb)

    def _head_backward(self, dcls: np.ndarray, dbox: np.ndarray, cache, grads) -> np.ndarray:
        c1, r1, c2, r2, cc, cb = cache
        da2 = np.zeros(cc["x"].shape, dtype=np.float64)
        for name, dout, layer_cache in (("head.cls", dcls, cc), ("head.bbox", dbox, cb)):
            dx, dweights, dbias = fully_connected_backward(dout, layer_cache)
            grads[f"{name}.weight"] += dweights
            grads[f"{name}.bias"] += dbias
            da2 += dx
        dx, dweights, dbias = fully_connected_backward(relu_backward(da2, r2), c2)
        grads["head.fc2.weight"] += dweights
        grads["head.fc2.bias"] += dbias
        dx, dweights, dbias = fully_connected_backward(relu_backward(dx, r1), c1)
        grads["head.fc1.weight"] += dweights
        grads["head.fc1.bias"] += dbias
        return dx

    def mask_logits(self, pooled: np.ndarray):
        """(M, C, 7, 7) pooled features -> ((M, C_aff + 1, S, S) logits, caches)."""
        return run_layers(self.mask_ops, pooled, self.params)

    def _proposals(self, rpn: _RpnOutput, image_size: Tuple[int, int], keep: int):
        rpn_cfg = self.config.rpn
        objectness = softmax(rpn.logits, axis=1)[:, 1]
        return generate_proposals(
            self._anchors(rpn.feature_hw),
            objectness,
            rpn.deltas,
            image_size,
            pre_nms_top_n=rpn_cfg.pre_nms_top_n,
            nms_iou=rpn_cfg.nms_iou,
            post_nms_top_n=keep,
            min_size=rpn_cfg.min_size,
        )

    # ------------------------------------------------------------------
    # public operations
    # ------------------------------------------------------------------

    def forward(self, image, mode: str = "infer", with_masks: bool = True) -> ForwardOutput:
        """
        Proposals and per-RoI head predictions (class probabilities, per-class
        offsets and, with_masks, per-pixel affordance probabilities).

        mode "train" keeps the top k_train proposals, "infer" the top k_infer.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        x = self._prepare(image)
        image_size = (x.shape[2], x.shape[3])
        features, _ = self._backbone(x)
        rpn = self._rpn(features)
        keep = self.config.head.k_train if mode == "train" else self.config.infer.k_infer
        proposals, scores = self._proposals(rpn, image_size, keep)
        rois = select_inference_rois(proposals, scores, keep)
        output = ForwardOutput(proposals, scores, rois)
        if not rois:
            return output

        pooled, _ = self._pool(features, rois)
        cls_logits, box_deltas, _ = self._head(pooled)
        probs = softmax(cls_logits, axis=1)
        k1 = self.config.num_object_classes + 1
        for r in range(len(rois)):
            m = None
            if with_masks:
                logits, _ = self.mask_logits(pooled[r:r + 1])
                m = softmax(logits[0], axis=0)
            output.predictions.append(HeadPrediction(probs[r], box_deltas[r].reshape(k1, 4), m))
        return output

    def train_step(self, example: TrainingExample, rng_seed: Optional[int] = None) -> LossReport:
        """
        One forward / backward / SGD-with-momentum update on a single image.

        Sampling randomness is drawn from (seed, iteration) so repeated runs
        reproduce the same trajectory. A non-finite loss term aborts before
        any parameter changes.
        """
        cfg = self.config
        iteration = self.iteration
        seed = self.seed if rng_seed is None else rng_seed
        rpn_seed, roi_seed = (int(v) for v in np.random.default_rng([seed, iteration]).integers(0, 2**31 - 1, size=2))
        weights = cfg.train.loss_weights

        gt_boxes = list(example.gt_boxes)
        x = self._prepare(example.image)
        image_size = (x.shape[2], x.shape[3])
        grads = {name: np.zeros(shape, dtype=np.float64) for name, shape in self._shapes.items()}

        features, backbone_caches = self._backbone(x)
        rpn = self._rpn(features)
        rpn_targets = assign_rpn_targets(
            self._anchors(rpn.feature_hw),
            gt_boxes,
            pos_iou=cfg.rpn.pos_iou,
            neg_iou=cfg.rpn.neg_iou,
            batch_size=cfg.rpn.batch_size,
            pos_fraction=cfg.rpn.pos_fraction,
            rng_seed=rpn_seed,
        )
        rpn_total, _, drpn_logits, drpn_deltas = rpn_loss_from_logits(rpn.logits, rpn.deltas, rpn_targets)
        self._require_finite("rpn", rpn_total, iteration)

        proposals, scores = self._proposals(rpn, image_size, cfg.head.k_train)
        if cfg.head.append_gt_boxes and gt_boxes:
            proposals = np.vstack([proposals, boxes_to_array(gt_boxes)])
            scores = np.concatenate([scores, np.full(len(gt_boxes), GT_PROPOSAL_SCORE)])
        has_area = (proposals[:, 2] > proposals[:, 0]) & (proposals[:, 3] > proposals[:, 1])
        samples = sample_rois(
            proposals[has_area],
            scores[has_area],
            gt_boxes,
            example.gt_classes,
            k_train=cfg.head.k_train,
            batch_size=cfg.head.batch_size,
            pos_ratio=cfg.head.pos_ratio,
            iou_threshold=cfg.head.iou_threshold,
            rng_seed=roi_seed,
        )

        parts = {"cls": 0.0, "loc": 0.0, "aff": 0.0}
        dfeatures = self._rpn_backward(rpn, drpn_logits, drpn_deltas, grads)
        num_positive = sum(1 for s in samples if s.label >= 1)
        if samples:
            rois = [s.roi for s in samples]
            num_rois = len(rois)
            targets = [
                DetectionTarget(s.label, encode_offsets(gt_boxes[s.matched_gt], s.roi.box))
                if s.label >= 1 else DetectionTarget(0)
                for s in samples
            ]
            pooled, pool_caches = self._pool(features, rois)
            cls_logits, box_deltas, head_cache = self._head(pooled)
            head = head_loss_from_logits(cls_logits, box_deltas, [None] * num_rois, targets, weights)
            parts["cls"], parts["loc"] = head.parts["cls"], head.parts["loc"]
            self._require_finite("cls", parts["cls"], iteration)
            self._require_finite("loc", parts["loc"], iteration)
            dpooled = self._head_backward(head.dcls, head.dbox, head_cache, grads)

            mask_size = cfg.mask_size
            resize_spec = MaskResizeSpec(target_size=(mask_size, mask_size))
            positives = [r for r, s in enumerate(samples) if s.label >= 1]
            if cfg.head.max_mask_rois is not None:
                positives = positives[:cfg.head.max_mask_rois]
            for r in positives:
                sample = samples[r]
                target_mask = build_target_mask(sample.roi, example.gt_masks[sample.matched_gt], resize_spec)
                logits, mask_caches = self.mask_logits(pooled[r:r + 1])
                value, _, dlogits = softmax_cross_entropy(logits[0], target_mask.labels, axis=0)
                self._require_finite("aff", value, iteration)
                parts["aff"] += value / num_rois
                dx = backprop_layers(mask_caches, (weights.aff / num_rois) * dlogits[None], grads)
                dpooled[r] += dx[0]

            for r, cache in enumerate(pool_caches):
                dfeatures += roi_align_backward(dpooled[r], cache)

        backprop_layers(backbone_caches, dfeatures, grads)

        lr = cfg.train.lr_at(iteration)
        if lr > 0:
            for name in self.params:
                self.params[name], self.velocity[name] = sgd_momentum_step(
                    self.params[name],
                    grads[name].astype(PARAM_DTYPE),
                    self.velocity[name],
                    lr,
                    momentum=cfg.train.momentum,
                    weight_decay=cfg.train.weight_decay,
                )
        self.iteration += 1

        head_total = weights.cls * parts["cls"] + weights.loc * parts["loc"] + weights.aff * parts["aff"]
        return LossReport(
            iteration=iteration,
            total=float(head_total + rpn_total),
            cls=float(parts["cls"]),
            loc=float(parts["loc"]),
            aff=float(parts["aff"]),
            rpn=float(rpn_total),
            lr=float(lr),
            num_positive_rois=num_positive,
        )

    @staticmethod
    def _require_finite(term: str, value: float, iteration: int) -> None:
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite {term} loss ({value}) at iteration {iteration}")

    def infer(self, image, priority: Optional[AffordancePriority] = None) -> InferenceResult:
        """
        Detect objects and segment their affordances.

        Top-k_infer proposals go through the detection head, boxes are
        decoded per class and suppressed per class, the score gate keeps
        confident detections (or the single best one), then each surviving
        box gets a mask projected to its size and all masks are merged by
        affordance priority.
        """
        cfg = self.config
        array = image.data if isinstance(image, Tensor) else np.asarray(image)
        original_size = (array.shape[0], array.shape[1])
        scale = 1.0
        if cfg.resize_images:
            array, scale = resize_for_network(array)
        priority = priority or default_priority(cfg.num_affordance_classes)

        x = self._prepare(array)
        image_size = (x.shape[2], x.shape[3])
        features, _ = self._backbone(x)
        rpn = self._rpn(features)
        proposals, scores = self._proposals(rpn, image_size, cfg.infer.k_infer)
        rois = select_inference_rois(proposals, scores, cfg.infer.k_infer)
        if not rois:
            return InferenceResult([], LabelMask.zeros(*original_size))

        pooled, _ = self._pool(features, rois)
        cls_logits, box_deltas, _ = self._head(pooled)
        candidates = decode_class_detections(
            rois, softmax(cls_logits, axis=1), box_deltas, image_size, cfg.infer.nms_iou
        )
        detections = apply_score_gate(candidates, cfg.infer.score_gate)

        resize_spec = MaskResizeSpec()
        for det in detections:
            mask_pooled, _ = self._pool(features, [RoI(det.box)])
            logits, _ = self.mask_logits(mask_pooled)
            probs = softmax(logits[0], axis=0)
            if scale != 1.0:
                det.box = Box.from_array(
                    clip_boxes(det.box.as_array()[None] / scale, original_size[1], original_size[0])[0]
                )
            det.mask = project_mask_to_box(probs, det.box, resize_spec)

        merged = merge_overlaps_by_priority(
            [(d.box, d.mask) for d in detections], priority, original_size
        )
        return InferenceResult(detections, merged)


def example_order(num_examples: int, iteration: int, seed: int) -> int:
    """Index of the example visited at an iteration: one shuffled pass per epoch."""
    epoch, position = divmod(iteration, num_examples)
    return int(np.random.default_rng([seed, epoch, num_examples]).permutation(num_examples)[position])


def fit(
    detector: AffordanceDetector,
    examples: Sequence[TrainingExample],
    iterations: Optional[int] = None,
    on_step: Optional[Callable[[LossReport], None]] = None,
) -> List[LossReport]:
    """
    Run train_step until the detector has taken `iterations` steps in total
    (config.train.iterations by default), one image per step.
    """
    if not examples:
        raise ValueError("training needs at least one example")
    target = detector.config.train.iterations if iterations is None else iterations
    reports = []
    while detector.iteration < target:
        index = example_order(len(examples), detector.iteration, detector.seed)
        report = detector.train_step(examples[index])
        reports.append(report)
        if on_step is not None:
            on_step(report)
    return reports
