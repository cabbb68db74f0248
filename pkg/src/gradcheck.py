"""
Finite-difference checks of every hand-written backward pass.

Each case draws random float64 inputs from a seeded generator, reduces the
op's output to a scalar with a random projection, and compares the
analytic gradient of every differentiable input against central
differences. Inputs are kept away from kinks (ReLU at 0, Smooth L1 at
|x| = 1, max ties) so the comparison is well posed.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from src.boxes import Box, BoxOffset
from src.errors import UsageError
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
    softmax_backward,
)
from src.losses import (
    DetectionTarget,
    HeadPrediction,
    LossWeights,
    affordance_loss,
    affordance_loss_backward,
    box_regression_loss,
    box_regression_loss_backward,
    classification_loss,
    classification_loss_backward,
    head_loss_from_logits,
    multi_task_loss,
    multi_task_loss_backward,
    rpn_loss_from_logits,
)
from src.maskops import LabelMask
from src.proposals import IGNORE, NEGATIVE, POSITIVE, RpnTargets
from src.tensor import finite_diff_gradient, relative_error

TOLERANCE = 1e-4
DEFAULT_SEEDS = 20


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    seeds: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance


def _compare(loss_fn: Callable[..., float], point: Dict[str, np.ndarray], analytic: Dict[str, np.ndarray]) -> float:
    """Max relative error over every input named in `point`."""
    worst = 0.0
    for name, value in point.items():
        def f(v, name=name):
            return loss_fn(**{**point, name: v})

        numeric = finite_diff_gradient(f, value).data
        worst = max(worst, relative_error(analytic[name], numeric))
    return worst


def _away_from(values: np.ndarray, kink: float, gap: float = 0.02) -> np.ndarray:
    """Push |values| at least `gap` away from `kink`."""
    close = np.abs(np.abs(values) - kink) < gap
    return np.where(close, values + np.sign(values + 1e-12) * 2 * gap, values)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _case_conv(rng: np.random.Generator) -> float:
    x = rng.normal(size=(2, 3, 6, 6))
    w = 0.5 * rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    out, cache = conv2d(x, w, b, stride, padding)
    g = rng.normal(size=out.shape)
    dx, dw, db = conv2d_backward(g, cache)
    return _compare(
        lambda x, w, b: float(np.sum(conv2d(x, w, b, stride, padding)[0] * g)),
        {"x": x, "w": w, "b": b},
        {"x": dx, "w": dw, "b": db},
    )


_DECONV_GEOMETRIES = [(4, 2, 1), (6, 4, 1), (3, 1, 1), (4, 4, 0), (8, 4, 0)]


def _case_deconv(rng: np.random.Generator) -> float:
    k, s, d = _DECONV_GEOMETRIES[int(rng.integers(len(_DECONV_GEOMETRIES)))]
    spec = DeconvSpec(kernel_size=k, stride=s, padding=d, in_channels=2, out_channels=3)
    x = rng.normal(size=(1, 2, 3, 3))
    w = 0.5 * rng.normal(size=(2, 3, k, k))
    b = rng.normal(size=3)
    out, cache = deconv2d(x, spec, w, b)
    g = rng.normal(size=out.shape)
    dx, dw, db = deconv2d_backward(g, cache)
    return _compare(
        lambda x, w, b: float(np.sum(deconv2d(x, spec, w, b)[0] * g)),
        {"x": x, "w": w, "b": b},
        {"x": dx, "w": dw, "b": db},
    )


def _case_relu(rng: np.random.Generator) -> float:
    x = _away_from(rng.normal(size=(2, 3, 4, 4)), 0.0)
    out, cache = relu(x)
    g = rng.normal(size=out.shape)
    return _compare(lambda x: float(np.sum(relu(x)[0] * g)), {"x": x}, {"x": relu_backward(g, cache)})


def _case_maxpool(rng: np.random.Generator) -> float:
    # distinct values 0.01 apart, so no window max is within epsilon of a tie
    shape = (2, 2, 6, 6)
    x = 0.01 * rng.permutation(int(np.prod(shape))).reshape(shape).astype(np.float64)
    out, cache = maxpool2d(x, 2)
    g = rng.normal(size=out.shape)
    return _compare(
        lambda x: float(np.sum(maxpool2d(x, 2)[0] * g)), {"x": x}, {"x": maxpool2d_backward(g, cache)}
    )


def _case_fc(rng: np.random.Generator) -> float:
    x = rng.normal(size=(3, 2, 3))
    w = rng.normal(size=(6, 4))
    b = rng.normal(size=4)
    out, cache = fully_connected(x, w, b)
    g = rng.normal(size=out.shape)
    dx, dw, db = fully_connected_backward(g, cache)
    return _compare(
        lambda x, w, b: float(np.sum(fully_connected(x, w, b)[0] * g)),
        {"x": x, "w": w, "b": b},
        {"x": dx, "w": dw, "b": db},
    )


def _case_softmax(rng: np.random.Generator) -> float:
    x = rng.normal(size=(3, 5, 2))
    axis = int(rng.integers(0, 3))
    probs = softmax(x, axis=axis)
    g = rng.normal(size=probs.shape)
    return _compare(
        lambda x: float(np.sum(softmax(x, axis=axis) * g)),
        {"x": x},
        {"x": softmax_backward(g, probs, axis=axis)},
    )


def _case_roi_align(rng: np.random.Generator) -> float:
    # image 16 x 16 at spatial scale 0.5; the RoI stays inside the sampled
    # area so no read clamps at the border
    x1, y1 = rng.uniform(1.0, 7.0, size=2)
    x2, y2 = x1 + rng.uniform(2.0, 15.0 - x1), y1 + rng.uniform(2.0, 15.0 - y1)
    roi = RoI(Box(x1, y1, x2, y2), batch_index=int(rng.integers(0, 2)))
    fmap = rng.normal(size=(2, 2, 8, 8))
    out, cache = roi_align(fmap, roi, (3, 3), 0.5)
    g = rng.normal(size=out.shape)
    return _compare(
        lambda fmap: float(np.sum(roi_align(fmap, roi, (3, 3), 0.5)[0] * g)),
        {"fmap": fmap},
        {"fmap": roi_align_backward(g, cache)},
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _case_classification_loss(rng: np.random.Generator) -> float:
    p = softmax(rng.normal(size=4), axis=0)
    u = int(rng.integers(0, 4))
    return _compare(
        lambda p: classification_loss(p, u), {"p": p}, {"p": classification_loss_backward(p, u)}
    )


def _case_box_regression_loss(rng: np.random.Generator) -> float:
    t = rng.normal(size=4)
    v = t - _away_from(rng.uniform(-2.5, 2.5, size=4), 1.0)
    return _compare(
        lambda t: box_regression_loss(t, v), {"t": t}, {"t": box_regression_loss_backward(t, v)}
    )


def _case_affordance_loss(rng: np.random.Generator) -> float:
    m = rng.uniform(0.05, 1.0, size=(3, 4, 5))
    s = LabelMask(rng.integers(0, 3, size=(4, 5)))
    return _compare(lambda m: affordance_loss(m, s), {"m": m}, {"m": affordance_loss_backward(m, s)})


def _case_multi_task_loss(rng: np.random.Generator) -> float:
    num_classes = 3
    p = softmax(rng.normal(size=num_classes), axis=0)
    t = rng.normal(size=(num_classes, 4))
    m = rng.uniform(0.05, 1.0, size=(3, 4, 4))
    u = int(rng.integers(0, num_classes))
    v = BoxOffset.from_array(t[u] - _away_from(rng.uniform(-2.5, 2.5, size=4), 1.0))
    target = DetectionTarget(u=u, v=v, s=LabelMask(rng.integers(0, 3, size=(4, 4))))
    weights = LossWeights(cls=rng.uniform(0.5, 2), loc=rng.uniform(0.5, 2), aff=rng.uniform(0.5, 2))
    dp, dt, dm = multi_task_loss_backward(HeadPrediction(p, t, m), target, weights)
    return _compare(
        lambda p, t, m: multi_task_loss(HeadPrediction(p, t, m), target, weights)[0],
        {"p": p, "t": t, "m": m},
        {"p": dp, "t": dt, "m": dm},
    )


def _case_head_logits(rng: np.random.Generator) -> float:
    num_classes, num_rois = 3, 3
    cls = rng.normal(size=(num_rois, num_classes))
    box = rng.normal(size=(num_rois, 4 * num_classes))
    mask = rng.normal(size=(3, 4, 4))
    targets = []
    for r, u in enumerate([1, 2, 0]):
        v = box[r].reshape(-1, 4)[u] - _away_from(rng.uniform(-2.5, 2.5, size=4), 1.0)
        s = LabelMask(rng.integers(0, 3, size=(4, 4))) if r == 0 else None
        targets.append(DetectionTarget(u=u, v=BoxOffset.from_array(v), s=s))
    result = head_loss_from_logits(cls, box, [mask, None, None], targets)
    return _compare(
        lambda cls, box, mask: head_loss_from_logits(cls, box, [mask, None, None], targets).total,
        {"cls": cls, "box": box, "mask": mask},
        {"cls": result.dcls, "box": result.dbox, "mask": result.dmask[0]},
    )


def _case_rpn_logits(rng: np.random.Generator) -> float:
    num_anchors = 12
    labels = rng.choice([POSITIVE, NEGATIVE, IGNORE], size=num_anchors)
    labels[0] = POSITIVE
    logits = rng.normal(size=(num_anchors, 2))
    deltas = rng.normal(size=(num_anchors, 4))
    offsets = np.where(
        (labels == POSITIVE)[:, None], deltas - _away_from(rng.uniform(-2.5, 2.5, size=(num_anchors, 4)), 1.0), 0.0
    )
    targets = RpnTargets(labels=labels, offsets=offsets)
    _, _, dlogits, ddeltas = rpn_loss_from_logits(logits, deltas, targets)
    return _compare(
        lambda logits, deltas: rpn_loss_from_logits(logits, deltas, targets)[0],
        {"logits": logits, "deltas": deltas},
        {"logits": dlogits, "deltas": ddeltas},
    )


CASES: Dict[str, Callable[[np.random.Generator], float]] = {
    "conv": _case_conv,
    "deconv": _case_deconv,
    "relu": _case_relu,
    "maxpool": _case_maxpool,
    "fc": _case_fc,
    "softmax": _case_softmax,
    "roi_align": _case_roi_align,
    "classification_loss": _case_classification_loss,
    "box_regression_loss": _case_box_regression_loss,
    "affordance_loss": _case_affordance_loss,
    "multi_task_loss": _case_multi_task_loss,
    "head_logits": _case_head_logits,
    "rpn_logits": _case_rpn_logits,
}


def resolve_ops(op: str) -> List[str]:
    if op == "all":
        return list(CASES)
    if op not in CASES:
        raise UsageError(f"unknown op {op!r}; choose all or one of {', '.join(CASES)}")
    return [op]


def check_op(op: str, seed: int = 0, num_seeds: int = DEFAULT_SEEDS, tolerance: float = TOLERANCE) -> CheckResult:
    """Worst relative error of one op over num_seeds generators seeded (seed, i)."""
    case = CASES[op]
    worst = max(case(np.random.default_rng([seed, i])) for i in range(num_seeds))
    return CheckResult(op, worst, num_seeds, tolerance)


def run_gradcheck(
    ops: Optional[Sequence[str]] = None, seed: int = 0, num_seeds: int = DEFAULT_SEEDS
) -> List[CheckResult]:
    return [check_op(op, seed, num_seeds) for op in (ops or list(CASES))]
