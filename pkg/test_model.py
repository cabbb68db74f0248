import numpy as np
import pytest

from conftest import tiny_model_values
from src.boxes import Box, iou
from src.config import ModelConfig, SceneSpec
from src.data import render_scene
from src.data_loader import TrainingExample, load_dataset
from src.errors import NonFiniteError, ShapeError
from src.layers import RoI
from src.maskops import projected_size
from src.model import (
    AffordanceDetector,
    Detection,
    apply_score_gate,
    decode_class_detections,
    example_order,
    fit,
)


def tiny(**overrides) -> ModelConfig:
    return ModelConfig.model_validate(tiny_model_values(**overrides))


@pytest.fixture
def examples(tiny_dataset):
    return load_dataset(tiny_dataset, 2, 4)


def test_default_mask_head_chain():
    config = ModelConfig()
    assert config.mask_sizes() == [7, 30, 122, 244]
    assert config.mask_label == "mask244"


def test_single_stage_mask_head_is_14(tiny_config):
    assert tiny_config.mask_sizes() == [7, 14]


def test_forward_output_shapes(tiny_config, examples):
    detector = AffordanceDetector(tiny_config, seed=0)
    out = detector.forward(examples[0].image)
    assert 0 < len(out.rois) <= tiny_config.infer.k_infer
    pred = out.predictions[0]
    assert pred.p.shape == (3,)
    assert pred.t.shape == (3, 4)
    assert pred.m.shape == (5, 14, 14)
    np.testing.assert_allclose(pred.m.sum(axis=0), 1.0, rtol=1e-5)


def test_forward_is_deterministic(tiny_config, examples):
    a = AffordanceDetector(tiny_config, seed=3).forward(examples[0].image, mode="train")
    b = AffordanceDetector(tiny_config, seed=3).forward(examples[0].image, mode="train")
    assert np.array_equal(a.proposals, b.proposals)
    for pa, pb in zip(a.predictions, b.predictions):
        assert np.array_equal(pa.p, pb.p)
        assert np.array_equal(pa.m, pb.m)


def test_backbone_downsamples_by_feature_stride(tiny_config):
    detector = AffordanceDetector(tiny_config, seed=0)
    features, _ = detector._backbone(detector._prepare(np.zeros((64, 48, 3), dtype=np.uint8)))
    stride = tiny_config.feature_stride
    assert features.shape[2:] == (64 // stride, 48 // stride)


def test_forward_rejects_tiny_image(tiny_config):
    with pytest.raises(ShapeError):
        AffordanceDetector(tiny_config).forward(np.zeros((3, 3, 3), dtype=np.uint8))


def test_forward_rejects_bad_mode(tiny_config, examples):
    with pytest.raises(ValueError):
        AffordanceDetector(tiny_config).forward(examples[0].image, mode="eval")


def test_parameters_are_float32(tiny_config):
    detector = AffordanceDetector(tiny_config, seed=1)
    assert all(p.dtype == np.float32 for p in detector.params.values())
    assert "mask.stage1.deconv.weight" in detector.params


def test_mismatched_params_rejected(tiny_config):
    params = AffordanceDetector(tiny_config).params
    params.pop("head.cls.bias")
    with pytest.raises(ShapeError):
        AffordanceDetector(tiny_config, params=params)


def test_train_step_reports_and_advances(tiny_config, examples):
    detector = AffordanceDetector(tiny_config, seed=0)
    report = detector.train_step(examples[0])
    assert detector.iteration == 1
    assert report.iteration == 0
    assert np.isfinite(report.total)
    assert report.total == pytest.approx(report.cls + report.loc + report.aff + report.rpn)
    assert report.num_positive_rois >= 1
    assert set(report.as_row()) == {"iter", "total", "cls", "loc", "aff", "rpn", "lr"}


def test_zero_lr_leaves_parameters(examples):
    detector = AffordanceDetector(tiny(train={"iterations": 2, "lr": 0.0}), seed=0)
    before = {k: v.copy() for k, v in detector.params.items()}
    detector.train_step(examples[0])
    for name, value in detector.params.items():
        assert np.array_equal(value, before[name]), name


def test_training_trajectory_is_reproducible(tiny_config, examples):
    def run():
        detector = AffordanceDetector(tiny_config, seed=11)
        return [detector.train_step(examples[1]).total for _ in range(2)]

    assert run() == run()


def test_non_finite_loss_names_term(tiny_config, examples):
    detector = AffordanceDetector(tiny_config, seed=0)
    detector.params["rpn.cls.bias"][:] = np.nan
    with pytest.raises(NonFiniteError, match="rpn"):
        detector.train_step(examples[0])
    assert detector.iteration == 0


def test_lr_schedule():
    train = tiny(train={"iterations": 8, "lr": 0.001}).train
    assert train.lr_at(0) == 0.001
    assert train.lr_at(5) == 0.001
    assert train.lr_at(6) == pytest.approx(0.0001)
    explicit = tiny(train={"iterations": 8, "lr": 0.001, "lr_decay_at": 2}).train
    assert explicit.lr_at(2) == pytest.approx(0.0001)


def test_example_order_visits_each_example_per_epoch():
    for epoch in range(3):
        seen = sorted(example_order(5, epoch * 5 + i, seed=2) for i in range(5))
        assert seen == [0, 1, 2, 3, 4]


def test_fit_stops_at_target(tiny_config, examples):
    detector = AffordanceDetector(tiny_config, seed=0)
    steps = []
    reports = fit(detector, examples, on_step=steps.append)
    assert len(reports) == tiny_config.train.iterations == detector.iteration
    assert steps == reports
    assert fit(detector, examples) == []
    with pytest.raises(ValueError):
        fit(detector, [])


def detection(score, x=0.0):
    return Detection(Box(x, 0, x + 10, 10), 1, score)


def test_score_gate_fallback_keeps_best():
    kept = apply_score_gate([detection(0.5), detection(0.8, 20), detection(0.3, 40)], 0.9)
    assert [d.score for d in kept] == [0.8]


def test_score_gate_filters():
    kept = apply_score_gate([detection(0.95), detection(0.92, 20), detection(0.3, 40)], 0.9)
    assert [d.score for d in kept] == [0.95, 0.92]
    assert apply_score_gate([], 0.9) == []


def test_decode_detections_per_class_nms():
    rois = [RoI(Box(0, 0, 10, 10)), RoI(Box(1, 0, 11, 10)), RoI(Box(0, 0, 10, 10))]
    probs = np.array([[0.1, 0.8, 0.1], [0.1, 0.7, 0.2], [0.1, 0.2, 0.7]])
    detections = decode_class_detections(rois, probs, np.zeros((3, 12)), (32, 32), nms_iou=0.3)
    assert [(d.label, d.score) for d in detections] == [(1, 0.8), (2, 0.7)]
    assert detections[0].box == Box(0, 0, 10, 10)


def test_infer_returns_merged_mask(tiny_config, examples):
    detector = AffordanceDetector(tiny_config, seed=0)
    result = detector.infer(examples[0].image)
    assert result.merged.labels.shape == examples[0].image.shape[:2]
    assert len(result.detections) >= 1
    for det in result.detections:
        assert det.mask.labels.shape == projected_size(det.box)


@pytest.mark.slow
def test_overfits_one_image():
    scene = render_scene(SceneSpec(image_size=(96, 96), objects_per_scene=(1, 1), seed=5), 0)
    example = TrainingExample(
        image_id="overfit",
        image=scene.image,
        gt_boxes=[o.box for o in scene.objects],
        gt_classes=[o.class_id for o in scene.objects],
        gt_masks=[o.mask for o in scene.objects],
    )
    config = ModelConfig.model_validate(
        {
            "mask_preset": "56",
            "head": {"k_train": 300, "batch_size": 32},
            "infer": {"k_infer": 100},
            "train": {"iterations": 500, "lr": 0.01},
        }
    )
    detector = AffordanceDetector(config, seed=0)
    reports = fit(detector, [example])
    assert reports[-1].total < 0.05

    result = detector.infer(example.image)
    for gt in example.gt_boxes:
        assert max(iou(gt, d.box) for d in result.detections) >= 0.9
    gt_merged = example.merged_mask().labels
    inside = np.zeros_like(gt_merged, dtype=bool)
    for gt in example.gt_boxes:
        inside[int(gt.y1):int(np.ceil(gt.y2)), int(gt.x1):int(np.ceil(gt.x2))] = True
    assert (result.merged.labels[inside] == gt_merged[inside]).mean() >= 0.95
