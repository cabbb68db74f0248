import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from src.boxes import (
    AnchorConfig,
    Box,
    BoxOffset,
    anchor_grid,
    clip_box,
    decode_offsets,
    encode_offsets,
    generate_anchors,
    iou,
    nms,
)
from src.errors import ShapeError

coords = st.floats(min_value=-100, max_value=100, allow_nan=False)
sizes = st.floats(min_value=0.5, max_value=80, allow_nan=False)


@st.composite
def boxes(draw):
    x1, y1 = draw(coords), draw(coords)
    return Box(x1, y1, x1 + draw(sizes), y1 + draw(sizes))


def test_iou_examples():
    a = Box(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Box(20, 20, 30, 30)) == 0.0
    assert iou(a, Box(5, 0, 15, 10)) == pytest.approx(1 / 3)


def test_iou_degenerate_is_zero():
    assert iou(Box(0, 0, 0, 0), Box(0, 0, 0, 0)) == 0.0


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    value = iou(a, b)
    assert value == pytest.approx(iou(b, a))
    assert 0.0 <= value <= 1.0


def test_encode_identity_and_hand_example():
    anchor = Box(5, 5, 15, 15)
    assert encode_offsets(anchor, anchor).as_array().tolist() == [0.0, 0.0, 0.0, 0.0]
    offset = encode_offsets(Box(5, 5, 25, 15), anchor)
    assert_allclose(offset.as_array(), [0.5, 0.0, math.log(2), 0.0], atol=1e-12)


@settings(max_examples=200)
@given(boxes(), boxes())
def test_decode_inverts_encode(box, anchor):
    decoded = decode_offsets(encode_offsets(box, anchor), anchor)
    assert_allclose(decoded.as_array(), box.as_array(), atol=1e-9)


def test_encode_rejects_empty_box():
    with pytest.raises(ShapeError):
        encode_offsets(Box(0, 0, 0, 5), Box(0, 0, 4, 4))


def test_decode_zero_offset_is_anchor():
    anchor = Box(1, 2, 9, 6)
    assert decode_offsets(BoxOffset(0, 0, 0, 0), anchor) == anchor


def test_fifteen_anchors_per_cell():
    anchors = generate_anchors(AnchorConfig(), 1, 1)
    assert len(anchors) == 15


def test_unit_ratio_anchor_is_centred_square():
    config = AnchorConfig(scales=[32.0], ratios=[1.0], stride=4.0)
    (anchor,) = generate_anchors(config, 1, 1)
    assert anchor.width == pytest.approx(32.0)
    assert anchor.height == pytest.approx(32.0)
    assert (anchor.x1 + anchor.x2) / 2 == pytest.approx(2.0)


def test_anchor_area_constant_across_ratios():
    config = AnchorConfig()
    grid = anchor_grid(config, 2, 3)
    assert grid.shape == (2 * 3 * 15, 4)
    areas = (grid[:15, 2] - grid[:15, 0]) * (grid[:15, 3] - grid[:15, 1])
    expected = np.repeat(np.square(config.scales), len(config.ratios))
    assert_allclose(areas, expected, rtol=1e-6)


def test_anchor_order_is_row_major():
    config = AnchorConfig(scales=[8.0], ratios=[1.0], stride=4.0)
    grid = anchor_grid(config, 2, 2)
    centres = (grid[:, :2] + grid[:, 2:]) / 2
    assert_allclose(centres, [[2, 2], [6, 2], [2, 6], [6, 6]])


def test_anchor_config_rejects_non_positive():
    with pytest.raises(ValueError):
        AnchorConfig(scales=[0.0])


def plain_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def reference_nms(boxes_list, scores, threshold):
    coords_list = [(b.x1, b.y1, b.x2, b.y2) for b in boxes_list]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    suppressed = set()
    keep = []
    for pos, i in enumerate(order):
        if i in suppressed:
            continue
        keep.append(i)
        for j in order[pos + 1:]:
            if j not in suppressed and plain_iou(coords_list[i], coords_list[j]) > threshold:
                suppressed.add(j)
    return keep


def test_nms_simple_cases():
    assert nms([Box(0, 0, 1, 1)], [0.3], 0.5) == [0]
    assert nms([], [], 0.5) == []
    same = [Box(0, 0, 10, 10), Box(0, 0, 10, 10)]
    assert nms(same, [0.8, 0.9], 0.5) == [1]


def test_nms_matches_reference(rng):
    for _ in range(100):
        xy = rng.uniform(0, 200, size=(500, 2))
        wh = rng.uniform(5, 60, size=(500, 2))
        boxes_list = [Box(x, y, x + w, y + h) for (x, y), (w, h) in zip(xy, wh)]
        scores = rng.uniform(size=500).tolist()
        threshold = float(rng.uniform(0.2, 0.8))
        assert nms(boxes_list, scores, threshold) == reference_nms(boxes_list, scores, threshold)


def test_nms_ties_prefer_lower_index():
    boxes_list = [Box(0, 0, 10, 10), Box(1, 0, 11, 10)]
    assert nms(boxes_list, [0.5, 0.5], 0.3) == [0]


def test_clip_box():
    assert clip_box(Box(1, 1, 5, 5), 10, 10) == Box(1, 1, 5, 5)
    assert clip_box(Box(-5, -5, 20, 20), 10, 10) == Box(0, 0, 10, 10)
    outside = clip_box(Box(20, 20, 30, 30), 10, 10)
    assert outside.area == 0.0
