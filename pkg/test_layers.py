import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.boxes import Box
from src.errors import ShapeError
from src.layers import (
    DeconvSpec,
    RoI,
    conv2d,
    deconv2d,
    fully_connected,
    maxpool2d,
    maxpool2d_backward,
    relu,
    roi_align,
    softmax,
)


def naive_conv(x, w, b, stride, padding):
    n, c_in, h, width = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (width + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out))
    for b_i in range(n):
        for o in range(c_out):
            for i in range(h_out):
                for j in range(w_out):
                    total = b[o]
                    for c in range(c_in):
                        for di in range(k):
                            for dj in range(k):
                                total += w[o, c, di, dj] * xp[b_i, c, i * stride + di, j * stride + dj]
                    out[b_i, o, i, j] = total
    return out


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out, _ = conv2d(x, w, np.zeros(3))
    assert_allclose(out, x)


def test_conv_zero_weights_gives_bias(rng):
    x = rng.normal(size=(2, 2, 4, 4))
    out, _ = conv2d(x, np.zeros((3, 2, 3, 3)), np.array([1.0, -2.0, 0.5]), padding=1)
    assert out.shape == (2, 3, 4, 4)
    assert_allclose(out[:, 1], -2.0)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_nested_loops(rng, stride, padding):
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=2)
    out, _ = conv2d(x, w, b, stride, padding)
    assert_allclose(out, naive_conv(x, w, b, stride, padding), atol=1e-10)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


def test_conv_output_too_small():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))


@pytest.mark.parametrize(
    "size_in,stride,kernel,padding,size_out",
    [(7, 4, 8, 1, 30), (30, 4, 8, 1, 122), (122, 2, 4, 1, 244), (7, 2, 4, 1, 14), (7, 4, 6, 1, 28)],
)
def test_deconv_output_size(size_in, stride, kernel, padding, size_out):
    spec = DeconvSpec(kernel_size=kernel, stride=stride, padding=padding)
    assert spec.output_size(size_in) == size_out


def test_deconv_realizes_default_chain():
    x = np.ones((1, 1, 7, 7))
    for size in (30, 122, 244):
        spec = DeconvSpec(kernel_size=8 if size != 244 else 4, stride=4 if size != 244 else 2, padding=1)
        x, _ = deconv2d(x, spec, np.full((1, 1, spec.kernel_size, spec.kernel_size), 0.1), np.zeros(1))
        assert x.shape == (1, 1, size, size)


def test_deconv_non_positive_size():
    spec = DeconvSpec(kernel_size=1, stride=1, padding=2)
    with pytest.raises(ShapeError):
        deconv2d(np.zeros((1, 1, 2, 2)), spec, np.zeros((1, 1, 1, 1)), np.zeros(1))


@pytest.mark.parametrize("stride,kernel,padding,size", [(2, 3, 1, 7), (4, 8, 1, 30), (2, 4, 1, 14), (1, 3, 1, 5)])
def test_deconv_is_adjoint_of_conv(rng, stride, kernel, padding, size):
    c_in, c_out = 2, 3
    w = rng.normal(size=(c_out, c_in, kernel, kernel))
    x = rng.normal(size=(1, c_in, size, size))
    cx, _ = conv2d(x, w, np.zeros(c_out), stride, padding)
    y = rng.normal(size=cx.shape)
    spec = DeconvSpec(kernel_size=kernel, stride=stride, padding=padding, in_channels=c_out, out_channels=c_in)
    dy, _ = deconv2d(y, spec, w, np.zeros(c_in))
    assert dy.shape == x.shape
    assert np.sum(cx * y) == pytest.approx(np.sum(x * dy), abs=1e-8)


def test_relu_values():
    out, _ = relu(np.array([-1.0, 2.0, 0.0]))
    assert_allclose(out, [0.0, 2.0, 0.0])


def test_maxpool_routes_gradient_to_max():
    x = np.array([[[[1.0, 5.0], [3.0, 2.0]]]])
    out, cache = maxpool2d(x, 2)
    assert out.item() == 5.0
    dx = maxpool2d_backward(np.ones_like(out), cache)
    assert_allclose(dx, [[[[0.0, 1.0], [0.0, 0.0]]]])


def test_fully_connected_flattens(rng):
    x = rng.normal(size=(2, 3, 2))
    w = rng.normal(size=(6, 4))
    out, _ = fully_connected(x, w, np.ones(4))
    assert_allclose(out, x.reshape(2, 6) @ w + 1.0)
    with pytest.raises(ShapeError):
        fully_connected(rng.normal(size=(2, 5)), w, np.ones(4))


def test_softmax_uniform_and_closed_form():
    assert_allclose(softmax(np.zeros((1, 4))), np.full((1, 4), 0.25))
    assert_allclose(softmax(np.array([[0.0, np.log(3.0)]])), [[0.25, 0.75]])


def test_softmax_is_shift_invariant(rng):
    x = rng.normal(size=(3, 5))
    assert_allclose(softmax(x + 1000.0), softmax(x), atol=1e-12)


# ---------------------------------------------------------------------------
# RoIAlign
# ---------------------------------------------------------------------------

def bilinear_read(channel, y, x):
    """Textbook bilinear interpolation at continuous (y, x), pixel centres at i + 0.5."""
    h, w = channel.shape
    y = min(max(y - 0.5, 0.0), h - 1)
    x = min(max(x - 0.5, 0.0), w - 1)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    ly, lx = y - y0, x - x0
    return (
        (1 - ly) * (1 - lx) * channel[y0, x0]
        + (1 - ly) * lx * channel[y0, x1]
        + ly * (1 - lx) * channel[y1, x0]
        + ly * lx * channel[y1, x1]
    )


def brute_roi_align(fmap, box, output_size, scale):
    c = fmap.shape[0]
    out_h, out_w = output_size
    x1, y1, x2, y2 = (v * scale for v in (box.x1, box.y1, box.x2, box.y2))
    bin_h, bin_w = (y2 - y1) / out_h, (x2 - x1) / out_w
    out = np.zeros((c, out_h, out_w))
    for ch in range(c):
        for i in range(out_h):
            for j in range(out_w):
                samples = [
                    bilinear_read(fmap[ch], y1 + (i + fy) * bin_h, x1 + (j + fx) * bin_w)
                    for fy in (0.25, 0.75)
                    for fx in (0.25, 0.75)
                ]
                out[ch, i, j] = max(samples)
    return out


def test_roi_align_constant_map():
    fmap = np.full((1, 2, 6, 6), 3.5)
    out, _ = roi_align(fmap, RoI(Box(1.3, 0.2, 9.7, 5.1)), (7, 7), 0.5)
    assert out.shape == (2, 7, 7)
    assert_allclose(out, 3.5)


def test_roi_align_aligned_region_recovers_values(rng):
    base = rng.normal(size=(2, 4, 5))
    upsampled = base.repeat(2, axis=1).repeat(2, axis=2)[None]
    # base rows and cols 1..3; 2-pixel bins put every sample on a pixel centre
    out, _ = roi_align(upsampled, RoI(Box(2.0, 2.0, 8.0, 8.0)), (3, 3), 1.0)
    assert_allclose(out, base[:, 1:4, 1:4], atol=1e-12)


def test_roi_align_matches_brute_force_sampler(rng):
    for _ in range(1000):
        h, w = rng.integers(3, 9, size=2)
        fmap = rng.normal(size=(1, 2, h, w))
        scale = float(rng.choice([0.25, 0.5, 1.0]))
        x1 = rng.uniform(-2.0, w / scale)
        y1 = rng.uniform(-2.0, h / scale)
        box = Box(x1, y1, x1 + rng.uniform(0.5, w / scale), y1 + rng.uniform(0.5, h / scale))
        output_size = tuple(int(v) for v in rng.integers(1, 5, size=2))
        out, _ = roi_align(fmap, RoI(box), output_size, scale)
        assert_allclose(out, brute_roi_align(fmap[0], box, output_size, scale), atol=1e-6)


def test_roi_align_degenerate_roi():
    with pytest.raises(ShapeError):
        roi_align(np.zeros((1, 1, 4, 4)), RoI(Box(2.0, 2.0, 2.0, 5.0)), (2, 2), 1.0)


def test_roi_align_bad_batch_index():
    with pytest.raises(ShapeError):
        roi_align(np.zeros((1, 1, 4, 4)), RoI(Box(0.0, 0.0, 2.0, 2.0), batch_index=1))
