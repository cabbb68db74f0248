"""
Forward and backward passes for every layer of the network.

Each forward returns (output, cache); the matching *_backward takes the
upstream gradient and that cache and returns gradients for the inputs and
parameters. All functions are pure: backward passes allocate fresh arrays
and never touch caller state.

Layouts:
    activations     (N, C, H, W)
    conv weights    (C_out, C_in, k, k)
    deconv weights  (C_in, C_out, S_f, S_f)
    fc weights      (D_in, D_out)
"""

from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.boxes import Box
from src.errors import ShapeError

Cache = Dict[str, Any]


class DeconvSpec(BaseModel):
    """Deconvolution geometry; output size S_o = s*(S_i - 1) + S_f - 2*d."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kernel_size: int = Field(ge=1, description="S_f")
    stride: int = Field(ge=1, description="s")
    padding: int = Field(ge=0, description="d")
    in_channels: int = Field(default=1, ge=1)
    out_channels: int = Field(default=1, ge=1)

    def output_size(self, input_size: int) -> int:
        """Spatial output size for an input of input_size; must be positive."""
        size = self.stride * (input_size - 1) + self.kernel_size - 2 * self.padding
        if input_size < 1 or size <= 0:
            raise ShapeError(
                f"deconvolution output size {size} is not positive for input {input_size}"
            )
        return size


@dataclass(frozen=True)
class RoI:
    """Region of interest in input-image pixels (not quantized)."""

    box: Box
    batch_index: int = 0


def _check_rank4(x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv2d(
    x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0
) -> Tuple[np.ndarray, Cache]:
    """
    Cross-correlation of x with weights, im2col style.

    Args:
        x: Input (N, C_in, H, W)
        weights: Filters (C_out, C_in, k, k)
        bias: (C_out,)
        stride: Step between windows
        padding: Zero padding on every side

    Returns:
        (output (N, C_out, H_out, W_out), cache)
    """
    _check_rank4(x, "conv2d input")
    n, c_in, h, w = x.shape
    c_out, w_c_in, kh, kw = weights.shape
    if w_c_in != c_in:
        raise ShapeError(f"conv2d expects {w_c_in} input channels, got {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")

    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"conv2d output size {h_out}x{w_out} is not positive")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c_in, kh, kw, h_out, w_out), dtype=np.result_type(x, weights))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
    cols = cols.reshape(n, c_in * kh * kw, h_out * w_out)

    out = weights.reshape(c_out, -1) @ cols + bias[None, :, None]
    cache = {
        "cols": cols,
        "weights": weights,
        "x_shape": x.shape,
        "stride": stride,
        "padding": padding,
        "out_hw": (h_out, w_out),
    }
    return out.reshape(n, c_out, h_out, w_out), cache


def conv2d_backward(dout: np.ndarray, cache: Cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dweights, dbias)."""
    weights = cache["weights"]
    cols = cache["cols"]
    n, c_in, h, w = cache["x_shape"]
    stride, padding = cache["stride"], cache["padding"]
    h_out, w_out = cache["out_hw"]
    c_out, _, kh, kw = weights.shape

    dout_flat = dout.reshape(n, c_out, h_out * w_out)
    dbias = dout_flat.sum(axis=(0, 2))
    dweights = np.einsum("nop,nkp->ok", dout_flat, cols).reshape(weights.shape)

    dcols = (weights.reshape(c_out, -1).T @ dout_flat).reshape(n, c_in, kh, kw, h_out, w_out)
    dxp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += dcols[:, :, i, j]
    dx = dxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(dx), dweights, dbias


# ---------------------------------------------------------------------------
# Deconvolution (transposed convolution)
# ---------------------------------------------------------------------------

def deconv2d(
    x: np.ndarray, spec: DeconvSpec, weights: np.ndarray, bias: np.ndarray
) -> Tuple[np.ndarray, Cache]:
    """
    Transposed convolution: the adjoint of conv2d's input gradient with the
    same weight array, plus bias.

    Args:
        x: Input (N, C_in, S_i, S_i') with C_in == spec.in_channels
        spec: Kernel size, stride and padding
        weights: (C_in, C_out, S_f, S_f)
        bias: (C_out,)

    Returns:
        (output (N, C_out, S_o, S_o'), cache), sizes per spec.output_size
    """
    _check_rank4(x, "deconv2d input")
    n, c_in, h, w = x.shape
    k, s, d = spec.kernel_size, spec.stride, spec.padding
    expected = (spec.in_channels, spec.out_channels, k, k)
    if weights.shape != expected:
        raise ShapeError(f"deconv2d weights must have shape {expected}, got {weights.shape}")
    if c_in != spec.in_channels:
        raise ShapeError(f"deconv2d expects {spec.in_channels} input channels, got {c_in}")
    c_out = spec.out_channels
    if bias.shape != (c_out,):
        raise ShapeError(f"deconv2d bias must have shape ({c_out},), got {bias.shape}")

    h_out, w_out = spec.output_size(h), spec.output_size(w)
    full_h, full_w = s * (h - 1) + k, s * (w - 1) + k

    cols = weights.reshape(c_in, c_out * k * k).T @ x.reshape(n, c_in, h * w)
    cols = cols.reshape(n, c_out, k, k, h, w)
    full = np.zeros((n, c_out, full_h, full_w), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, i:i + s * (h - 1) + 1:s, j:j + s * (w - 1) + 1:s] += cols[:, :, i, j]

    out = full[:, :, d:d + h_out, d:d + w_out] + bias[None, :, None, None]
    cache = {"x": x, "weights": weights, "spec": spec}
    return np.ascontiguousarray(out), cache


def deconv2d_backward(dout: np.ndarray, cache: Cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dweights, dbias)."""
    x, weights, spec = cache["x"], cache["weights"], cache["spec"]
    n, c_in, h, w = x.shape
    k, s, d = spec.kernel_size, spec.stride, spec.padding
    c_out = spec.out_channels
    full_h, full_w = s * (h - 1) + k, s * (w - 1) + k

    dfull = np.zeros((n, c_out, full_h, full_w), dtype=dout.dtype)
    dfull[:, :, d:d + dout.shape[2], d:d + dout.shape[3]] = dout

    dcols = np.empty((n, c_out, k, k, h, w), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dcols[:, :, i, j] = dfull[:, :, i:i + s * (h - 1) + 1:s, j:j + s * (w - 1) + 1:s]
    dcols = dcols.reshape(n, c_out * k * k, h * w)

    x_flat = x.reshape(n, c_in, h * w)
    dweights = np.einsum("nch,nkh->ck", x_flat, dcols).reshape(weights.shape)
    dx = (weights.reshape(c_in, -1) @ dcols).reshape(x.shape)
    dbias = dout.sum(axis=(0, 2, 3))
    return dx, dweights, dbias


# ---------------------------------------------------------------------------
# Elementwise, pooling, dense, softmax
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> Tuple[np.ndarray, Cache]:
    mask = x > 0
    return np.where(mask, x, 0.0).astype(x.dtype, copy=False), {"mask": mask}


def relu_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
    return np.where(cache["mask"], dout, 0.0).astype(dout.dtype, copy=False)


def maxpool2d(x: np.ndarray, size: int = 2, stride: int = None) -> Tuple[np.ndarray, Cache]:
    """Max over size x size windows; stores the argmax of each window."""
    _check_rank4(x, "maxpool2d input")
    stride = stride or size
    n, c, h, w = x.shape
    h_out = (h - size) // stride + 1
    w_out = (w - size) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"maxpool2d window {size} does not fit input {h}x{w}")

    windows = np.empty((n, c, size * size, h_out, w_out), dtype=x.dtype)
    for i in range(size):
        for j in range(size):
            windows[:, :, i * size + j] = x[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
    argmax = windows.argmax(axis=2)
    out = np.take_along_axis(windows, argmax[:, :, None], axis=2)[:, :, 0]
    cache = {"argmax": argmax, "x_shape": x.shape, "size": size, "stride": stride}
    return out, cache


def maxpool2d_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
    argmax, size, stride = cache["argmax"], cache["size"], cache["stride"]
    n, c, h_out, w_out = dout.shape
    dx = np.zeros(cache["x_shape"], dtype=dout.dtype)
    for i in range(size):
        for j in range(size):
            routed = np.where(argmax == i * size + j, dout, 0.0)
            dx[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += routed
    return dx


def fully_connected(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, Cache]:
    """Affine map x @ W + b; x of shape (N, D_in) (higher ranks are flattened)."""
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"fully_connected expects {weights.shape[0]} input features, got {x2.shape[1]}"
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"fully_connected bias must have shape ({weights.shape[1]},)")
    return x2 @ weights + bias, {"x": x2, "x_shape": x.shape, "weights": weights}


def fully_connected_backward(dout: np.ndarray, cache: Cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x2, weights = cache["x"], cache["weights"]
    dx = (dout @ weights.T).reshape(cache["x_shape"])
    return dx, x2.T @ dout, dout.sum(axis=0)


def softmax(x: np.ndarray, axis: int = 1) -> np.ndarray:
    """Numerically stable softmax along the class axis."""
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dout: np.ndarray, probs: np.ndarray, axis: int = 1) -> np.ndarray:
    """Gradient w.r.t. the logits given the gradient w.r.t. the probabilities."""
    return probs * (dout - (dout * probs).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# RoIAlign
# ---------------------------------------------------------------------------

def _bilinear_taps(coords: np.ndarray, size: int):
    """Clamped integer neighbours and weights for continuous coordinates."""
    # pixel i is centred at continuous coordinate i + 0.5
    pos = np.clip(coords - 0.5, 0.0, size - 1)
    low = np.floor(pos).astype(np.int64)
    high = np.minimum(low + 1, size - 1)
    frac = pos - low
    return low, high, frac


def roi_align(
    feature_map: np.ndarray,
    roi: RoI,
    output_size: Tuple[int, int] = (7, 7),
    spatial_scale: float = 1.0,
) -> Tuple[np.ndarray, Cache]:
    """
    Pool the features under an RoI into a fixed (H_o, W_o) grid.

    The RoI is mapped to feature coordinates without rounding and split into
    H_o x W_o bins. Each bin is sampled at the 2 x 2 grid of its
    quarter-points by bilinear interpolation (reads clamp to the border);
    the bin value is the max of its 4 samples.

    Args:
        feature_map: (N, C, H, W)
        roi: Box in image pixels and batch index
        output_size: (H_o, W_o)
        spatial_scale: feature size / image size

    Returns:
        ((C, H_o, W_o) features, cache)
    """
    _check_rank4(feature_map, "roi_align feature map")
    n, c, h, w = feature_map.shape
    if not 0 <= roi.batch_index < n:
        raise ShapeError(f"RoI batch index {roi.batch_index} outside batch of {n}")
    out_h, out_w = output_size
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"roi_align output size must be positive, got {output_size}")

    x1, y1 = roi.box.x1 * spatial_scale, roi.box.y1 * spatial_scale
    x2, y2 = roi.box.x2 * spatial_scale, roi.box.y2 * spatial_scale
    if not (x2 - x1 > 0 and y2 - y1 > 0):
        raise ShapeError(f"degenerate RoI {roi.box} at spatial scale {spatial_scale}")

    bin_h = (y2 - y1) / out_h
    bin_w = (x2 - x1) / out_w
    quarter = np.array([0.25, 0.75])
    ys = y1 + (np.arange(out_h)[:, None] + quarter[None, :]) * bin_h   # (H_o, 2)
    xs = x1 + (np.arange(out_w)[:, None] + quarter[None, :]) * bin_w   # (W_o, 2)

    fmap = feature_map[roi.batch_index]
    samples = np.empty((4, c, out_h, out_w), dtype=feature_map.dtype)
    taps = []
    for iy in range(2):
        y_lo, y_hi, ly = _bilinear_taps(ys[:, iy], h)
        for ix in range(2):
            x_lo, x_hi, lx = _bilinear_taps(xs[:, ix], w)
            w00 = (1 - ly)[:, None] * (1 - lx)[None, :]
            w01 = (1 - ly)[:, None] * lx[None, :]
            w10 = ly[:, None] * (1 - lx)[None, :]
            w11 = ly[:, None] * lx[None, :]
            corners = (
                (y_lo, x_lo, w00),
                (y_lo, x_hi, w01),
                (y_hi, x_lo, w10),
                (y_hi, x_hi, w11),
            )
            value = np.zeros((c, out_h, out_w), dtype=feature_map.dtype)
            for yy, xx, weight in corners:
                value += weight[None] * fmap[:, yy[:, None], xx[None, :]]
            samples[iy * 2 + ix] = value
            taps.append(corners)

    argmax = samples.argmax(axis=0)
    out = np.take_along_axis(samples, argmax[None], axis=0)[0]
    cache = {
        "argmax": argmax,
        "taps": taps,
        "feature_shape": feature_map.shape,
        "batch_index": roi.batch_index,
    }
    return out, cache


def roi_align_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
    """Scatter (C, H_o, W_o) gradients through the argmax sample's bilinear weights."""
    n, c, h, w = cache["feature_shape"]
    argmax = cache["argmax"]
    dfeature = np.zeros((n, c, h, w), dtype=dout.dtype)
    flat = dfeature[cache["batch_index"]].reshape(c, h * w)

    for k, corners in enumerate(cache["taps"]):
        routed = np.where(argmax == k, dout, 0.0)
        for yy, xx, weight in corners:
            index = (yy[:, None] * w + xx[None, :]).ravel()
            contribution = (weight[None] * routed).reshape(c, -1)
            np.add.at(flat.T, index, contribution.T)
    return dfeature
