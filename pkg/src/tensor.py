"""
Minimal dense tensor plus the finite-difference gradient check and the SGD
update used throughout the library.

Tensors are row-major numpy arrays; rank-4 tensors are laid out
(batch, channel, height, width).
"""

from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np

from src.errors import NonFiniteError, ShapeError


@dataclass
class Tensor:
    """
    Dense real array with an optional gradient buffer of the same shape.

    Args:
        data: Values (float64 in tests, float32 allowed for training)
        grad: Optional gradient buffer, same shape as data
    """

    data: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        if self.grad is not None:
            self.grad = np.ascontiguousarray(self.grad, dtype=self.data.dtype)
            if self.grad.shape != self.data.shape:
                raise ShapeError(
                    f"grad shape {self.grad.shape} does not match data shape {self.data.shape}"
                )

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)


ArrayLike = Union[Tensor, np.ndarray]


def _as_array(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], x: ArrayLike, epsilon: float = 1e-6
) -> Tensor:
    """
    Central-difference gradient of a scalar function.

    g[i] = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)

    Args:
        f: Scalar-valued function; it receives a float64 array shaped like x
        x: Point of evaluation (not modified)
        epsilon: Perturbation size, must be positive

    Returns:
        Tensor holding the numeric gradient

    Raises:
        NonFiniteError: If f is not finite at a perturbed point
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")

    point = np.array(_as_array(x), dtype=np.float64, copy=True)
    flat = point.reshape(-1)
    grad = np.zeros_like(flat)

    for i in range(flat.size):
        original = flat[i]

        flat[i] = original + epsilon
        f_plus = float(f(point))
        flat[i] = original - epsilon
        f_minus = float(f(point))
        flat[i] = original

        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            index = tuple(int(k) for k in np.unravel_index(i, point.shape))
            raise NonFiniteError(f"non-finite function value when perturbing index {index}")
        grad[i] = (f_plus - f_minus) / (2.0 * epsilon)

    return Tensor(grad.reshape(point.shape))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"shape mismatch {analytic.shape} vs {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def sgd_momentum_step(
    param: ArrayLike,
    grad: ArrayLike,
    velocity: ArrayLike,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0005,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    One classical-momentum SGD update with weight decay folded into the
    gradient:

        v <- momentum * v - lr * (grad + weight_decay * param)
        param <- param + v

    Args:
        param: Current parameter values
        grad: Gradient of the loss w.r.t. param
        velocity: Momentum buffer
        lr: Learning rate (>= 0; zero leaves param unchanged)
        momentum: Momentum coefficient
        weight_decay: L2 coefficient

    Returns:
        (new_param, new_velocity) as fresh arrays
    """
    p = _as_array(param)
    g = _as_array(grad)
    v = _as_array(velocity)
    if not (p.shape == g.shape == v.shape):
        raise ShapeError(
            f"sgd step dims differ: param {p.shape}, grad {g.shape}, velocity {v.shape}"
        )
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")

    new_velocity = momentum * v - lr * (g + weight_decay * p)
    new_param = p + new_velocity
    return new_param.astype(p.dtype, copy=False), new_velocity.astype(p.dtype, copy=False)
