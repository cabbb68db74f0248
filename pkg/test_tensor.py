import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.errors import NonFiniteError, ShapeError
from src.tensor import Tensor, finite_diff_gradient, relative_error, sgd_momentum_step


def test_tensor_rejects_mismatched_grad():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3)), grad=np.zeros(6))


def test_tensor_promotes_integer_data():
    t = Tensor(np.arange(4).reshape(2, 2))
    assert t.data.dtype == np.float64
    assert t.dims == (2, 2)
    assert t.size == 4


def test_finite_diff_square():
    grad = finite_diff_gradient(lambda x: float(np.sum(x ** 2)), Tensor(np.array([1.0, 2.0])), 1e-6)
    assert_allclose(grad.data, [2.0, 4.0], atol=1e-6)


def test_finite_diff_linear_and_constant(rng):
    x = rng.normal(size=(3, 4))
    assert_allclose(finite_diff_gradient(lambda v: float(np.sum(v)), x).data, np.ones((3, 4)), atol=1e-8)
    assert_allclose(finite_diff_gradient(lambda v: 5.0, x).data, np.zeros((3, 4)))


def test_finite_diff_does_not_modify_input(rng):
    x = rng.normal(size=5)
    before = x.copy()
    finite_diff_gradient(lambda v: float(np.sum(np.sin(v))), x)
    assert np.array_equal(x, before)


def test_finite_diff_non_finite_names_index():
    def f(v):
        return float("inf") if v[1] > 2.0 else float(np.sum(v))

    with pytest.raises(NonFiniteError, match=r"\(1,\)"):
        finite_diff_gradient(f, np.array([0.0, 2.0]), epsilon=1e-3)


def test_finite_diff_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda v: 0.0, np.zeros(2), epsilon=0.0)


def test_relative_error_uses_floor():
    assert relative_error(np.array([0.0]), np.array([1e-6])) == pytest.approx(1e-4)
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


def test_sgd_zero_update():
    param = np.array([1.0, -2.0])
    new_param, new_v = sgd_momentum_step(param, np.zeros(2), np.zeros(2), lr=0.1, weight_decay=0.0)
    assert np.array_equal(new_param, param)
    assert np.array_equal(new_v, np.zeros(2))


def test_sgd_one_step_by_hand():
    new_param, new_v = sgd_momentum_step(
        np.array([1.0]), np.array([1.0]), np.array([0.0]), lr=0.1, momentum=0.9, weight_decay=0.0
    )
    assert_allclose(new_param, [0.9])
    assert_allclose(new_v, [-0.1])


def test_sgd_momentum_and_decay():
    new_param, new_v = sgd_momentum_step(
        np.array([2.0]), np.array([0.5]), np.array([0.2]), lr=0.01, momentum=0.9, weight_decay=0.1
    )
    expected_v = 0.9 * 0.2 - 0.01 * (0.5 + 0.1 * 2.0)
    assert_allclose(new_v, [expected_v])
    assert_allclose(new_param, [2.0 + expected_v])


def test_sgd_keeps_param_dtype():
    param = np.ones(3, dtype=np.float32)
    new_param, new_v = sgd_momentum_step(param, np.ones(3, dtype=np.float32), np.zeros(3, dtype=np.float32), lr=0.1)
    assert new_param.dtype == np.float32
    assert new_v.dtype == np.float32


def test_sgd_dimension_mismatch():
    with pytest.raises(ShapeError):
        sgd_momentum_step(np.zeros(2), np.zeros(3), np.zeros(2), lr=0.1)
