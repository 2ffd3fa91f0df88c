import numpy as np
import pytest

import tensor_core as tc
from exceptions import GlidError, ShapeError
from tensor_core import OPS, Tensor


def test_default_precision_is_float32_and_switchable():
    assert Tensor([1.0, 2.0]).data.dtype == np.float32
    with tc.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
        assert (Tensor([1.0]) * 2.0).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_add_mul_gradients_with_broadcasting():
    with tc.precision(np.float64):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        b = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        ((a * b) + b).sum().backward()
    np.testing.assert_allclose(a.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0) + 2.0)


def test_matmul_gradient():
    with tc.precision(np.float64):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        (a @ b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)))


def test_shared_subexpression_accumulates_once_per_use():
    with tc.precision(np.float64):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        (y + y).sum().backward()
    assert x.grad[0] == pytest.approx(12.0)


def test_leaf_grads_accumulate_until_zeroed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_take_scatters_repeated_indices():
    with tc.precision(np.float64):
        a = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
        tc.take(a, [0, 2, 0], axis=0).sum().backward()
    np.testing.assert_allclose(a.grad[:, 0], [2.0, 0.0, 1.0, 0.0])


def test_take_rejects_out_of_range_index():
    with pytest.raises(ShapeError, match='take'):
        tc.take(Tensor(np.zeros((3, 2))), [3])


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with tc.no_grad():
        y = x * 2.0
    assert y.node is None
    assert not y.requires_grad
    assert tc.grad_enabled()


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError, match='backward'):
        (x * 2.0).backward()


def test_backward_without_tracked_inputs_is_an_error():
    with pytest.raises(GlidError):
        Tensor([1.0]).sum().backward()


def test_matmul_shape_mismatch_names_op():
    with pytest.raises(ShapeError) as info:
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
    assert info.value.op == 'matmul'


def test_softmax_rows_sum_to_one():
    out = tc.softmax(Tensor(np.random.default_rng(1).standard_normal((5, 7))), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


def test_patchify_is_row_major_over_tokens():
    image = np.arange(4 * 4 * 3, dtype=np.float64).reshape(4, 4, 3)
    tokens = tc.patchify(Tensor(image), 2).data
    assert tokens.shape == (4, 12)
    np.testing.assert_allclose(tokens[1], image[0:2, 2:4].reshape(-1))


def test_mse_and_cross_entropy_values():
    with tc.precision(np.float64):
        assert tc.mse_loss(Tensor([1.0, 3.0]), np.array([0.0, 0.0])).item() == pytest.approx(5.0)
        loss = tc.cross_entropy(Tensor(np.zeros((2, 4))), [1, 3]).item()
    assert loss == pytest.approx(np.log(4.0))


def test_every_primitive_is_registered():
    for name in ('add', 'matmul', 'softmax', 'layernorm', 'take', 'patchify', 'bce_with_logits', 'avgpool2x'):
        assert name in OPS
