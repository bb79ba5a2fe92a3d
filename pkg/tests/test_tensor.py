import numpy as np
import pytest

from eamnet import DimensionError, GradTape, Tensor, UsageError, backward
from eamnet.tensor import relu


def test_data_is_copied_and_read_only():
    src = np.arange(4.0)
    t = Tensor(src)
    src[0] = 99
    assert t.data[0] == 0
    with pytest.raises(ValueError):
        t.data[0] = 1.0


def test_rank_limit():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_empty_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


def test_item_requires_scalar():
    assert Tensor(3.0).item() == 3.0
    with pytest.raises(DimensionError):
        Tensor([1.0, 2.0]).item()


def test_arithmetic_gradients():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = Tensor([10.0, 20.0], requires_grad=True)
    with GradTape() as tape:
        loss = ((a * b) - a + 2.0).sum()
    backward(loss, tape)
    np.testing.assert_array_equal(a.grad, [[9.0, 19.0], [9.0, 19.0]])
    np.testing.assert_array_equal(b.grad, [4.0, 6.0])


def test_mean_reshape_relu():
    x = Tensor([[-1.0, 2.0, 3.0, -4.0]], requires_grad=True)
    with GradTape() as tape:
        loss = relu(x.reshape(2, 2)).mean()
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [[0.0, 0.25, 0.25, 0.0]])


def test_reused_tensor_accumulates():
    x = Tensor(3.0, requires_grad=True)
    with GradTape() as tape:
        loss = x * x + x
    backward(loss, tape)
    assert x.grad == 7.0


def test_method_backward_uses_recording_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape():
        loss = (x * x).sum()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_untaped_loss_is_usage_error():
    x = Tensor([1.0], requires_grad=True)
    loss = (x * 2.0).sum()
    with pytest.raises(UsageError):
        backward(loss, GradTape())
    with pytest.raises(UsageError):
        backward(loss, None)


def test_non_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = x * 2.0
    with pytest.raises(DimensionError):
        backward(y, tape)


def test_no_recording_without_requires_grad():
    with GradTape() as tape:
        Tensor([1.0]) * 2.0
    assert len(tape) == 0


def test_second_backward_does_not_accumulate():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        loss = (x * 3.0).sum()
    backward(loss, tape)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_unreached_input_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([5.0, 6.0], requires_grad=True)
    with GradTape() as tape:
        loss = (x * 2.0).sum()
        unused = y * 2.0  # noqa: F841
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_nested_tapes_record_innermost():
    x = Tensor([1.0], requires_grad=True)
    with GradTape() as outer:
        with GradTape() as inner:
            y = x * 2.0
    assert len(inner) == 1 and len(outer) == 0
    assert y._tape is inner


def test_broadcast_gradient_shape():
    x = Tensor(np.ones((2, 3, 4, 5)), requires_grad=True)
    b = Tensor(np.ones((1, 3, 1, 1)), requires_grad=True)
    with GradTape() as tape:
        loss = (x + b).sum()
    backward(loss, tape)
    assert b.grad.shape == (1, 3, 1, 1)
    np.testing.assert_array_equal(b.grad.ravel(), [40.0, 40.0, 40.0])


def test_clear_frees_graph_without_cycle_collection():
    import gc
    import weakref

    gc.disable()
    try:
        x = Tensor(np.ones(4), requires_grad=True)
        with GradTape() as tape:
            y = (x * 3.0).sum()
        backward(y, tape)
        ref = weakref.ref(y)
        tape.clear()
        del y, tape
        assert ref() is None
    finally:
        gc.enable()
