import numpy as np
import pytest

from vcead import Adam, ShapeError, Tensor, backward, forward_op, no_grad
from vcead import ops
from vcead.optim import MissingGradientError
from vcead.tensor import active_graph, concat, narrow

from _gradcheck import OP_CASES, check_op_gradients


def test_relu_values():
    out = forward_op("relu", Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_depthwise_same_padding_shape():
    x = Tensor(np.zeros((1, 3, 5, 5)))
    w = Tensor(np.zeros((3, 1, 3, 3)))
    out = forward_op("depthwise_conv2d", x, w, stride=1, padding=1)
    assert out.shape == (1, 3, 5, 5)


def test_conv_stride2_shape():
    # floor((8 + 2*1 - 3)/2) + 1 = 4
    x = Tensor(np.zeros((1, 3, 8, 8)))
    w = Tensor(np.zeros((16, 3, 3, 3)))
    out = forward_op("conv2d", x, w, stride=2, padding=1)
    assert out.shape == (1, 16, 4, 4)


def test_conv_channel_mismatch_names_op_and_dims():
    x = Tensor(np.zeros((1, 4, 8, 8)))
    w = Tensor(np.zeros((16, 3, 3, 3)))
    with pytest.raises(ShapeError, match="conv2d.*4.*3"):
        forward_op("conv2d", x, w)


def test_nonpositive_stride_rejected():
    x = Tensor(np.zeros((1, 3, 8, 8)))
    w = Tensor(np.zeros((4, 3, 3, 3)))
    with pytest.raises(ShapeError, match="stride"):
        forward_op("conv2d", x, w, stride=0)


def test_unknown_op_kind():
    with pytest.raises(ValueError, match="unknown op kind"):
        forward_op("maxpool", Tensor([1.0]))


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError, match="dense"):
        ops.dense(Tensor(np.zeros((2, 5))), Tensor(np.zeros((4, 3))))


def test_backward_sum_is_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(x.sum())
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_mse_analytic():
    # d/dx mean((x-t)^2) at x=[1,3], t=[2,5] is [2(1-2)/2, 2(3-5)/2] = [-1,-2]
    x = Tensor([1.0, 3.0], requires_grad=True)
    t = Tensor([2.0, 5.0])
    backward(((x - t) ** 2).mean())
    assert np.allclose(x.grad, [-1.0, -2.0])


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * 2.0
    with pytest.raises(ShapeError, match="scalar"):
        backward(y)
    active_graph().reset()


def test_backward_rejects_empty_graph():
    with pytest.raises(RuntimeError, match="no operations"):
        backward(Tensor([1.0], requires_grad=True))


def test_backward_consumes_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward((x * x).sum())
    assert len(active_graph()) == 0


def test_grad_accumulates_over_reuse():
    x = Tensor([2.0], requires_grad=True)
    backward((x * x + x).sum())  # d/dx (x^2 + x) = 2x + 1 = 5
    assert np.allclose(x.grad, [5.0])


def test_no_grad_suppresses_recording():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert len(active_graph()) == 0


def test_narrow_concat_roundtrip():
    x = Tensor(np.arange(12.0).reshape(3, 4))
    left = narrow(x, 1, 0, 2)
    right = narrow(x, 1, 2, 2)
    back = concat((left, right), axis=1)
    assert np.array_equal(back.data, x.data)


def test_concat_shape_mismatch():
    with pytest.raises(ShapeError, match="concat"):
        concat((Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))), axis=1)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32))
        y = ops.conv2d(x, w, stride=2, padding=1)
        return ops.hardswish(y).data

    assert np.array_equal(run(), run())


def test_dtype_preserved_through_ops():
    x = Tensor(np.ones((2, 2)), dtype=np.float64)
    assert ((x * 2.0) + x).dtype == np.float64
    y = Tensor(np.ones((2, 2), dtype=np.float32))
    assert (y * 2.0).dtype == np.float32
    # python lists default to f32
    assert Tensor([1.0, 2.0]).dtype == np.float32


# --- gradient checks (full 20-seed sweep lives in the acceptance suite) ---

@pytest.mark.parametrize("op_name", sorted(OP_CASES))
def test_gradients_match_finite_differences(op_name):
    check_op_gradients(op_name, n_seeds=3)


# --- Adam ---

def test_adam_first_step_moves_by_lr():
    p = Tensor([0.0], requires_grad=True)
    opt = Adam([("p", p)], lr=0.1)
    p.grad = np.ones(1, dtype=np.float32)
    opt.step()
    assert abs(p.data[0] + 0.1) < 1e-6
    assert opt.step_count == 1


def test_adam_zero_grad_no_move():
    p = Tensor([1.5], requires_grad=True)
    opt = Adam([("p", p)], lr=0.1)
    p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    assert p.data[0] == pytest.approx(1.5)


def test_adam_lr_zero_counts_steps():
    p = Tensor([1.5], requires_grad=True)
    opt = Adam([("p", p)], lr=0.0)
    for _ in range(2):
        p.grad = np.ones(1, dtype=np.float32)
        opt.step()
    assert p.data[0] == 1.5
    assert opt.step_count == 2


def test_adam_missing_grad_names_parameter():
    p = Tensor([0.0], requires_grad=True)
    opt = Adam([("encoder.stem.weight", p)], lr=0.1)
    with pytest.raises(MissingGradientError, match="encoder.stem.weight"):
        opt.step()
