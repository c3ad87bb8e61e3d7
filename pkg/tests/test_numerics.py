import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ss2r.numerics import (CheckpointError, GradTape, NonFiniteGradient, OptimizerState, ShapeError, Tensor,
                           adamw_step, backward, load_checkpoint, ops, precision, save_checkpoint)
from ss2r.numerics.gradcheck import check_gradients, op_checks, three_layer_net_check


def test_conv_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_hand_evaluated():
    x = Tensor([[[[1, 2], [3, 4]]]])
    k = Tensor([[[[1, 0], [0, 1]]]])
    assert ops.conv2d(x, k).data.tolist() == [[[[5.0]]]]


def test_conv_zero_input():
    out = ops.conv2d(Tensor(np.zeros((2, 3, 5, 5))), Tensor(np.random.default_rng(0).normal(size=(4, 3, 3, 3))),
                     padding=1)
    assert not out.data.any()


def test_conv_output_shape_and_errors():
    x = Tensor(np.zeros((1, 2, 7, 7)))
    assert ops.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), stride=2, padding=1).shape == (1, 3, 4, 4)
    with pytest.raises(ShapeError):
        ops.conv2d(x, Tensor(np.zeros((3, 5, 3, 3))))
    with pytest.raises(ShapeError):
        ops.conv2d(x, Tensor(np.zeros((3, 2, 9, 9))))


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_conv_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(2, 2, 6, 6))
    k = Tensor(rng.normal(size=(3, 2, 3, 3)))
    with precision(np.float64):
        lhs = ops.conv2d(Tensor(a * x + b * y), k, padding=1).data
        rhs = a * ops.conv2d(Tensor(x), k, padding=1).data + b * ops.conv2d(Tensor(y), k, padding=1).data
    scale = max(np.abs(rhs).max(), 1e-12)
    assert np.abs(lhs - rhs).max() / scale < 1e-5


def test_backward_sum_and_square():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    with GradTape() as tape:
        loss = ops.sum(x)
    np.testing.assert_array_equal(backward(loss, tape, [x])[x], np.ones((2, 3)))
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with GradTape() as tape:
        loss = ops.sum(ops.square(x))
    np.testing.assert_allclose(backward(loss, tape, [x])[x], [2, 4, 6])


def test_backward_rejects_non_scalar_and_zero_for_unused():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    with GradTape() as tape:
        y = ops.mul(x, 2.0)
        loss = ops.sum(y)
    with pytest.raises(ShapeError):
        backward(y, tape, [x])
    g = backward(loss, tape, [x, unused])
    assert not g[unused].any()


def test_backward_replay_is_deterministic():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(5, 4)))
    with GradTape() as tape:
        loss = ops.sum(ops.silu(ops.dense(x, w)))
    a = backward(loss, tape, [w])[w]
    b = backward(loss, tape, [w])[w]
    np.testing.assert_array_equal(a, b)


def test_every_op_passes_gradient_check():
    for name, err in op_checks(0).items():
        assert err < 1e-4, name


def test_three_layer_net_gradient_check():
    assert three_layer_net_check(0) < 1e-4


def test_gradient_check_detects_wrong_adjoint():
    from ss2r.numerics.tensor import record

    def bad_square(x):
        return record(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

    assert check_gradients(lambda x: ops.sum(bad_square(x)), [np.array([1.0, 2.0])]) > 0.1


def test_layer_op_examples():
    assert not ops.group_norm(Tensor(np.full((1, 4, 3, 3), 7.0)), 2).data.any()
    assert ops.max_reduce(Tensor([[[1, 5], [3, 2]]]), axis=1).data.tolist() == [[3.0, 5.0]]
    up = ops.upsample_nearest(Tensor([[[[1, 2], [3, 4]]]]), 2).data[0, 0]
    np.testing.assert_array_equal(up, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))
    with pytest.raises(ShapeError):
        ops.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_tensor_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_adamw_zero_gradient_identity():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    new, st_ = adamw_step(p, {"w": np.zeros(2)}, OptimizerState(lr=0.1))
    np.testing.assert_array_equal(new["w"].data, p["w"].data)
    assert st_.step == 1


def test_adamw_first_step_closed_form():
    new, _ = adamw_step({"w": Tensor([1.0])}, {"w": np.array([1.0])}, OptimizerState(lr=3e-5))
    assert abs(float(new["w"].data[0]) - (1.0 - 3e-5)) < 1e-7


def test_adamw_decoupled_decay():
    with precision(np.float64):
        new, _ = adamw_step({"w": Tensor([2.0])}, {"w": np.zeros(1)}, OptimizerState(lr=1e-2, weight_decay=0.01))
    assert new["w"].data[0] == pytest.approx(2.0 * (1 - 1e-2 * 0.01), rel=1e-12)


def test_adamw_rejects_bad_gradients():
    p = {"w": Tensor([1.0])}
    with pytest.raises(NonFiniteGradient):
        adamw_step(p, {"w": np.array([np.nan])}, OptimizerState())
    with pytest.raises(ShapeError):
        adamw_step(p, {"w": np.ones(2)}, OptimizerState())


def test_adamw_step_counter_increases():
    st_ = OptimizerState()
    p = {"w": Tensor([1.0])}
    for k in range(1, 4):
        p, st_ = adamw_step(p, {"w": np.array([0.5])}, st_)
        assert st_.step == k


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    arrays = {"b": rng.normal(size=(2, 3)).astype(np.float32), "a": np.float32(1.5) * np.ones(4, np.float32),
              "scalar": np.array(2.0, np.float32)}
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, arrays)
    back = load_checkpoint(path)
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes() and back[k].shape == arrays[k].shape
    first = path.read_bytes()
    save_checkpoint(path, dict(reversed(list(arrays.items()))))
    assert path.read_bytes() == first


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"a": np.ones(3, np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(raw.replace(b"SS2RTENS", b"XXXXXXXX"))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
