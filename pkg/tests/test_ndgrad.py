import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedclassavg import ndgrad as ng
from fedclassavg.ndgrad import Tensor


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# ---------------------------------------------------------------- forward values


def test_matmul_hand_example():
    out = ng.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])
    assert out.dtype == np.float32


def test_relu_example():
    np.testing.assert_array_equal(ng.relu(Tensor([-1, 0, 2])).data, [0, 0, 2])


def test_l2_normalize_three_four_five():
    np.testing.assert_allclose(ng.l2_normalize_rows(Tensor([[3, 4]])).data, [[0.6, 0.8]], rtol=1e-7)


def test_l2_normalize_zero_row_stays_zero_with_zero_grad():
    x = Tensor([[0.0, 0.0], [3.0, 4.0]], requires_grad=True)
    y = ng.l2_normalize_rows(x)
    np.testing.assert_array_equal(y.data[0], [0, 0])
    ng.backward(ng.sum(y))
    np.testing.assert_array_equal(x.grad[0], [0, 0])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, (5, 7), elements=st.floats(-1e3, 1e3, width=32)))
def test_l2_normalize_rows_have_unit_norm(x):
    y = ng.l2_normalize_rows(Tensor(x)).data
    norms = np.linalg.norm(y.astype(np.float64), axis=1)
    nonzero = np.linalg.norm(x, axis=1) > 0
    np.testing.assert_allclose(norms[nonzero], 1.0, atol=1e-6)
    np.testing.assert_array_equal(y[~nonzero], 0)


def test_log_softmax_is_stable_for_large_logits():
    out = ng.log_softmax(Tensor([[1000.0, 0.0]])).data
    np.testing.assert_allclose(out, [[0.0, -1000.0]], atol=1e-4)


def test_log_softmax_mask_excludes_entries():
    x = Tensor([[1.0, 2.0, 3.0]])
    mask = np.array([[True, False, True]])
    out = ng.log_softmax(x, mask=mask).data
    ref = np.array([1.0, 3.0]) - np.log(np.exp(1.0) + np.exp(3.0))
    np.testing.assert_allclose(out[0, [0, 2]], ref, rtol=1e-6)
    assert out[0, 1] == 0


def test_concat_gather_transpose_values():
    a, b = Tensor([[1, 2]]), Tensor([[3, 4], [5, 6]])
    np.testing.assert_array_equal(ng.concat_rows([a, b]).data, [[1, 2], [3, 4], [5, 6]])
    np.testing.assert_array_equal(ng.gather_rows(b, [1, 1, 0]).data, [[5, 6], [5, 6], [3, 4]])
    np.testing.assert_array_equal(ng.transpose(b).data, [[3, 5], [4, 6]])


def test_forward_op_dispatch_matches_direct_calls():
    a = Tensor([[1.0, -2.0]])
    assert set(ng.OP_KINDS) >= {
        "matmul", "add", "mul_scalar", "relu", "log_softmax", "exp", "log", "sum", "mean",
        "l2_normalize_rows", "concat_rows", "transpose", "gather_rows",
    }
    np.testing.assert_array_equal(ng.forward_op("relu", [a]).data, ng.relu(a).data)
    np.testing.assert_array_equal(ng.forward_op("mul_scalar", [a], s=3.0).data, [[3.0, -6.0]])
    np.testing.assert_array_equal(ng.forward_op("concat_rows", [a, a]).data, [[1, -2], [1, -2]])
    with pytest.raises(ValueError, match="unknown op"):
        ng.forward_op("conv2d", [a])


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((8, 5)), rng.standard_normal((5, 4))
    r1 = ng.log_softmax(ng.matmul(Tensor(a), Tensor(b))).data
    r2 = ng.log_softmax(ng.matmul(Tensor(a), Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()


# ---------------------------------------------------------------- errors


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(ng.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ng.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_add_requires_equal_shapes():
    with pytest.raises(ng.ShapeError, match="add"):
        ng.add(Tensor(np.ones(3)), Tensor(np.ones(2)))


def test_overflow_is_an_error():
    with pytest.raises(ng.NumericError):
        ng.exp(Tensor([100.0]))


def test_log_of_zero_is_an_error():
    with pytest.raises(ng.NumericError):
        ng.log(Tensor([0.0]))


def test_backward_rejects_non_scalar_and_detached():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ng.GradError, match="scalar"):
        ng.backward(ng.mul_scalar(w, 2.0))
    with pytest.raises(ng.GradError):
        ng.backward(ng.sum(w).detach())


# ---------------------------------------------------------------- backward examples


def test_grad_of_sum_of_squares():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ng.backward(ng.sum(ng.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [2, 4, 6])


def test_grad_of_mean():
    w = Tensor([1.0, 5.0, -2.0, 0.5], requires_grad=True)
    ng.backward(ng.mean(w))
    np.testing.assert_array_equal(w.grad, [0.25] * 4)


def test_grad_of_two_logit_cross_entropy():
    z = Tensor([[0.0, 0.0]], requires_grad=True)
    onehot = Tensor([[1.0, 0.0]])
    ng.backward(ng.mul_scalar(ng.sum(ng.mul(ng.log_softmax(z), onehot)), -1.0))
    np.testing.assert_allclose(z.grad, [[-0.5, 0.5]], rtol=1e-6)
    # finite-difference oracle agrees
    f = lambda x: ng.mul_scalar(ng.sum(ng.mul(ng.log_softmax(x), Tensor([[1.0, 0.0]], dtype=x.dtype))), -1.0)  # noqa: E731
    assert ng.finite_difference_check(f, t64([[0.0, 0.0]]), 1e-3) < 1e-6


def test_repeated_backward_accumulates():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = ng.sum(ng.mul(w, w))
    ng.backward(loss)
    ng.backward(loss)
    np.testing.assert_array_equal(w.grad, [4, 8, 12])
    w.zero_grad()
    assert w.grad is None


def test_shared_input_gradients_add_up():
    w = Tensor([2.0], requires_grad=True)
    ng.backward(ng.sum(ng.add(ng.mul(w, w), ng.mul_scalar(w, 3.0))))
    np.testing.assert_array_equal(w.grad, [7.0])


def test_tape_replays_in_exact_reverse_order():
    w = Tensor([[1.0, -1.0]], requires_grad=True)
    h = ng.relu(w)
    e = ng.exp(h)
    s = ng.sum(e)
    tape = ng.ComputationTape.of(s)
    assert [n.kind for n in tape] == ["relu", "exp", "sum"]
    assert [n.kind for n in tape.reverse()] == ["sum", "exp", "relu"]


def test_ops_without_grad_inputs_record_nothing():
    out = ng.exp(Tensor([1.0]))
    assert out.is_leaf and not out.requires_grad


# ---------------------------------------------------------------- gradient checks, every op

rng = np.random.default_rng(1234)


def _points(shape, n=10, positive=False):
    for _ in range(n):
        x = rng.standard_normal(shape)
        yield np.abs(x) + 0.5 if positive else x


UNARY = {
    "relu": (lambda x: ng.sum(ng.mul(ng.relu(x), ng.relu(x))), (3, 4), False),
    "exp": (lambda x: ng.sum(ng.exp(x)), (3, 4), False),
    "log": (lambda x: ng.sum(ng.log(x)), (3, 4), True),
    "sqrt": (lambda x: ng.sum(ng.sqrt(x)), (3, 4), True),
    "mean": (lambda x: ng.mean(ng.mul(x, x)), (3, 4), False),
    "mul_scalar": (lambda x: ng.sum(ng.mul(ng.mul_scalar(x, -2.5), x)), (3, 4), False),
    "transpose": (lambda x: ng.sum(ng.matmul(ng.transpose(x), ng.exp(x))), (3, 4), False),
    "log_softmax": (lambda x: ng.sum(ng.mul(ng.log_softmax(x), ng.exp(x))), (3, 4), False),
    "log_softmax_masked": (
        lambda x: ng.sum(ng.mul(ng.log_softmax(x, mask=~np.eye(4, dtype=bool)), ng.exp(x))),
        (4, 4),
        False,
    ),
    "l2_normalize_rows": (lambda x: ng.sum(ng.mul(ng.l2_normalize_rows(x), ng.exp(x))), (3, 4), False),
    "gather_rows": (lambda x: ng.sum(ng.exp(ng.gather_rows(x, [2, 0, 2]))), (3, 4), False),
    "concat_rows": (lambda x: ng.sum(ng.exp(ng.concat_rows([x, ng.mul_scalar(x, 0.5)]))), (3, 4), False),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    f, shape, positive = UNARY[name]
    with ng.precision(np.float64):
        for x in _points(shape, positive=positive):
            assert ng.finite_difference_check(f, t64(x), 1e-3) < 1e-3


@pytest.mark.parametrize("kind", ["matmul", "add", "sub", "mul", "bias_add"])
def test_binary_op_gradients_wrt_each_input(kind):
    shapes = {"matmul": ((3, 4), (4, 2)), "bias_add": ((3, 4), (4,))}.get(kind, ((3, 4), (3, 4)))
    op = getattr(ng, kind)
    with ng.precision(np.float64):
        for _ in range(10):
            a, b = rng.standard_normal(shapes[0]), rng.standard_normal(shapes[1])
            fa = lambda x: ng.sum(ng.exp(op(x, t64(b))))  # noqa: E731
            fb = lambda x: ng.sum(ng.exp(op(t64(a), x)))  # noqa: E731
            assert ng.finite_difference_check(fa, t64(a), 1e-3) < 1e-3
            assert ng.finite_difference_check(fb, t64(b), 1e-3) < 1e-3


def test_gradcheck_sum_of_squares_is_tight():
    f = lambda x: ng.sum(ng.mul(x, x))  # noqa: E731
    assert ng.finite_difference_check(f, t64([1.0, 2.0]), 1e-3) < 1e-4


def test_gradcheck_constant_function_is_zero():
    f = lambda x: ng.sum(Tensor(np.ones(3), dtype=np.float64))  # noqa: E731
    assert ng.finite_difference_check(f, t64([1.0, 2.0, 3.0]), 1e-3) == 0.0


def test_gradcheck_rejects_non_finite():
    with pytest.raises(ng.NumericError):
        ng.finite_difference_check(lambda x: ng.sum(ng.log(x)), t64([1e-4, 1.0]), 1e-3)


def test_gradcheck_detects_a_wrong_gradient():
    # a deliberately wrong backward must be caught
    def bad(x):
        return ng.ops._emit("bad_square", x.data**2, [x], lambda g: [g * 3 * x.data])

    assert ng.finite_difference_check(lambda x: ng.sum(bad(x)), t64([1.0, 2.0]), 1e-3) > 0.1


def test_check_param_gradient_restores_parameter():
    with ng.precision(np.float64):
        w = t64(rng.standard_normal((3, 2)), grad=True)
        x = t64(rng.standard_normal((4, 3)))
        before = w.data.copy()
        err = ng.check_param_gradient(lambda: ng.sum(ng.exp(ng.matmul(x, w))), w, 1e-3)
    assert err < 1e-3
    assert w.data.tobytes() == before.tobytes()


def test_precision_context_is_scoped():
    assert ng.get_default_dtype() == np.float32
    with ng.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


# ---------------------------------------------------------------- weight files


def test_weight_file_layout_is_exact(tmp_path):
    arrays = [np.array([[1.0, 2.0]], dtype=np.float32), np.array([0.5], dtype=np.float32)]
    blob = ng.encode_weights(arrays)
    expected = (
        b"FCAW"
        + struct.pack("<II", 1, 2)
        + struct.pack("<III", 2, 1, 2)
        + struct.pack("<2f", 1.0, 2.0)
        + struct.pack("<II", 1, 1)
        + struct.pack("<f", 0.5)
    )
    assert blob == expected


@settings(max_examples=30, deadline=None)
@given(st.lists(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5)), max_size=4))
def test_weight_file_round_trip_is_bit_exact(arrays):
    out, used = ng.decode_weights(ng.encode_weights(arrays))
    assert used == len(ng.encode_weights(arrays))
    assert len(out) == len(arrays)
    for a, b in zip(arrays, out):
        assert a.shape == b.shape and a.tobytes() == b.tobytes()


def test_weight_file_errors(tmp_path):
    p = tmp_path / "w.fcaw"
    ng.save_weights(p, [np.ones(3, np.float32)])
    good = p.read_bytes()
    for bad in (b"XXXX" + good[4:], good[:-2], good + b"\0"):
        p.write_bytes(bad)
        with pytest.raises(ng.SnapshotFormatError):
            ng.load_weights(p)


def test_float32_cross_entropy_gradcheck_with_float32_step():
    # the float32 path is usable too, at a looser tolerance than the float64 oracle
    x = rng.standard_normal((4, 5)).astype(np.float32)
    onehot = np.eye(5, dtype=np.float32)[[0, 1, 2, 3]]
    f = lambda z: ng.mul_scalar(ng.sum(ng.mul(ng.log_softmax(z), Tensor(onehot))), -0.25)  # noqa: E731
    assert ng.finite_difference_check(f, Tensor(x), 1e-2) < 1e-2
    assert math.isfinite(f(Tensor(x)).item())
