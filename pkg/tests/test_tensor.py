import numpy as np
import pytest

from sfnet.gradcheck import check_gradients, max_relative_error
from sfnet.tensor import (
    ShapeError,
    Tensor,
    array_from_bytes,
    array_to_bytes,
    concat,
    gather_axis1,
    log_softmax,
    no_grad,
    permute_time,
    softmax,
    stack,
    take_per_row,
)


def test_add_identity():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    z = x + Tensor(np.zeros((2, 3)))
    assert np.array_equal(z.data, x.data)


def test_softmax_uniform_on_equal_logits():
    x = Tensor(np.full((4, 7), 3.25))
    p = softmax(x, axis=1)
    assert np.allclose(p.data, 1.0 / 7, atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(5, 11)) * 30)
    p = softmax(x, axis=-1)
    assert np.all(p.data >= 0)
    assert np.allclose(p.data.sum(axis=-1), 1.0, atol=1e-12)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    got = (Tensor(a) @ Tensor(b)).data
    assert np.max(np.abs(got - expected)) < 1e-12


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        Tensor(np.zeros(3)) @ Tensor(np.zeros((3, 2)))


def test_broadcast_mismatch_error():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((2, 4)))


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_half_square_norm_gives_x():
    x = Tensor(np.random.default_rng(2).normal(size=(5,)), requires_grad=True)
    (0.5 * (x * x).sum()).backward()
    assert np.allclose(x.grad, x.data, atol=1e-15)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_backward_accumulates_across_calls():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = x.sum()
    loss.backward()
    loss2 = x.sum()
    loss2.backward()
    assert np.array_equal(x.grad, 2 * np.ones(3))
    x.zero_grad()
    assert x.grad is None


def test_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(2,)), requires_grad=True)

    def loss():
        h = (x @ w + b).tanh()
        p = log_softmax(h, axis=1)
        return (p * p).mean() + (x.sigmoid().sum() / 7.0)

    assert check_gradients(loss, [x, w, b]) < 1e-4


@pytest.mark.parametrize("op", ["exp", "log", "sqrt", "tanh", "sigmoid", "relu"])
def test_pointwise_gradients(op):
    rng = np.random.default_rng(11)
    raw = rng.uniform(0.2, 2.0, size=(4, 3))
    x = Tensor(raw, requires_grad=True)
    assert check_gradients(lambda: getattr(x, op)().sum(), [x]) < 1e-4


def test_reduction_and_reshape_gradients():
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)

    def loss():
        y = x.mean(axis=(1,), keepdims=True)
        z = (x - y).reshape(6, 4).transpose((1, 0))
        return (z * z).sum(axis=1).mean()

    assert check_gradients(loss, [x]) < 1e-4


def test_structural_op_gradients():
    rng = np.random.default_rng(17)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)

    def loss():
        c = concat([a, b], axis=1)
        s = stack([a, b], axis=0)
        return (c * c).sum() + s.sum()

    assert check_gradients(loss, [a, b]) < 1e-4


def test_gather_ops_and_gradients():
    rng = np.random.default_rng(19)
    x = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
    idx = np.array([[0, 1], [1, 2], [2, 3]])
    out = gather_axis1(x, idx)
    assert out.shape == (2, 3, 2, 3)
    assert np.array_equal(out.data[1, 2], x.data[1, [2, 3]])
    assert check_gradients(lambda: (gather_axis1(x, idx) ** 2).sum(), [x]) < 1e-4

    last = take_per_row(x, np.array([4, 2]))
    assert np.array_equal(last.data[0], x.data[0, 4])
    assert np.array_equal(last.data[1], x.data[1, 2])
    assert check_gradients(lambda: take_per_row(x, np.array([4, 2])).sum(), [x]) < 1e-4

    perm = np.array([[4, 3, 2, 1, 0], [1, 0, 2, 3, 4]])
    rev = permute_time(x, perm)
    assert np.array_equal(rev.data[0], x.data[0, ::-1])
    assert check_gradients(lambda: (permute_time(x, perm) ** 3).sum(), [x]) < 1e-4


def test_softmax_gradients():
    rng = np.random.default_rng(23)
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    t = rng.normal(size=(3, 5))
    assert check_gradients(lambda: (softmax(x, axis=1) * Tensor(t)).sum(), [x]) < 1e-4
    assert check_gradients(lambda: (log_softmax(x, axis=1) * Tensor(t)).sum(), [x]) < 1e-4


def test_no_grad_blocks_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert y._backward is None and y._prev == ()


def test_detach_blocks_gradient_flow():
    x = Tensor(np.ones(3), requires_grad=True)
    (x.detach() * x).sum().backward()
    assert np.array_equal(x.grad, np.ones(3))


def test_forward_determinism():
    rng = np.random.default_rng(29)
    x = rng.normal(size=(64, 64))
    a = softmax(Tensor(x), axis=1).data
    b = softmax(Tensor(x.copy()), axis=1).data
    assert np.array_equal(a, b)


def test_serialization_round_trip():
    rng = np.random.default_rng(31)
    arr = rng.normal(size=(2, 3, 4))
    blob = array_to_bytes(arr)
    # header: rank as u64 LE, then extents as u64 LE
    assert blob[:8] == (3).to_bytes(8, "little")
    assert blob[8:16] == (2).to_bytes(8, "little")
    assert blob[16:24] == (3).to_bytes(8, "little")
    assert blob[24:32] == (4).to_bytes(8, "little")
    back, offset = array_from_bytes(blob)
    assert offset == len(blob)
    assert np.array_equal(back, arr)


def test_serialization_scalar_rank_zero():
    blob = array_to_bytes(np.asarray(4.5))
    back, _ = array_from_bytes(blob)
    assert back.shape == () and back == 4.5


def test_grad_finite_after_backward():
    rng = np.random.default_rng(37)
    x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    loss = log_softmax(x * 50.0, axis=1).sum()
    loss.backward()
    assert np.all(np.isfinite(x.grad))


def test_max_relative_error_definition():
    assert max_relative_error(np.array(2.0), np.array(2.0)) == 0.0
    assert max_relative_error(np.array(0.0), np.array(1e-6)) == pytest.approx(1e-6)
