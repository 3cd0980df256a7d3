import numpy as np
import pytest

import spixel.tensor as T
from spixel.errors import DegenerateBatchError, ShapeError, TapeError
from spixel.tensor import Tape, Tensor

from fdcheck import away_from_kinks, check_gradients


def p(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# frozen examples


def test_conv2d_all_ones_sums_window():
    x = p(np.ones((1, 1, 3, 3)))
    w = p(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, w)
    assert out.data.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == pytest.approx(9.0)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = p(rng.uniform(size=(2, 1, 5, 5)))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = T.conv2d(x, p(w), padding=1)
    np.testing.assert_allclose(out.data[:, 0], x.data[:, 0])


def test_conv2d_shape_error_lists_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\)"):
        T.conv2d(p(np.ones((1, 2, 4, 4))), p(np.ones((1, 3, 3, 3))))


def test_relu_values_and_derivative():
    x = p([-1.0, 2.0])
    with Tape() as tape:
        out = T.relu(x)
        tape.backward(T.tensor_sum(out))
    np.testing.assert_array_equal(out.data, [0.0, 2.0])
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_maxpool_value_and_routing():
    x = p([[[[1.0, 2.0], [3.0, 4.0]]]])
    with Tape() as tape:
        out = T.maxpool2d(x)
        tape.backward(T.tensor_sum(out))
    assert out.data.reshape(()) == pytest.approx(4.0)
    np.testing.assert_array_equal(x.grad[0, 0], [[0, 0], [0, 1]])


def test_maxpool_tie_routes_to_first_in_scan_order():
    x = p(np.full((1, 1, 2, 2), 7.0))
    with Tape() as tape:
        tape.backward(T.tensor_sum(T.maxpool2d(x)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_cross_entropy_uniform_logits():
    logits = p(np.zeros((4, 10)))
    loss = T.softmax_cross_entropy(logits, np.array([0, 3, 5, 9]))
    assert float(loss.data) == pytest.approx(np.log(10.0), abs=1e-12)


def test_cross_entropy_shift_invariance():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((6, 5))
    targets = rng.integers(0, 5, size=6)
    base = T.softmax_cross_entropy(Tensor(logits), targets)
    shifted = T.softmax_cross_entropy(Tensor(logits + 123.456), targets)
    assert abs(float(base.data) - float(shifted.data)) < 1e-9


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_batchnorm_normalizes_per_channel():
    rng = np.random.default_rng(2)
    x = Tensor(rng.uniform(1.0, 5.0, size=(8, 3, 4, 4)))
    gamma, beta = p(np.ones(3)), p(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    out = T.batchnorm(x, gamma, beta, rm, rv, train=True, eps=1e-12)
    mean = out.data.mean(axis=(0, 2, 3))
    var = out.data.var(axis=(0, 2, 3))
    np.testing.assert_allclose(mean, 0.0, atol=1e-6)
    np.testing.assert_allclose(var, 1.0, atol=1e-6)


def test_batchnorm_affine_output_stats():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((64, 2)))
    gamma, beta = p(np.full(2, 2.0)), p(np.full(2, 3.0))
    out = T.batchnorm(x, gamma, beta, np.zeros(2), np.ones(2), train=True, eps=1e-15)
    np.testing.assert_allclose(out.data.mean(axis=0), 3.0, atol=1e-9)
    np.testing.assert_allclose(out.data.std(axis=0), 2.0, atol=1e-9)


def test_batchnorm_running_stats_momentum():
    x = Tensor(np.array([[1.0], [3.0]]))
    rm, rv = np.zeros(1), np.ones(1)
    T.batchnorm(x, p(np.ones(1)), p(np.zeros(1)), rm, rv, train=True, momentum=0.1)
    assert rm[0] == pytest.approx(0.1 * 2.0)
    assert rv[0] == pytest.approx(0.9 * 1.0 + 0.1 * 1.0)  # biased batch var = 1


def test_batchnorm_single_sample_train_rejected():
    with pytest.raises(DegenerateBatchError):
        T.batchnorm(Tensor(np.ones((1, 2))), p(np.ones(2)), p(np.zeros(2)),
                    np.zeros(2), np.ones(2), train=True)


def test_segment_sum_example():
    out = T.segment_sum(Tensor([1.0, 2.0, 3.0]), np.array([0, 0, 1]), 2)
    np.testing.assert_array_equal(out.data, [[3.0], [3.0]])


def test_segment_softmax_uniform():
    out = T.segment_softmax(Tensor([0.0, 0.0]), np.array([0, 0]), 1)
    np.testing.assert_allclose(out.data, [[0.5], [0.5]])


def test_segment_mean_empty_segment_yields_zeros():
    out = T.segment_mean(Tensor([[2.0, 4.0]]), np.array([1]), 3)
    np.testing.assert_array_equal(out.data, [[0, 0], [2, 4], [0, 0]])


def test_segment_id_out_of_range():
    with pytest.raises(IndexError):
        T.segment_sum(Tensor([1.0]), np.array([2]), 2)


def test_scatter_segment_op_dispatch():
    vals = Tensor([[1.0], [5.0], [2.0]])
    ids = np.array([0, 0, 1])
    assert T.scatter_segment_op("max", vals, ids, 2).data[0, 0] == 5.0
    assert T.scatter_segment_op("mean", vals, ids, 2).data[0, 0] == 3.0


# ---------------------------------------------------------------------------
# backward mechanics


def test_backward_product_rule():
    x, y = p(2.0), p(3.0)
    with Tape() as tape:
        tape.backward(T.mul(x, y))
    assert x.grad == pytest.approx(3.0)
    assert y.grad == pytest.approx(2.0)


def test_backward_fanout_accumulates():
    x = p(5.0)
    with Tape() as tape:
        tape.backward(T.add(x, x))
    assert x.grad == pytest.approx(2.0)


def test_backward_requires_scalar():
    x = p([1.0, 2.0])
    with Tape() as tape:
        out = T.scale(x, 2.0)
        with pytest.raises(TapeError):
            tape.backward(out)


def test_backward_requires_connected_loss():
    with Tape() as tape:
        loose = Tensor(1.0)
        with pytest.raises(TapeError):
            tape.backward(loose)


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((5, 4)))
    w = p(rng.standard_normal((4, 3)))
    b = p(rng.standard_normal(3))
    targets = rng.integers(0, 3, size=5)

    def run():
        w.grad = b.grad = None
        with Tape() as tape:
            tape.backward(T.softmax_cross_entropy(T.linear(x, w, b), targets))
        return w.grad.copy(), b.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])


def test_no_tape_means_no_recording():
    x = p([1.0])
    out = T.relu(x)
    assert out.requires_grad is False and out.node_id is None


# ---------------------------------------------------------------------------
# finite-difference checks: every primitive on >= 3 random shapes


def _fd_elementwise(op, shapes, seed):
    rng = np.random.default_rng(seed)
    for shape in shapes:
        x = Tensor(away_from_kinks(rng, shape), requires_grad=True)
        r = Tensor(rng.standard_normal(shape))
        check_gradients(lambda: T.tensor_sum(T.mul(op(x), r)), {"x": x})


@pytest.mark.parametrize("op", [T.relu, T.leaky_relu, T.elu],
                         ids=["relu", "leaky_relu", "elu"])
def test_fd_activations(op):
    _fd_elementwise(op, [(3,), (4, 5), (2, 3, 2)], seed=10)


def test_fd_add_mul_scale_reshape():
    rng = np.random.default_rng(11)
    for shape in [(2,), (3, 4), (2, 2, 3)]:
        a = Tensor(rng.standard_normal(shape), requires_grad=True)
        b = Tensor(rng.standard_normal(shape), requires_grad=True)
        r = Tensor(rng.standard_normal(shape))
        check_gradients(
            lambda: T.tensor_sum(T.mul(T.add(T.mul(a, b), T.scale(a, 0.7)), r)),
            {"a": a, "b": b})
        flat = (int(np.prod(shape)),)
        r_flat = Tensor(rng.standard_normal(flat))
        check_gradients(lambda: T.tensor_sum(T.mul(T.reshape(a, flat), r_flat)),
                        {"a": a})


def test_fd_add_bias():
    rng = np.random.default_rng(21)
    for n, f in [(2, 3), (5, 1), (3, 6)]:
        x = Tensor(rng.standard_normal((n, f)), requires_grad=True)
        b = Tensor(rng.standard_normal(f), requires_grad=True)
        r = Tensor(rng.standard_normal((n, f)))
        check_gradients(lambda: T.tensor_sum(T.mul(T.add_bias(x, b), r)),
                        {"x": x, "b": b})


def test_fd_matmul_linear():
    rng = np.random.default_rng(12)
    for n, fin, fout in [(2, 3, 4), (5, 1, 2), (1, 6, 3)]:
        x = Tensor(rng.standard_normal((n, fin)), requires_grad=True)
        w = Tensor(rng.standard_normal((fin, fout)), requires_grad=True)
        b = Tensor(rng.standard_normal(fout), requires_grad=True)
        r = Tensor(rng.standard_normal((n, fout)))
        check_gradients(lambda: T.tensor_sum(T.mul(T.matmul(x, w), r)), {"x": x, "w": w})
        check_gradients(lambda: T.tensor_sum(T.mul(T.linear(x, w, b), r)),
                        {"x": x, "w": w, "b": b})


@pytest.mark.parametrize("case", [
    dict(x=(2, 3, 8, 8), cout=4, k=3, stride=1, padding=1),
    dict(x=(1, 2, 6, 6), cout=3, k=3, stride=1, padding=0),
    dict(x=(2, 1, 7, 7), cout=2, k=3, stride=2, padding=1),
    dict(x=(1, 4, 4, 4), cout=5, k=1, stride=1, padding=0),
])
def test_fd_conv2d(case):
    rng = np.random.default_rng(13)
    n, c, h, w_ = case["x"]
    x = Tensor(rng.standard_normal((n, c, h, w_)), requires_grad=True)
    w = Tensor(rng.standard_normal((case["cout"], c, case["k"], case["k"])) * 0.5,
               requires_grad=True)
    b = Tensor(rng.standard_normal(case["cout"]), requires_grad=True)
    out_shape = T.conv2d(x, w, b, stride=case["stride"], padding=case["padding"]).data.shape
    r = Tensor(rng.standard_normal(out_shape))
    check_gradients(
        lambda: T.tensor_sum(T.mul(
            T.conv2d(x, w, b, stride=case["stride"], padding=case["padding"]), r)),
        {"x": x, "w": w, "b": b})


@pytest.mark.parametrize("shape,kernel,stride", [
    ((2, 2, 4, 4), 2, 2),
    ((1, 3, 6, 6), 2, 2),
    ((2, 1, 5, 5), 3, 1),
])
def test_fd_maxpool(shape, kernel, stride):
    rng = np.random.default_rng(14)
    x = Tensor(rng.standard_normal(shape), requires_grad=True)
    out_shape = T.maxpool2d(x, kernel, stride).data.shape
    r = Tensor(rng.standard_normal(out_shape))
    check_gradients(lambda: T.tensor_sum(T.mul(T.maxpool2d(x, kernel, stride), r)),
                    {"x": x})


@pytest.mark.parametrize("shape", [(4, 3, 2, 2), (6, 2), (5, 4)])
@pytest.mark.parametrize("train", [True, False])
def test_fd_batchnorm(shape, train):
    rng = np.random.default_rng(15)
    c = shape[1]
    x = Tensor(rng.standard_normal(shape) * 2.0, requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=c), requires_grad=True)
    beta = Tensor(rng.standard_normal(c), requires_grad=True)
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, size=c)
    r = Tensor(rng.standard_normal(shape))

    def loss():
        return T.tensor_sum(T.mul(
            T.batchnorm(x, gamma, beta, rm.copy(), rv.copy(), train=train), r))

    check_gradients(loss, {"x": x, "gamma": gamma, "beta": beta})


@pytest.mark.parametrize("n,k", [(3, 4), (5, 2), (2, 7)])
def test_fd_cross_entropy(n, k):
    rng = np.random.default_rng(16)
    logits = Tensor(rng.standard_normal((n, k)), requires_grad=True)
    targets = rng.integers(0, k, size=n)
    check_gradients(lambda: T.softmax_cross_entropy(logits, targets), {"logits": logits})


@pytest.mark.parametrize("e,f,s", [(6, 3, 3), (5, 1, 2), (9, 4, 4)])
@pytest.mark.parametrize("op", ["sum", "mean", "max", "softmax"])
def test_fd_segment_ops(e, f, s, op):
    rng = np.random.default_rng(17 + e)
    vals = Tensor(rng.standard_normal((e, f)), requires_grad=True)
    ids = rng.integers(0, s, size=e)
    out_shape = T.scatter_segment_op(op, Tensor(vals.data.copy()), ids, s).data.shape
    r = Tensor(rng.standard_normal(out_shape))
    check_gradients(
        lambda: T.tensor_sum(T.mul(T.scatter_segment_op(op, vals, ids, s), r)),
        {"vals": vals})


@pytest.mark.parametrize("v,f,e", [(4, 3, 6), (3, 2, 5), (6, 1, 8)])
def test_fd_gather_and_scale_rows(v, f, e):
    rng = np.random.default_rng(18)
    x = Tensor(rng.standard_normal((v, f)), requires_grad=True)
    s = Tensor(rng.standard_normal((e, 1)), requires_grad=True)
    idx = rng.integers(0, v, size=e)
    r = Tensor(rng.standard_normal((e, f)))
    check_gradients(
        lambda: T.tensor_sum(T.mul(T.scale_rows(T.gather_rows(x, idx), s), r)),
        {"x": x, "s": s})


def test_fd_composite_network():
    """conv -> bn -> relu -> pool -> linear -> cross-entropy, every parameter."""
    rng = np.random.default_rng(19)
    n, c, h, w_ = 3, 2, 8, 8
    x = Tensor(rng.standard_normal((n, c, h, w_)), requires_grad=True)
    conv_w = Tensor(rng.standard_normal((4, c, 3, 3)) * 0.4, requires_grad=True)
    conv_b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)
    beta = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    head_w = Tensor(rng.standard_normal((4 * 4 * 4, 5)) * 0.2, requires_grad=True)
    head_b = Tensor(rng.standard_normal(5) * 0.1, requires_grad=True)
    targets = rng.integers(0, 5, size=n)
    rm, rv = np.zeros(4), np.ones(4)

    def loss():
        y = T.conv2d(x, conv_w, conv_b, padding=1)
        y = T.batchnorm(y, gamma, beta, rm.copy(), rv.copy(), train=True)
        y = T.maxpool2d(T.relu(y))
        y = T.reshape(y, (n, 4 * 4 * 4))
        return T.softmax_cross_entropy(T.linear(y, head_w, head_b), targets)

    check_gradients(loss, {
        "x": x, "conv_w": conv_w, "conv_b": conv_b, "gamma": gamma,
        "beta": beta, "head_w": head_w, "head_b": head_b,
    }, max_coords_per_tensor=40, rng=np.random.default_rng(99))
