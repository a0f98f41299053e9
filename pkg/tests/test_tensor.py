import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmtrans import functional as F
from pmtrans.gradcheck import NonDeterministicError, finite_difference_check
from pmtrans.tensor import ComputationTape, ContractError, ShapeError, Tensor, backward, no_grad

from oracles import naive_conv2d, naive_matmul


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    b = Tensor([[2.0, 3.0], [4.0, 5.0]])
    np.testing.assert_array_equal(F.matmul(Tensor(np.eye(2)), b).data, b.data)


def test_matmul_zero():
    out = F.matmul(Tensor(np.zeros((3, 2))), Tensor(np.random.default_rng(0).normal(size=(2, 4))))
    assert np.all(out.data == 0)


def test_matmul_against_triple_loop():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    expected = naive_matmul(a, b)
    np.testing.assert_array_equal(expected, [[19, 22], [43, 50]])
    np.testing.assert_array_equal(F.matmul(Tensor(a), Tensor(b)).data, expected)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        F.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


# --------------------------------------------------------------- softmax


def test_softmax_examples():
    np.testing.assert_allclose(F.softmax(Tensor([1.0, 1.0])).data, [0.5, 0.5])
    np.testing.assert_array_equal(F.softmax(Tensor([3.7])).data, [1.0])
    out = F.softmax(Tensor([0.0, math.log(2), math.log(3)])).data
    np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        F.softmax(Tensor(np.zeros((2, 3))), axis=2)


@settings(max_examples=40, deadline=None)
@given(
    shape=st.lists(st.integers(1, 5), min_size=1, max_size=4),
    seed=st.integers(0, 10_000),
    data=st.data(),
)
def test_softmax_slices_sum_to_one(shape, seed, data):
    axis = data.draw(st.integers(0, len(shape) - 1))
    x = np.random.default_rng(seed).normal(scale=20, size=shape)
    out = F.softmax(Tensor(x), axis=axis).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)


# ------------------------------------------------------------------ conv


def test_conv_1x1_identity():
    x = np.random.default_rng(1).normal(size=(1, 1, 5, 5))
    out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_constant_image_windowed_sum():
    c = 1.75
    out = F.conv2d(Tensor(np.full((1, 1, 6, 6), c)), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 4, 4)
    np.testing.assert_allclose(out.data, 9 * c)


def test_conv_stride_shape():
    out = F.conv2d(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((3, 2, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 3, 4, 4)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2), c=st.integers(1, 4), h=st.integers(3, 9), w=st.integers(3, 9),
    co=st.integers(1, 3), k=st.sampled_from([1, 2, 3]), stride=st.integers(1, 2),
    padding=st.integers(0, 1), seed=st.integers(0, 10_000),
)
def test_conv_matches_naive_loops(n, c, h, w, co, k, stride, padding, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c, h, w))
    wt = rng.normal(size=(co, c, k, k))
    b = rng.normal(size=co)
    out = F.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, padding).data
    np.testing.assert_allclose(out, naive_conv2d(x, wt, b, stride, padding), atol=1e-6)


# ------------------------------------------------------------- batchnorm


def _bn(x, gamma, beta, training=True, rm=None, rv=None, eps=1e-5):
    c = x.shape[1]
    rm = np.zeros(c) if rm is None else rm
    rv = np.ones(c) if rv is None else rv
    return F.batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, training, 0.1, eps)


def test_batchnorm_constant_channel_gives_beta():
    out = _bn(np.full((2, 2, 3, 3), 4.0), np.ones(2), np.array([0.5, -2.0]))
    np.testing.assert_allclose(out.data[:, 0], 0.5)
    np.testing.assert_allclose(out.data[:, 1], -2.0)


def test_batchnorm_plus_minus_one():
    x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(1, 1, 2, 2)
    out = _bn(x, np.ones(1), np.zeros(1), eps=1e-12)
    np.testing.assert_allclose(out.data, x, atol=1e-9)


def test_batchnorm_eval_identity():
    x = np.random.default_rng(2).normal(size=(2, 3, 4, 4))
    out = _bn(x, np.ones(3), np.zeros(3), training=False)
    np.testing.assert_allclose(out.data, x / math.sqrt(1 + 1e-5), rtol=1e-12)
    np.testing.assert_allclose(out.data, x, atol=1e-5 * np.abs(x).max())


def test_batchnorm_updates_running_stats():
    x = np.random.default_rng(3).normal(loc=2.0, size=(4, 1, 3, 3))
    rm, rv = np.zeros(1), np.ones(1)
    _bn(x, np.ones(1), np.zeros(1), rm=rm, rv=rv)
    np.testing.assert_allclose(rm, 0.1 * x.mean())
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(ddof=1))


def test_batchnorm_degenerate_batch():
    with pytest.raises(ContractError, match="degenerate"):
        _bn(np.zeros((1, 2, 1, 1)), np.ones(2), np.zeros(2))


# ----------------------------------------------------- elementwise & concat


def test_relu_sigmoid_concat():
    np.testing.assert_array_equal(F.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert F.sigmoid(Tensor([0.0])).data[0] == 0.5
    s = F.sigmoid(Tensor([-30.0, 30.0, -700.0, 700.0])).data
    assert np.all(np.isfinite(s))
    out = F.concat([Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 5, 4, 4)))], axis=1)
    assert out.shape == (1, 8, 4, 4)


def test_sigmoid_strictly_inside_unit_interval():
    s = F.sigmoid(Tensor(np.linspace(-30, 30, 101))).data
    assert np.all((s > 0) & (s < 1))


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        F.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        F.concat([Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 5, 4, 3)))], axis=1)


# --------------------------------------------------------------- bilinear


def test_bilinear_constant():
    out = F.bilinear_resize(Tensor(np.full((1, 2, 3, 5), 0.3)), 7, 4).data
    np.testing.assert_allclose(out, 0.3, rtol=1e-14)


def test_bilinear_single_pixel():
    out = F.bilinear_resize(Tensor(np.full((1, 1, 1, 1), 2.5)), 2, 2).data
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 2.5))


def test_bilinear_align_corners():
    x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
    out = F.bilinear_resize(Tensor(x), 4, 4).data[0, 0]
    # the input is the plane f(y, x) = x + 2y sampled at the corners
    t = np.arange(4) / 3
    expected = t[None, :] + 2 * t[:, None]
    np.testing.assert_allclose(out, expected, atol=1e-12)
    assert (out[0, 0], out[0, -1], out[-1, 0], out[-1, -1]) == (0.0, 1.0, 2.0, 3.0)


# --------------------------------------------------------------- backward


def test_backward_sum_of_squares():
    x = leaf([1.0, -2.0, 3.5])
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_matmul_sum_pattern():
    rng = np.random.default_rng(4)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    backward(F.matmul(a, b).sum())
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    rep = finite_difference_check(lambda: F.matmul(a, b).sum(), [a, b])
    assert rep.passed and rep.max_rel_error < 1e-8


def test_backward_disconnected_leaf_is_zero():
    x, y = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    backward((x * x).sum(), leaves=[x, y])
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_tape_is_topological_and_visits_once():
    x = leaf(np.ones((2, 2)))
    h = F.relu(x * 2.0)
    loss = (h + h * 3.0).sum()
    tape = ComputationTape.record(loss)
    seen = set()
    for out in tape.outputs:
        for inp in out._node.inputs:
            if inp._node is not None:
                assert id(inp) in seen
        assert id(out) not in seen
        seen.add(id(out))
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, 8.0)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert y._node is None and not y.requires_grad


def test_float32_stays_float32():
    x = Tensor(np.ones((1, 2, 4, 4), dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones((2, 2, 3, 3), dtype=np.float32), requires_grad=True)
    y = F.sigmoid(F.conv2d(x, w, padding=1) * 0.5)
    y = F.bilinear_resize(y, 8, 8)
    loss = F.binary_cross_entropy(y, np.zeros((1, 2, 8, 8), np.float32), reduction="mean")
    assert loss.dtype == np.float32
    backward(loss)
    assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32


# ------------------------------------------------------------ gradcheck


def test_gradcheck_quadratic_form():
    a = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = leaf([[0.3], [-1.2]])
    rep = finite_difference_check(lambda: F.matmul(F.transpose(x), F.matmul(Tensor(a), x)).sum(), [x])
    assert rep.passed and rep.max_rel_error < 1e-8


def test_gradcheck_detects_nondeterminism():
    x = leaf([1.0])
    counter = iter(range(100))

    def f():
        return (x * float(next(counter))).sum()

    with pytest.raises(NonDeterministicError):
        finite_difference_check(f, [x])


def test_gradcheck_rejects_bad_step():
    x = leaf([1.0])
    with pytest.raises(ContractError):
        finite_difference_check(lambda: (x * x).sum(), [x], step=0)


def _op_cases(rng):
    def probe(shape):
        return Tensor(rng.normal(size=shape))

    x4 = leaf(rng.normal(size=(2, 3, 5, 4)))
    w = leaf(rng.normal(size=(2, 3, 3, 3)))
    b = leaf(rng.normal(size=2))
    gamma, beta = leaf(rng.uniform(0.5, 1.5, 3)), leaf(rng.normal(size=3))
    a2, b2 = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    v = leaf(rng.normal(size=(2, 5)))
    y = leaf(rng.normal(size=(2, 5)))
    p_conv, p_bn, p_mm = probe((2, 2, 3, 2)), probe((2, 3, 5, 4)), probe((3, 2))
    p_rs, p_v, p_pool2 = probe((2, 3, 7, 3)), probe((2, 5)), probe((2, 3, 5, 1))
    rm, rv = np.zeros(3), np.ones(3)
    prob = leaf(rng.uniform(0.05, 0.95, size=(2, 5)))
    target = (rng.random((2, 5)) > 0.5).astype(float)
    return {
        "conv2d": (lambda: (F.conv2d(x4, w, b, 2, 1) * p_conv).sum(), [x4, w, b]),
        "batchnorm_train": (lambda: (F.batchnorm2d(x4, gamma, beta, rm, rv, True) * p_bn).sum(), [x4, gamma, beta]),
        "batchnorm_eval": (lambda: (F.batchnorm2d(x4, gamma, beta, rm, rv, False) * p_bn).sum(), [x4, gamma, beta]),
        "matmul": (lambda: (F.matmul(a2, b2) * p_mm).sum(), [a2, b2]),
        "softmax": (lambda: (F.softmax(v, axis=1) * p_v).sum(), [v]),
        "sigmoid": (lambda: (F.sigmoid(v) * p_v).sum(), [v]),
        "relu": (lambda: (F.relu(v) * p_v).sum(), [v]),
        "add_mul_sub": (lambda: ((v * y - y + v * 0.5 + 2.0) * p_v).sum(), [v, y]),
        "broadcast_mul": (lambda: (x4 * F.reshape(gamma, (1, 3, 1, 1)) * p_bn).sum(), [x4, gamma]),
        "concat": (lambda: (F.concat([v, y], axis=0) * Tensor(np.arange(20.0).reshape(4, 5))).sum(), [v, y]),
        "bilinear": (lambda: (F.bilinear_resize(x4, 7, 3) * p_rs).sum(), [x4]),
        "avg_pool": (lambda: (F.avg_pool2d(F.reshape(x4, (2, 3, 10, 2)), 2) * p_pool2).sum(), [x4]),
        "mean_transpose": (lambda: F.mean(F.transpose(x4, (3, 1, 0, 2)) * F.transpose(p_bn, (3, 1, 0, 2))), [x4]),
        "bce": (lambda: F.binary_cross_entropy(prob, target), [prob]),
    }


@pytest.mark.parametrize("name", list(_op_cases(np.random.default_rng(0))))
def test_every_op_passes_gradcheck(name):
    f, params = _op_cases(np.random.default_rng(11))[name]
    rep = finite_difference_check(f, params, step=1e-5, tolerance=1e-4)
    assert rep.passed, (name, rep.max_rel_error, rep.worst)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(3, 6), w=st.integers(3, 6), c=st.integers(1, 3))
def test_conv_bn_relu_chain_gradcheck_random_shapes(seed, h, w, c):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(2, c, h, w)))
    wt = leaf(rng.normal(size=(2, c, 3, 3)))
    gamma, beta = leaf(rng.uniform(0.5, 1.5, 2)), leaf(rng.normal(size=2))
    probe = Tensor(rng.normal(size=(2, 2, h, w)))
    rm, rv = np.zeros(2), np.ones(2)

    def f():
        y = F.batchnorm2d(F.conv2d(x, wt, padding=1), gamma, beta, rm, rv, True)
        return (F.sigmoid(y) * probe).sum()

    rep = finite_difference_check(f, [x, wt, gamma, beta])
    assert rep.passed, (rep.max_rel_error, rep.worst)


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 3, 9, 9)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    a = F.bilinear_resize(F.relu(F.conv2d(x, w, padding=1)), 5, 6).data
    b = F.bilinear_resize(F.relu(F.conv2d(x, w, padding=1)), 5, 6).data
    assert np.array_equal(a, b)


def test_record_branches_fingerprints_relu_signs():
    x = Tensor(np.array([-1.0, 2.0]))
    with F.record_branches() as a:
        F.relu(x)
    with F.record_branches() as b:
        F.relu(Tensor(np.array([-3.0, 0.5])))
    with F.record_branches() as c:
        F.relu(Tensor(np.array([1.0, 2.0])))
    assert len(a) == 1 and a == b and a != c
    F.relu(x)  # no recorder active: nothing is logged anywhere
    assert len(a) == 1


def _relu_loss(x):
    return lambda: (F.relu(x) * 3.0).sum()


def test_gradcheck_shrinks_step_near_a_kink():
    # 5e-6 is inside the default step but outside a 10x smaller one
    x = Tensor(np.array([5e-6, 1.0]), requires_grad=True)
    rep = finite_difference_check(_relu_loss(x), [x])
    assert rep.passed and rep.step_reduced == 1 and rep.kinks_skipped == []
    naive = finite_difference_check(_relu_loss(x), [x], kink_aware=False)
    assert not naive.passed


def test_gradcheck_takes_one_sided_difference_at_a_kink():
    # 1e-9 is within every step size; the upper side stays on the same piece
    x = Tensor(np.array([1e-9, 1.0]), requires_grad=True)
    rep = finite_difference_check(_relu_loss(x), {"x": x})
    assert rep.one_sided == 1 and rep.kinks_skipped == []
    assert rep.checked == 2 and rep.passed and rep.max_rel_error < 1e-8


def test_gradcheck_lists_coordinates_between_two_kinks():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    f = lambda: (F.relu(x + (-1e-9)) + F.relu(x + 1e-9)).sum()
    rep = finite_difference_check(f, {"x": x})
    assert rep.kinks_skipped == ["x[0]"]
    assert rep.checked == 1 and rep.passed


def test_gradcheck_floor_is_the_difference_resolution():
    # the slope is far below what one ulp of f over 2h can represent
    x = Tensor(np.array([0.5]), requires_grad=True)
    f = lambda: (x * 3e-11 + 5.0).sum()
    assert finite_difference_check(f, [x]).passed
    assert not finite_difference_check(f, [x], noise_ulps=0.0).passed
    # a small but resolvable slope with a backward rule 1% off still fails
    from pmtrans.tensor import make_result

    y = Tensor(np.array([0.5]), requires_grad=True)
    bad = lambda: make_result(y.data * 1e-6 + 5.0, (y,), "bad", lambda g: (g * 1.01e-6,)).sum()
    rep = finite_difference_check(bad, [y], step=1e-3)
    assert not rep.passed and rep.max_rel_error > 1e-3
