import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madgnet import tensor as T
from madgnet.errors import ContractError, DimensionError
from madgnet.tensor import Tensor, no_grad

from oracles import bilinear_naive, check_op_grad, conv_naive


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- conv2d -----------------------------------------------------------------


def test_conv_box_sum_on_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), 1, 1, 1)
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 0] == out.data[0, 0, 2, 2] == 4.0


def test_conv_dilated_impulse_spreads_kernel():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    w = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(w), None, 1, 2, 2).data[0, 0]
    # cross-correlation of an impulse: reflected kernel on the stride-2 taps
    expect = np.zeros((5, 5))
    expect[0::2, 0::2] = w[0, 0, ::-1, ::-1]
    np.testing.assert_array_equal(out, expect)
    np.testing.assert_array_equal(out, conv_naive(x, w, None, 1, 2, 2)[0, 0])


@pytest.mark.parametrize("stride,pad,dil,k", [(1, 1, 1, 3), (2, 1, 1, 3), (1, 2, 2, 3), (1, 0, 1, 1), (2, 3, 3, 3), (1, 2, 1, 5)])
def test_conv_matches_nested_loops(rng, stride, pad, dil, k):
    x = rng.standard_normal((2, 4, 8, 8))
    w = rng.standard_normal((3, 4, k, k))
    b = rng.standard_normal(3)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, dil).data
    np.testing.assert_allclose(got, conv_naive(x, w, b, stride, pad, dil), rtol=0, atol=1e-12)


def test_conv_largest_oracle_size(rng):
    x = rng.standard_normal((2, 8, 16, 16))
    w = rng.standard_normal((2, 8, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w), None, 1, 1, 1).data
    np.testing.assert_allclose(got, conv_naive(x, w, None, 1, 1, 1), rtol=0, atol=1e-12)


def test_conv_output_size_formula():
    assert T.conv_output_size(17, 3, 2, 1, 1) == 9
    assert T.conv_output_size(8, 3, 1, 2, 2) == 8


def test_conv_channel_mismatch_names_axis(rng):
    with pytest.raises(DimensionError, match="C"):
        T.conv2d(Tensor(rng.random((1, 3, 4, 4))), Tensor(rng.random((1, 2, 3, 3))), None, 1, 1, 1)


def test_conv_even_kernel_rejected(rng):
    with pytest.raises((DimensionError, ContractError)):
        T.conv2d(Tensor(rng.random((1, 1, 4, 4))), Tensor(rng.random((1, 1, 2, 2))), None, 1, 0, 1)


@pytest.mark.parametrize("stride,pad,dil", [(1, 1, 1), (2, 1, 1), (1, 2, 2)])
def test_conv_gradients(rng, stride, pad, dil):
    err = check_op_grad(lambda x, w, b: T.conv2d(x, w, b, stride, pad, dil),
                        [(2, 3, 6, 6), (2, 3, 3, 3), (2,)], rng)
    assert err < 1e-6


# --- pooling ----------------------------------------------------------------


def test_global_pool_small_examples():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert T.global_pool(x, "avg").item() == 2.5
    assert T.global_pool(x, "max").item() == 4.0
    assert T.global_pool(x, "min").item() == 1.0
    c = Tensor(np.full((1, 1, 3, 3), 3.2))
    assert {T.global_pool(c, s).item() for s in ("avg", "max", "min")} == {3.2}


def test_global_pool_matches_brute_force(rng):
    x = rng.standard_normal((1, 4, 8, 8))
    for stat, fn in (("max", max), ("min", min)):
        got = T.global_pool(Tensor(x), stat).data[0, :, 0, 0]
        for c in range(4):
            assert got[c] == fn(x[0, c].ravel().tolist())
    got = T.global_pool(Tensor(x), "avg").data[0, :, 0, 0]
    np.testing.assert_allclose(got, [sum(x[0, c].ravel().tolist()) / 64 for c in range(4)], rtol=0, atol=1e-15)


def test_max_pool_gradient_goes_to_first_maximum():
    x = Tensor(np.array([[[[5.0, 1.0], [5.0, 5.0]]]]), requires_grad=True)
    T.backward(T.sum_all(T.global_pool(x, "max")))
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])
    y = Tensor(np.array([[[[2.0, 0.0], [1.0, 0.0]]]]), requires_grad=True)
    T.backward(T.sum_all(T.global_pool(y, "min")))
    np.testing.assert_array_equal(y.grad[0, 0], [[0.0, 1.0], [0.0, 0.0]])


def test_global_pool_empty_raises():
    with pytest.raises(DimensionError):
        T.global_pool(Tensor(np.zeros((1, 1, 0, 3))), "avg")


@pytest.mark.parametrize("stat", ["avg", "max", "min"])
def test_global_pool_gradients(rng, stat):
    assert check_op_grad(lambda x: T.global_pool(x, stat), [(2, 3, 4, 5)], rng) < 1e-6


# --- resampling -------------------------------------------------------------


def test_bilinear_half_pixel_example():
    out = T.resample_bilinear(Tensor(np.array([[[[0.0, 1.0]]]])), size=(1, 4)).data
    np.testing.assert_array_equal(out[0, 0, 0], [0.0, 0.25, 0.75, 1.0])


def test_bilinear_preserves_constants_exactly():
    c = Tensor(np.full((1, 2, 4, 4), 7.0))
    up = T.resample_bilinear(c, 4)
    assert np.all(up.data == 7.0)
    down_up = T.resample_bilinear(T.resample_bilinear(Tensor(np.full((1, 1, 8, 8), 0.1)), 0.5), 2)
    assert np.all(down_up.data == 0.1)


@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 12), st.integers(1, 12),
       st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False))
@settings(max_examples=60, deadline=None)
def test_bilinear_constants_any_size(h, w, th, tw, v):
    out = T.resample_bilinear(Tensor(np.full((1, 1, h, w), v)), size=(th, tw)).data
    assert np.all(out == v)


def test_bilinear_matches_pixel_oracle(rng):
    x = rng.standard_normal((2, 3, 5, 7))
    for size in ((10, 14), (3, 4), (8, 3), (5, 7 * 3)):
        got = T.resample_bilinear(Tensor(x), size=size).data
        np.testing.assert_allclose(got, bilinear_naive(x, *size), rtol=0, atol=1e-13)


def test_bilinear_half_is_two_by_two_mean(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    got = T.resample_bilinear(Tensor(x), 0.5).data
    ref = x.reshape(1, 2, 4, 2, 4, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(got, ref, atol=1e-15)


def test_resample_bad_size():
    with pytest.raises(DimensionError):
        T.resample_bilinear(Tensor(np.zeros((1, 1, 2, 2))), size=(0, 2))
    with pytest.raises(DimensionError):
        T.resample_bilinear(Tensor(np.zeros((1, 1, 2, 2))), -1.0)


@pytest.mark.parametrize("size", [(8, 12), (3, 2), (5, 9)])
def test_resample_gradients(rng, size):
    assert check_op_grad(lambda x: T.resample_bilinear(x, size=size), [(1, 2, 4, 6)], rng) < 1e-6
    assert check_op_grad(lambda x: T.resample_nearest(x, size=size), [(1, 2, 4, 6)], rng) < 1e-6


def test_nearest_integer_upsample_repeats():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    out = T.resample_nearest(Tensor(x), 2).data[0, 0]
    np.testing.assert_array_equal(out, np.kron(x[0, 0], np.ones((2, 2))))


# --- linear and elementwise -------------------------------------------------


def test_linear_examples(rng):
    x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1))
    assert np.all(T.linear(x, Tensor(np.ones((2, 3)))).data == 6.0)
    np.testing.assert_array_equal(T.linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x.data)
    xs = rng.standard_normal((4, 5, 1, 1))
    w = rng.standard_normal((3, 5))
    b = rng.standard_normal(3)
    got = T.linear(Tensor(xs), Tensor(w), Tensor(b)).data[:, :, 0, 0]
    ref = [[sum(w[o, i] * xs[n, i, 0, 0] for i in range(5)) + b[o] for o in range(3)] for n in range(4)]
    np.testing.assert_allclose(got, ref, atol=1e-12)
    with pytest.raises(DimensionError):
        T.linear(Tensor(xs), Tensor(rng.standard_normal((3, 4))))


def test_linear_gradients(rng):
    assert check_op_grad(lambda x, w, b: T.linear(x, w, b), [(3, 4, 1, 1), (2, 4), (2,)], rng) < 1e-6


def test_elementwise_values():
    assert T.sigmoid(Tensor(np.zeros((1, 1, 1, 1)))).item() == 0.5
    r = T.relu(Tensor(np.array([-3.0, 3.0]).reshape(1, 1, 1, 2))).data.ravel()
    np.testing.assert_array_equal(r, [0.0, 3.0])
    x = Tensor(np.ones((1, 2, 2, 2)))
    m = Tensor(np.array([0.0, 1.0]).reshape(1, 2, 1, 1))
    out = T.mul_channelwise(x, m).data
    assert np.all(out[0, 0] == 0) and np.all(out[0, 1] == 1)


def test_sigmoid_is_stable_at_extremes():
    z = np.array([-1000.0, -40.0, 0.0, 40.0, 1000.0])
    s = T.sigmoid_array(z)
    assert np.all(np.isfinite(s))
    assert s[0] == 0.0 and s[-1] == 1.0 and s[2] == 0.5


def test_binary_shape_mismatch_names_axes():
    with pytest.raises(DimensionError, match="H"):
        T.add(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2))))


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_gradients(rng, op):
    fn = getattr(T, op)
    if op == "div":
        build = lambda a, b: fn(a, T.affine(T.square(b), 1.0, 0.5))
    else:
        build = fn
    assert check_op_grad(build, [(2, 2, 3, 3), (2, 2, 3, 3)], rng) < 1e-6


@pytest.mark.parametrize("name", ["sigmoid", "relu", "softplus", "square"])
def test_unary_gradients(rng, name):
    assert check_op_grad(getattr(T, name), [(2, 2, 3, 3)], rng) < 1e-6


def test_structured_product_gradients(rng):
    assert check_op_grad(T.mul_channelwise, [(2, 3, 4, 4), (2, 3, 1, 1)], rng) < 1e-6
    assert check_op_grad(T.mul_spatial, [(2, 3, 4, 4), (2, 1, 4, 4)], rng) < 1e-6
    assert check_op_grad(T.scale, [(2, 3, 4, 4), (1, 1, 1, 1)], rng) < 1e-6
    assert check_op_grad(lambda x: T.affine(x, -2.0, 0.5), [(1, 2, 3, 3)], rng) < 1e-6


def test_reductions_and_projection_gradients(rng):
    assert check_op_grad(T.sum_per_sample, [(3, 2, 4, 4)], rng) < 1e-6
    assert check_op_grad(T.mean_all, [(3, 2, 4, 4)], rng) < 1e-6
    basis = rng.standard_normal((5, 4, 4))
    assert check_op_grad(lambda x: T.spatial_project(x, basis), [(2, 3, 4, 4)], rng) < 1e-6


# --- concat / slice ---------------------------------------------------------


def test_concat_shapes_and_roundtrip(rng):
    a, b = Tensor(rng.random((1, 2, 4, 4))), Tensor(rng.random((1, 3, 4, 4)))
    assert T.concat_channels(a, b).shape == (1, 5, 4, 4)
    x = Tensor(rng.random((1, 2, 4, 4)))
    back = T.slice_channels(T.concat_channels(x, Tensor(np.zeros((1, 2, 4, 4)))), 0, 2)
    np.testing.assert_array_equal(back.data, x.data)
    with pytest.raises(DimensionError):
        T.concat_channels(a, Tensor(np.zeros((1, 1, 3, 4))))


def test_concat_gradient(rng):
    assert check_op_grad(T.concat_channels, [(2, 2, 3, 3), (2, 1, 3, 3)], rng) < 1e-6
    assert check_op_grad(lambda x: T.slice_channels(x, 1, 3), [(1, 4, 2, 2)], rng) < 1e-6


# --- backward semantics -----------------------------------------------------


def test_backward_simple_cases(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    T.backward(T.sum_all(x))
    assert np.all(x.grad == 1.0)
    z = Tensor(np.zeros((1, 2, 3, 3)), requires_grad=True)
    T.backward(T.sum_all(T.sigmoid(z)))
    assert np.all(z.grad == 0.25)


def test_backward_accumulates_and_requires_scalar(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
    T.backward(T.sum_all(x))
    T.backward(T.sum_all(x))
    assert np.all(x.grad == 2.0)
    with pytest.raises(ContractError):
        T.backward(T.relu(x))


def test_backward_linearity(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    l1 = lambda: T.sum_all(T.square(T.sigmoid(x)))
    l2 = lambda: T.sum_all(T.softplus(x))
    T.backward(l1())
    g1 = x.grad.copy()
    x.zero_grad()
    T.backward(l2())
    g2 = x.grad.copy()
    x.zero_grad()
    T.backward(T.add(T.scale(l1(), 0.3), T.scale(l2(), -1.7)))
    np.testing.assert_allclose(x.grad, 0.3 * g1 - 1.7 * g2, rtol=0, atol=1e-12)


def test_shared_subexpression_gradient(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
    y = T.sigmoid(x)
    T.backward(T.sum_all(T.mul(y, y)))
    s = T.sigmoid_array(x.data)
    np.testing.assert_allclose(x.grad, 2 * s * s * (1 - s), atol=1e-15)


def test_tape_is_topological(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
    y = T.add(T.relu(x), T.sigmoid(x))
    loss = T.sum_all(T.mul(y, x))
    tape = T.Tape.from_output(loss)
    pos = {id(t): i for i, t in enumerate(tape)}
    for t in tape:
        if t.tape_node is not None:
            for inp in t.tape_node.inputs:
                if id(inp) in pos:
                    assert pos[id(inp)] < pos[id(t)]


def test_no_grad_records_nothing(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
    with no_grad():
        y = T.sigmoid(x)
    assert y.tape_node is None and not y.requires_grad


def test_finite_outputs_on_finite_inputs(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)) * 1e3)
    for op in (T.sigmoid, T.softplus, T.relu):
        assert np.all(np.isfinite(op(x).data))
