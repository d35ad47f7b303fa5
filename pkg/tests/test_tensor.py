import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gtasr import tensor as tt
from gtasr.tensor import Tensor, TapeError


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float32), requires_grad=True)


def test_add_and_mul_examples():
    np.testing.assert_array_equal(tt.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])
    np.testing.assert_array_equal(tt.mul(Tensor([2, 3]), Tensor(0.0)).data, [0, 0])


def test_square_backward():
    x = leaf([-2.0])
    tt.backward(tt.sum_(tt.square(x)))
    np.testing.assert_array_equal(x.grad, [-4.0])


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        tt.add(Tensor(np.ones(3)), Tensor(np.ones(2)))


def test_scalar_broadcast_gradient_is_summed():
    x = leaf([1.0, 2.0, 3.0])
    s = leaf(2.0)
    tt.backward(tt.sum_(tt.mul(x, s)))
    assert s.grad == pytest.approx(6.0)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


def test_sqrt_eps_finite_gradient_at_zero():
    x = leaf([0.0])
    tt.backward(tt.sum_(tt.sqrt_eps(x)))
    assert np.isfinite(x.grad).all()


def test_reductions():
    assert tt.sum_(Tensor([1, 2, 3])).item() == 6
    assert tt.l1_mean(Tensor([-1, 1])).item() == 1
    x = leaf(np.arange(4.0))
    tt.backward(tt.mean(x))
    np.testing.assert_array_equal(x.grad, [0.25] * 4)


def test_reduce_empty_rejected():
    with pytest.raises(ValueError):
        tt.sum_(Tensor(np.zeros(0)))


def test_stop_gradient_examples():
    assert tt.stop_gradient(Tensor([5.0])).data[0] == 5.0
    x = leaf([3.0])
    tt.backward(tt.sum_(tt.mul(tt.stop_gradient(x), x)))
    np.testing.assert_array_equal(x.grad, [3.0])
    y = leaf([3.0])
    tt.backward(tt.sum_(tt.stop_gradient(y)))
    assert y.grad is not None and not np.any(y.grad)


def test_backward_examples():
    x = leaf([1.0, 2.0])
    tt.backward(tt.sum_(tt.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    z = leaf([-2.0, 3.0])
    tt.backward(tt.mean(tt.abs_(z)))
    np.testing.assert_array_equal(z.grad, [-0.5, 0.5])


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        tt.backward(tt.mul(x, x))


def test_second_backward_is_an_error():
    x = leaf([1.0, 2.0])
    loss = tt.sum_(tt.square(x))
    tt.backward(loss)
    with pytest.raises(TapeError):
        tt.backward(loss)


def test_conv_identity_kernel():
    x = np.random.default_rng(0).random((2, 3, 5, 5)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), np.float32)
    w[[0, 1, 2], [0, 1, 2]] = 1
    np.testing.assert_array_equal(tt.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv_ones_kernel_on_constant():
    x = np.full((1, 1, 6, 6), 0.7, np.float32)
    out = tt.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3), np.float32))).data
    np.testing.assert_allclose(out, 9 * 0.7, rtol=1e-6)
    assert out.shape == (1, 1, 4, 4)


@pytest.mark.parametrize("h,stride,pad,expected", [(8, 1, 1, 8), (8, 2, 1, 4), (7, 2, 0, 3), (5, 1, 0, 3)])
def test_conv_output_size(h, stride, pad, expected):
    out = tt.conv2d(Tensor(np.zeros((1, 1, h, h))), Tensor(np.zeros((2, 1, 3, 3))), stride=stride, padding=pad)
    assert out.shape == (1, 2, expected, expected)


def test_conv_errors():
    with pytest.raises(ValueError):
        tt.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ValueError):
        tt.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 2, 7, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    out = tt.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros(out.shape)
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w)
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_conv_input_gradient_fd():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 1, 5, 5)))
    w = Tensor(rng.standard_normal((1, 1, 3, 3)))
    assert tt.finite_difference_check(lambda v: tt.sum_(tt.conv2d(v, w)), x) < 1e-3


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0), (1, 0)])
def test_conv_gradients_fd(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = Tensor(rng.standard_normal((2, 2, 8, 8)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    proj = Tensor(rng.standard_normal(tt.conv2d(x, w, stride, pad).shape))

    def f_x(v):
        return tt.sum_(tt.mul(tt.conv2d(v, w, stride, pad), proj))

    def f_w(v):
        return tt.sum_(tt.mul(tt.conv2d(x, v, stride, pad), proj))

    assert tt.finite_difference_check(f_x, x, max_coords=40) < 1e-3
    assert tt.finite_difference_check(f_w, w, max_coords=40) < 1e-3


def test_composite_gradient_fd():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((1, 1, 8, 8)))
    w = Tensor(rng.standard_normal((4, 1, 3, 3)))
    b = Tensor(rng.standard_normal(4))

    def f(v):
        h = tt.silu(tt.add_bias(tt.conv2d(v, w, 2, 1), b))
        h = tt.upsample_nearest(h, 2)
        return tt.mean(tt.sqrt_eps(tt.add(tt.square(h), 1e-6)))

    assert tt.finite_difference_check(f, x) < 1e-3


def test_fd_check_sum_is_exact():
    x = Tensor(np.random.default_rng(0).standard_normal(6))
    assert tt.finite_difference_check(tt.sum_, x) < 1e-6


def test_fd_check_charbonnier():
    x = Tensor(np.random.default_rng(2).standard_normal((2, 3)))

    def charb(v):
        return tt.mean(tt.sqrt_eps(tt.add(tt.square(v), 1e-6)))

    assert tt.finite_difference_check(charb, x) < 1e-3


def test_fd_check_restores_state():
    x = Tensor(np.arange(3.0))
    before = x.data.copy()
    tt.finite_difference_check(tt.sum_, x)
    np.testing.assert_array_equal(x.data, before)
    assert x.data.dtype == np.float32
    assert not x.requires_grad


def test_concat_and_reshape_gradients():
    a, b = leaf(np.ones((1, 1, 2, 2))), leaf(np.ones((1, 2, 2, 2)))
    c = tt.concat([a, b], axis=1)
    assert c.shape == (1, 3, 2, 2)
    weights = Tensor(np.arange(12.0).reshape(1, 3, 2, 2))
    tt.backward(tt.sum_(tt.mul(tt.reshape(c, (1, 3, 2, 2)), weights)))
    np.testing.assert_array_equal(a.grad, weights.data[:, :1])
    np.testing.assert_array_equal(b.grad, weights.data[:, 1:])


def test_float32_storage_and_determinism():
    x = Tensor(np.arange(4, dtype=np.float64))
    assert x.data.dtype == np.float32
    rng = np.random.default_rng(5)
    u = rng.standard_normal((1, 1, 6, 6))
    w = rng.standard_normal((2, 1, 3, 3))
    a = tt.conv2d(Tensor(u), Tensor(w), padding=1).data
    b = tt.conv2d(Tensor(u), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


small = hnp.arrays(np.float32, (1, 2, 5, 5), elements=st.floats(-2, 2, width=32))


@settings(max_examples=30, deadline=None)
@given(u=small, v=small, a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_conv_linearity(u, v, a, b):
    w = Tensor(np.random.default_rng(0).standard_normal((3, 2, 3, 3)))
    lhs = tt.conv2d(Tensor(a * u + b * v), w, padding=1).data
    rhs = a * tt.conv2d(Tensor(u), w, padding=1).data + b * tt.conv2d(Tensor(v), w, padding=1).data
    assert np.max(np.abs(lhs - rhs)) < 1e-5 * max(1.0, abs(a) + abs(b)) * 20


@settings(max_examples=25, deadline=None)
@given(data=hnp.arrays(np.float64, st.tuples(st.integers(1, 2), st.integers(1, 2), st.integers(3, 8), st.integers(3, 8)),
                       elements=st.floats(-2, 2)))
def test_stop_gradient_edge_is_bitwise_zero(data):
    x = Tensor(data, requires_grad=True)
    tt.backward(tt.sum_(tt.square(tt.stop_gradient(tt.silu(x)))))
    assert x.grad is not None and not np.any(x.grad)


@settings(max_examples=20, deadline=None)
@given(data=hnp.arrays(np.float64, (2, 2, 8, 8), elements=st.floats(-1, 1)))
def test_elementwise_gradients_randomized(data):
    x = Tensor(data)

    def f(v):
        return tt.mean(tt.mul(tt.silu(v), tt.sqrt_eps(tt.add(tt.square(v), 0.1))))

    assert tt.finite_difference_check(f, x, max_coords=16) < 1e-3
