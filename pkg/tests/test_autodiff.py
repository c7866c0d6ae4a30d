"""Finite-difference checks for every primitive in the autodiff engine."""
import numpy as np
import pytest

from ecd import autodiff as ad
from ecd.gradcheck import numerical_grad, relative_error

RNG = np.random.default_rng(42)


def check_op(build, x_shape, step=1e-5, tol=1e-5):
    x0 = RNG.normal(size=x_shape)

    def scalar(x):
        return float(build(ad.Tensor(x, requires_grad=False)).data.sum())

    t = ad.Tensor(x0.copy(), requires_grad=True)
    out = build(t)
    out.backward(np.ones_like(out.data))
    numeric = numerical_grad(scalar, x0, step=step)
    assert relative_error(t.grad, numeric) < tol


def test_add_broadcast():
    b = ad.Tensor(RNG.normal(size=(1, 4)))
    check_op(lambda x: x + b, (3, 4))


def test_mul():
    b = ad.Tensor(RNG.normal(size=(3, 4)))
    check_op(lambda x: x * b, (3, 4))


def test_matmul_batched():
    b = ad.Tensor(RNG.normal(size=(2, 4, 5)))
    check_op(lambda x: x @ b, (2, 3, 4))


def test_matmul_grad_of_rhs():
    a = RNG.normal(size=(3, 4))

    def build(x):
        return ad.Tensor(a) @ x

    check_op(build, (4, 2))


def test_getitem_slice():
    check_op(lambda x: x[:, 1:3, 0:2] * 2.0, (2, 4, 4))


def test_reshape_transpose():
    check_op(lambda x: x.reshape(4, 6).transpose(1, 0) * 3.0, (2, 3, 4))


def test_sum_axis_and_mean():
    w = ad.Tensor(RNG.normal(size=(3, 5)))
    check_op(lambda x: x.sum(axis=1) * w, (3, 4, 5))
    check_op(lambda x: x.mean(), (6,))


def test_relu():
    # keep inputs away from the kink
    x0 = RNG.normal(size=(5, 5))
    x0[np.abs(x0) < 0.1] += 0.3
    t = ad.Tensor(x0, requires_grad=True)
    ad.relu(t).backward(np.ones((5, 5)))
    numeric = numerical_grad(lambda x: float(np.maximum(x, 0).sum()), x0, step=1e-6)
    assert relative_error(t.grad, numeric) < 1e-5


def test_sigmoid():
    check_op(lambda x: ad.sigmoid(x), (4, 3))


def test_softmax_lastaxis():
    w = ad.Tensor(RNG.normal(size=(3, 5)))
    check_op(lambda x: ad.softmax_lastaxis(x) * w, (3, 5))


def test_concat():
    b = ad.Tensor(RNG.normal(size=(2, 3)))
    check_op(lambda x: ad.concat([x, b], axis=0) * 2.0, (4, 3))


def test_conv2d_grads():
    kernel0 = RNG.normal(size=(3, 2, 3, 3))
    bias0 = RNG.normal(size=3)
    x0 = RNG.normal(size=(2, 5, 5))

    x = ad.Tensor(x0.copy(), requires_grad=True)
    k = ad.Tensor(kernel0.copy(), requires_grad=True)
    b = ad.Tensor(bias0.copy(), requires_grad=True)
    out = ad.conv2d(x, k, b, "same")
    out.backward(np.ones_like(out.data))

    def wrt_x(v):
        return float(ad.conv2d(ad.Tensor(v), ad.Tensor(kernel0), ad.Tensor(bias0), "same").data.sum())

    def wrt_k(v):
        return float(ad.conv2d(ad.Tensor(x0), ad.Tensor(v), ad.Tensor(bias0), "same").data.sum())

    def wrt_b(v):
        return float(ad.conv2d(ad.Tensor(x0), ad.Tensor(kernel0), ad.Tensor(v), "same").data.sum())

    assert relative_error(x.grad, numerical_grad(wrt_x, x0, 1e-5)) < 1e-5
    assert relative_error(k.grad, numerical_grad(wrt_k, kernel0, 1e-5)) < 1e-5
    assert relative_error(b.grad, numerical_grad(wrt_b, bias0, 1e-5)) < 1e-5


def test_upsample_bilinear_grad():
    w = ad.Tensor(RNG.normal(size=(2, 9, 9)))
    check_op(lambda x: ad.upsample_bilinear(x, 3) * w, (2, 3, 3))


def test_l2_normalize_grad():
    w = ad.Tensor(RNG.normal(size=(4, 3, 3)))
    check_op(lambda x: ad.l2_normalize_channels(x) * w, (4, 3, 3), step=1e-6)


def test_dropout_mask_is_scaled_and_deterministic():
    x = ad.Tensor(np.ones((100, 10)), requires_grad=True)
    rng1 = np.random.Generator(np.random.Philox(key=7))
    rng2 = np.random.Generator(np.random.Philox(key=7))
    out1 = ad.dropout(x, 0.3, rng1)
    out2 = ad.dropout(ad.Tensor(np.ones((100, 10))), 0.3, rng2)
    np.testing.assert_array_equal(out1.data, out2.data)
    kept = out1.data != 0
    np.testing.assert_allclose(out1.data[kept], 1.0 / 0.7)
    out1.backward(np.ones_like(out1.data))
    np.testing.assert_array_equal(x.grad != 0, kept)


def test_backward_requires_scalar_without_grad():
    t = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        (t * 2.0).backward()
