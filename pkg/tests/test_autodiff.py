"""Finite-difference validation of every autodiff primitive."""

import numpy as np
import pytest

from maskgram import autodiff as ad
from maskgram.autodiff import Tensor


def numeric_grad(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar-valued fn at x."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn(x)
        flat[i] = orig - eps
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def check_op(build, shape, seed=0, eps=1e-6, tol=1e-7):
    """build(tensor) -> Tensor output; compares backward vs finite differences."""
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.0, shape)
    t = Tensor(x.copy(), requires_grad=True)
    out = build(t)
    w = np.asarray(np.random.default_rng(seed + 1).normal(size=out.data.shape))
    loss = ad.tsum(out * w)
    loss.backward()

    def scalar(arr):
        with ad.no_grad():
            return float((build(Tensor(arr)).data * w).sum())

    fd = numeric_grad(scalar, x.copy(), eps)
    np.testing.assert_allclose(t.grad, fd, rtol=tol, atol=tol)


@pytest.mark.parametrize("shape", [(3,), (2, 4), (2, 3, 4)])
def test_elementwise_ops(shape):
    rng = np.random.default_rng(7)
    other = rng.normal(size=shape) + 3.0
    check_op(lambda t: t + Tensor(other), shape)
    check_op(lambda t: t * Tensor(other), shape)
    check_op(lambda t: t - Tensor(other), shape)
    check_op(lambda t: t / Tensor(other), shape)
    check_op(lambda t: ad.exp(t), shape)
    check_op(lambda t: ad.tanh(t), shape)
    check_op(lambda t: ad.gelu(t), shape)
    check_op(lambda t: ad.sqrt(t * t + 1.0), shape)
    check_op(lambda t: ad.log(t * t + 0.5), shape)
    check_op(lambda t: ad.pow_const(t, 3.0), shape)


def test_broadcast_grads():
    check_op(lambda t: t + Tensor(np.ones((5, 1, 3))), (3,))
    check_op(lambda t: t * Tensor(np.full((4, 2, 3), 2.0)), (2, 3))
    check_op(lambda t: ad.broadcast_to(t, (6, 2, 3)), (2, 3))


def test_matmul_grads():
    rng = np.random.default_rng(1)
    b = Tensor(rng.normal(size=(4, 5)))
    lhs = Tensor(rng.normal(size=(6, 3)))
    check_op(lambda t: ad.matmul(t, b), (3, 4))
    check_op(lambda t: ad.matmul(lhs, t), (3, 4))
    # batched against unbatched weight
    check_op(lambda t: ad.matmul(t, b), (2, 3, 4))
    # fully batched
    b3 = Tensor(rng.normal(size=(2, 4, 5)))
    check_op(lambda t: ad.matmul(t, b3), (2, 3, 4))


def test_matmul_rejects_vectors():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_reductions_and_shapes():
    check_op(lambda t: ad.tsum(t, axis=1), (3, 4))
    check_op(lambda t: ad.tsum(t, axis=(0, 2), keepdims=True), (2, 3, 4))
    check_op(lambda t: ad.tmean(t, axis=-1), (3, 4))
    check_op(lambda t: ad.tmean(t), (2, 3))
    check_op(lambda t: ad.reshape(t, (6, 2)), (3, 4))
    check_op(lambda t: ad.transpose(t, (2, 0, 1)), (2, 3, 4))
    check_op(lambda t: ad.swapaxes(t, 0, 1), (3, 4))
    check_op(lambda t: t[1:, ::2], (4, 6))
    check_op(lambda t: t[:, 0, :], (2, 3, 4))


def test_concat_grads():
    rng = np.random.default_rng(2)
    other = Tensor(rng.normal(size=(3, 2)))
    check_op(lambda t: ad.concat([t, other], axis=1), (3, 4))
    check_op(lambda t: ad.concat([other, t, other], axis=-1), (3, 2))


def test_softmax_and_log_softmax_grads():
    check_op(lambda t: ad.softmax(t, axis=-1), (3, 5))
    check_op(lambda t: ad.log_softmax(t, axis=-1), (3, 5))
    check_op(lambda t: ad.softmax(t, axis=1), (2, 4, 3))


def test_layer_norm_grads():
    rng = np.random.default_rng(3)
    g = Tensor(rng.normal(size=(6,)) + 1.0, requires_grad=True)
    b = Tensor(rng.normal(size=(6,)), requires_grad=True)
    check_op(lambda t: ad.layer_norm(t), (4, 6), tol=1e-6)
    check_op(lambda t: ad.layer_norm(t, g, b), (4, 6), tol=1e-6)

    # affine parameter grads
    g.grad = None
    b.grad = None
    x = rng.normal(size=(5, 6))
    out = ad.layer_norm(Tensor(x), g, b)
    w = rng.normal(size=out.data.shape)
    ad.tsum(out * w).backward()

    def loss_for(gamma):
        with ad.no_grad():
            return float((ad.layer_norm(Tensor(x), Tensor(gamma), Tensor(b.data)).data * w).sum())

    fd = numeric_grad(loss_for, g.data.copy())
    np.testing.assert_allclose(g.grad, fd, rtol=1e-6, atol=1e-7)


def test_gather_ops():
    rng = np.random.default_rng(4)
    idx = rng.integers(0, 5, size=(3, 4))
    check_op(lambda t: ad.embedding(t, idx), (5, 6))
    sel = np.array([0, 2, 2, 1])
    check_op(lambda t: ad.index_select(t, 1, sel), (2, 3, 4))
    pick = rng.integers(0, 4, size=(2, 3))
    check_op(lambda t: ad.take_along_last(t, pick), (2, 3, 4))


def test_where_grads():
    rng = np.random.default_rng(5)
    cond = rng.random((3, 4)) < 0.5
    other = Tensor(rng.normal(size=(3, 4)))
    check_op(lambda t: ad.where(cond, t, other), (3, 4))
    check_op(lambda t: ad.where(cond[:, :1], other, t), (3, 4))


def test_l2_normalize_grad():
    check_op(lambda t: ad.l2_normalize(t), (4, 5))


def test_no_grad_suppresses_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert y._parents == ()


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_grad_accumulates_across_uses():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.tsum(x * x + x * 3.0)
    y.backward()
    np.testing.assert_allclose(x.grad, 2.0 * x.data + 3.0)
