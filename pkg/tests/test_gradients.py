"""Analytic gradients vs central finite differences (float64, eps 1e-4).

Every backward rule in the op suite is checked against the independent
numeric oracle at relative tolerance 1e-3, plus the conv/conv-transpose
adjointness identity and bitwise replay determinism.
"""

import numpy as np
import pytest

from oracles import FD_EPS, assert_close, numeric_gradient

from xnet import tensor as T
from xnet.tensor import Tape, Tensor, backward

RTOL = 1e-3


def _proj(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def check_op(op, arrays, n_diff, seed=0):
    """Compare engine gradients of sum(op(*inputs) * proj) with finite differences.

    `arrays` are float64 inputs; the first `n_diff` of them are differentiated.
    `op` maps Tensors to a Tensor.
    """
    out_probe = op(*[Tensor(a) for a in arrays])
    proj = _proj(out_probe.data.shape, seed + 99)

    tensors = [Tensor(a, grad_enabled=(i < n_diff)) for i, a in enumerate(arrays)]
    with Tape() as tp:
        out = op(*tensors)
        loss = T.sum_all(T.mul(out, Tensor(proj)))
    backward(loss, tp)

    def f():
        val = op(*[Tensor(a) for a in arrays]).data
        return float(np.sum(val * proj))

    numeric = numeric_gradient(f, arrays[:n_diff], eps=FD_EPS)
    for i in range(n_diff):
        assert tensors[i].grad is not None, f"input {i} received no gradient"
        assert_close(tensors[i].grad, numeric[i], RTOL, label=f"input {i}")


def rnd(*shape, seed=0, lo_clip=None):
    arr = np.random.default_rng(seed).normal(size=shape)
    if lo_clip is not None:
        # push values away from the kink at 0 so finite differences are valid
        arr = np.where(np.abs(arr) < lo_clip, lo_clip * np.sign(arr) + (arr == 0) * lo_clip, arr)
    return arr


def test_grad_add_sub_mul_scale():
    a, b = rnd(3, 4, seed=1), rnd(3, 4, seed=2)
    check_op(T.add, [a.copy(), b.copy()], 2, seed=1)
    check_op(T.sub, [a.copy(), b.copy()], 2, seed=2)
    check_op(T.mul, [a.copy(), b.copy()], 2, seed=3)
    check_op(lambda x: T.scale(x, -1.7), [a.copy()], 1, seed=4)


def test_grad_add_channel_bias():
    x = rnd(2, 3, 4, 4, seed=5)
    b = rnd(3, seed=6)
    check_op(T.add_channel_bias, [x, b], 2, seed=5)


def test_grad_relu_leaky_tanh():
    x = rnd(2, 3, 5, 5, seed=7, lo_clip=0.05)
    check_op(T.relu, [x.copy()], 1, seed=7)
    check_op(lambda v: T.leaky_relu(v, 0.2), [x.copy()], 1, seed=8)
    check_op(T.tanh, [x.copy()], 1, seed=9)


def test_grad_pad_reflect():
    x = rnd(2, 2, 5, 4, seed=10)
    check_op(lambda v: T.pad_reflect(v, 2), [x], 1, seed=10)


def test_grad_l1_mean():
    # keep |a-b| away from 0 so sign() is stable under the probe
    a = rnd(4, 5, seed=11)
    b = a + np.where(rnd(4, 5, seed=12) > 0, 0.5, -0.5)
    check_op(T.l1_mean, [a, b], 2, seed=11)


def test_grad_sq_mean_and_sum():
    x = rnd(3, 6, seed=13)
    check_op(lambda v: T.sq_mean(v, 0.3), [x.copy()], 1, seed=13)
    check_op(T.sum_all, [x.copy()], 1, seed=14)


def test_grad_conv2d_input_and_kernel():
    x = rnd(1, 2, 5, 5, seed=15)
    k = rnd(3, 2, 3, 3, seed=16)
    check_op(lambda a, b: T.conv2d(a, b, stride=1, padding=1), [x, k], 2, seed=15)


def test_grad_conv2d_strided():
    x = rnd(2, 3, 8, 8, seed=17)
    k = rnd(4, 3, 4, 4, seed=18)
    check_op(lambda a, b: T.conv2d(a, b, stride=2, padding=1), [x, k], 2, seed=17)


def test_grad_conv2d_transpose():
    x = rnd(1, 3, 4, 4, seed=19)
    k = rnd(3, 2, 3, 3, seed=20)
    check_op(
        lambda a, b: T.conv2d_transpose(a, b, stride=2, padding=1, output_padding=1),
        [x, k],
        2,
        seed=19,
    )


def test_grad_instance_norm():
    x = rnd(2, 3, 4, 4, seed=21)
    gain = rnd(3, seed=22)
    bias = rnd(3, seed=23)
    check_op(lambda a, g, b: T.instance_norm(a, g, b, eps=1e-5), [x, gain, bias], 3, seed=21)


def test_grad_composite_chain():
    # a short generator-flavoured chain: pad -> conv -> norm -> relu -> conv -> tanh -> l1
    x = rnd(1, 2, 6, 6, seed=24)
    k1 = rnd(3, 2, 3, 3, seed=25)
    g1 = np.abs(rnd(3, seed=26)) + 0.5
    b1 = rnd(3, seed=27)
    k2 = rnd(2, 3, 3, 3, seed=28)
    target = rnd(1, 2, 6, 6, seed=29)

    def net(xv, k1v, g1v, b1v, k2v):
        h = T.conv2d(T.pad_reflect(xv, 1), k1v)
        h = T.relu(T.instance_norm(h, g1v, b1v, eps=1e-5))
        h = T.tanh(T.conv2d(T.pad_reflect(h, 1), k2v))
        return h

    tensors = [Tensor(a, grad_enabled=True) for a in (x, k1, g1, b1, k2)]
    with Tape() as tp:
        out = net(*tensors)
        loss = T.l1_mean(out, Tensor(target))
    backward(loss, tp)

    def f():
        return float(T.l1_mean(net(*[Tensor(a) for a in (x, k1, g1, b1, k2)]), Tensor(target)).item())

    numeric = numeric_gradient(f, [x, k1, g1, b1, k2], eps=FD_EPS)
    for got, want, name in zip(tensors, numeric, ["x", "k1", "g1", "b1", "k2"]):
        assert_close(got.grad, want, 2e-3, label=name)


@pytest.mark.parametrize("stride,pad,outpad", [(1, 0, 0), (1, 1, 0), (2, 1, 1), (2, 0, 1), (2, 1, 0)])
def test_conv_adjointness_identity(stride, pad, outpad):
    # <conv(x, k), y> == <x, conv_transpose(y, k)> with the shared kernel
    rng = np.random.default_rng(hash((stride, pad, outpad)) % (2**32))
    x = rng.normal(size=(2, 3, 8, 8))
    k = rng.normal(size=(4, 3, 3, 3))
    cx = T.conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad)
    y = rng.normal(size=cx.data.shape)
    # pick output_padding so the adjoint lands back on x's shape
    back = T.conv2d_transpose(Tensor(y), Tensor(k), stride=stride, padding=pad, output_padding=outpad)
    if back.data.shape != x.shape:
        pytest.skip("geometry does not invert for this combo")
    lhs = float(np.sum(cx.data * y))
    rhs = float(np.sum(x * back.data))
    assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


def test_conv_backward_input_equals_transpose_of_grad():
    # the documented identity: d/dx conv2d = conv2d_transpose of the upstream grad
    rng = np.random.default_rng(42)
    x = rng.normal(size=(1, 2, 6, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    xt = Tensor(x, grad_enabled=True)
    with Tape() as tp:
        out = T.conv2d(xt, Tensor(k), stride=2, padding=1)
        g = rng.normal(size=out.data.shape)
        loss = T.sum_all(T.mul(out, Tensor(g)))
    backward(loss, tp)
    via_transpose = T.conv2d_transpose(Tensor(g), Tensor(k), stride=2, padding=1, output_padding=1)
    assert via_transpose.data.shape == x.shape
    assert_close(xt.grad, via_transpose.data, 1e-6, label="dx")


def test_gradient_replay_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(123)
        x = Tensor(rng.normal(size=(1, 2, 8, 8)).astype(np.float32), grad_enabled=True)
        k = Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32), grad_enabled=True)
        gain = Tensor(np.ones(3, dtype=np.float32), grad_enabled=True)
        bias = Tensor(np.zeros(3, dtype=np.float32), grad_enabled=True)
        with Tape() as tp:
            h = T.conv2d(x, k, stride=2, padding=1)
            h = T.relu(T.instance_norm(h, gain, bias))
            loss = T.sq_mean(h, 0.25)
        backward(loss, tp)
        return [a.grad.copy() for a in (x, k, gain, bias)]

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)
