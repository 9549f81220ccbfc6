"""Adam update rule against hand-computed steps and a convergence probe."""

import numpy as np
import pytest

from xnet import tensor as T
from xnet.optim import MissingGradientError, Parameter, adam_step, set_trainable, zero_grads
from xnet.tensor import Tape, Tensor, backward


def test_single_step_closed_form():
    # g = 1 everywhere, first step: mhat = 1, vhat = 1, delta = -lr / (1 + eps)
    p = Parameter(Tensor(np.zeros(4, dtype=np.float64)), name="w")
    p.value.grad = np.ones(4)
    adam_step([p], lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    assert np.allclose(p.value.data, -0.1, atol=1e-8)
    assert p.step_count == 1
    assert p.value.grad is None  # cleared by the step


def test_two_steps_closed_form():
    # second step with constant gradient g: m = 1-b1^2 scaled, still mhat = g
    lr, b1, b2, eps = 0.05, 0.5, 0.9, 0.0
    p = Parameter(Tensor(np.array([1.0])), name="w")
    theta = 1.0
    m = v = 0.0
    for _ in range(2):
        g = 2.0
        p.value.grad = np.array([g], dtype=np.float32)
        adam_step([p], lr=lr, beta1=b1, beta2=b2, eps=eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        t = p.step_count
        theta -= lr * (m / (1 - b1**t)) / np.sqrt(v / (1 - b2**t))
    assert p.value.data[0] == pytest.approx(theta, rel=1e-6)


def test_zero_gradient_leaves_value_but_counts_step():
    p = Parameter(Tensor(np.array([3.0, -2.0])), name="w")
    zero_grads([p])
    adam_step([p], lr=0.1)
    assert np.array_equal(p.value.data, np.array([3.0, -2.0], dtype=np.float32))
    assert p.step_count == 1


def test_missing_gradient_names_parameter():
    p = Parameter(Tensor(np.zeros(2)), name="enc.conv0.kernel")
    with pytest.raises(MissingGradientError, match="enc.conv0.kernel"):
        adam_step([p], lr=0.1)


def test_moments_match_value_shape():
    p = Parameter(Tensor(np.zeros((3, 2, 4, 4))))
    assert p.first_moment.shape == p.value.shape
    assert p.second_moment.shape == p.value.shape
    assert not p.first_moment.any() and not p.second_moment.any()


def test_quadratic_converges():
    # minimize (w - 3)^2 elementwise; a few hundred Adam steps should land close
    p = Parameter(Tensor(np.zeros(5, dtype=np.float64)), name="w")
    for _ in range(400):
        zero_grads([p])
        with Tape() as tp:
            loss = T.sq_mean(p.value, 3.0)
        backward(loss, tp)
        adam_step([p], lr=0.05, beta1=0.5, beta2=0.999)
    assert np.allclose(p.value.data, 3.0, atol=1e-2)


def test_set_trainable_blocks_gradients():
    p = Parameter(Tensor(np.ones(3)), name="w")
    set_trainable([p], False)
    with Tape() as tp:
        loss = T.sq_mean(p.value, 0.0)
    backward(loss, tp)
    assert p.value.grad is None
    set_trainable([p], True)
    assert p.value.grad_enabled
