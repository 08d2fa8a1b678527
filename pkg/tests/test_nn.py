import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvwfed.errors import InputError, NumericError
from dvwfed.nn import Architecture, Batch, ModelParams, forward, init_params, loss_and_grad, sgd_step


def central_difference_grad(params, batch, h=1e-6):
    """Independent oracle: perturb each coordinate and difference the loss."""
    base = params.values
    grad = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[i] += h
        minus[i] -= h
        lp, _ = loss_and_grad(ModelParams(plus, params.arch), batch)
        lm, _ = loss_and_grad(ModelParams(minus, params.arch), batch)
        grad[i] = (lp - lm) / (2 * h)
    return grad


def max_relative_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def random_case(seed, arch):
    rng = np.random.default_rng(seed)
    params = ModelParams(rng.normal(0, 0.5, arch.num_params), arch)
    batch = Batch(rng.normal(size=(5, arch.input_dim)), rng.integers(0, arch.num_classes, 5))
    return params, batch


@pytest.mark.parametrize(
    "arch, expected",
    [(Architecture(4, (), 3), 15), (Architecture(2, (5,), 3), 33)],
)
def test_parameter_count(arch, expected):
    assert arch.num_params == expected
    assert len(init_params(arch, 7)) == expected


def test_init_is_deterministic_with_zero_biases():
    arch = Architecture(4, (), 3)
    a, b = init_params(arch, 7), init_params(arch, 7)
    assert a.same_as(b)
    (_, bias), = a.layers()
    assert np.all(bias == 0)
    assert not init_params(arch, 8).same_as(a)


def test_params_are_immutable():
    p = init_params(Architecture(3, (), 2), 0)
    with pytest.raises(ValueError):
        p.values[0] = 1.0


def test_zero_params_predict_uniform():
    arch = Architecture(6, (4,), 5)
    probs = forward(ModelParams(np.zeros(arch.num_params), arch), np.random.default_rng(0).normal(size=(7, 6)))
    np.testing.assert_array_equal(probs, np.full((7, 5), 0.2))


def test_rows_sum_to_one():
    arch = Architecture(3, (8,), 4)
    probs = forward(init_params(arch, 1), np.random.default_rng(1).normal(size=(50, 3)) * 10)
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) <= 1e-12


def test_huge_logit_does_not_overflow():
    arch = Architecture(1, (), 3)
    # W = [1000, 0, 0], b = 0 with input 1 gives logits (1000, 0, 0).
    params = ModelParams([1000.0, 0.0, 0.0, 0.0, 0.0, 0.0], arch)
    probs = forward(params, np.array([[1.0]]))
    assert np.all(np.isfinite(probs))
    assert probs[0, 0] >= 1 - 1e-9


def test_forward_rejects_wrong_width():
    p = init_params(Architecture(3, (), 2), 0)
    with pytest.raises(InputError):
        forward(p, np.zeros((2, 4)))


@pytest.mark.parametrize("c", [2, 3, 10])
def test_zero_params_loss_is_log_c(c):
    arch = Architecture(4, (), c)
    rng = np.random.default_rng(c)
    batch = Batch(rng.normal(size=(9, 4)), rng.integers(0, c, 9))
    loss, _ = loss_and_grad(ModelParams(np.zeros(arch.num_params), arch), batch)
    assert abs(loss - math.log(c)) < 1e-9


@pytest.mark.parametrize("hidden", [(), (4,), (3, 5)])
def test_gradient_matches_finite_differences(hidden):
    arch = Architecture(4, hidden, 3)
    params, batch = random_case(123, arch)
    _, grad = loss_and_grad(params, batch)
    assert max_relative_error(grad, central_difference_grad(params, batch)) < 1e-5


def test_duplicated_batch_gives_same_loss_and_grad():
    arch = Architecture(3, (4,), 3)
    params, batch = random_case(5, arch)
    doubled = Batch(np.vstack([batch.features, batch.features]), np.concatenate([batch.labels, batch.labels]))
    l1, g1 = loss_and_grad(params, batch)
    l2, g2 = loss_and_grad(params, doubled)
    assert l1 == pytest.approx(l2, abs=1e-14)
    np.testing.assert_allclose(g1, g2, atol=1e-15)


def test_label_out_of_range_is_rejected():
    arch = Architecture(2, (), 3)
    with pytest.raises(InputError):
        loss_and_grad(init_params(arch, 0), Batch(np.zeros((1, 2)), np.array([3])))


def test_sgd_step_arithmetic():
    arch = Architecture(1, (), 2)
    p = ModelParams([1.0, 2.0, 0.0, 0.0], arch)
    out = sgd_step(p, [0.5, -1.0, 0.0, 0.0], 0.1)
    np.testing.assert_allclose(out.values, [0.95, 2.1, 0.0, 0.0], rtol=0, atol=1e-15)
    assert sgd_step(p, np.zeros(4), 0.1).same_as(p)


def test_sgd_step_linearity():
    arch = Architecture(2, (), 2)
    p = init_params(arch, 3)
    rng = np.random.default_rng(0)
    g1, g2 = rng.normal(size=6), rng.normal(size=6)
    two = sgd_step(sgd_step(p, g1, 0.1), g2, 0.1)
    one = sgd_step(p, g1 + g2, 0.1)
    np.testing.assert_allclose(two.values, one.values, atol=1e-14)


def test_sgd_step_rejects_non_finite_gradient():
    p = init_params(Architecture(2, (), 2), 0)
    g = np.zeros(6)
    g[2] = np.nan
    with pytest.raises(NumericError):
        sgd_step(p, g, 0.1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), steps=st.integers(1, 20), eta=st.floats(0.01, 5.0))
def test_forward_stays_stochastic_along_sgd(seed, steps, eta):
    arch = Architecture(3, (4,), 3)
    rng = np.random.default_rng(seed)
    p = init_params(arch, seed)
    x = rng.normal(size=(8, 3)) * 3
    y = rng.integers(0, 3, 8)
    for _ in range(steps):
        _, g = loss_and_grad(p, Batch(x, y))
        p = sgd_step(p, g, eta)
    probs = forward(p, x)
    assert np.all(probs >= 0) and np.all(probs <= 1)
    assert np.max(np.abs(probs.sum(axis=1) - 1)) <= 1e-12
