import numpy as np
import pytest

from autodiff import (
    GradTape, Tensor, add, affine_forward, backward, dropout, finite_difference_check, logistic, mean, relu,
    reshape, sigmoid, take_rows, tanh, total,
)
from errors import ContractError, DimensionError

TOL = 1e-4


def test_affine_vector_gradients(rng):
    x = Tensor(rng.standard_normal(4))
    W = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal(3))
    err = finite_difference_check(lambda tape: total(tape, tanh(tape, affine_forward(tape, x, W, b))), [x, W, b])
    assert err < TOL


def test_affine_batch_gradients(rng):
    x = Tensor(rng.standard_normal((5, 4)))
    W = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal(3))
    err = finite_difference_check(lambda tape: mean(tape, logistic(tape, affine_forward(tape, x, W, b))), [x, W, b])
    assert err < TOL


def test_relu_gradient_away_from_kink(rng):
    # keep inputs clear of zero so central differences never straddle the kink
    v = rng.uniform(0.2, 1.0, size=6) * np.sign(rng.standard_normal(6))
    x = Tensor(v)
    err = finite_difference_check(lambda tape: total(tape, relu(tape, x)), [x])
    assert err < TOL


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.array([0.0, 1.0, -1.0]))
    tape = GradTape()
    (g,) = backward(tape, total(tape, relu(tape, x)), [x])
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_take_rows_accumulates_repeats(rng):
    x = Tensor(rng.standard_normal((3, 2)))
    tape = GradTape()
    (g,) = backward(tape, total(tape, take_rows(tape, x, np.array([0, 0, 2]))), [x])
    np.testing.assert_array_equal(g, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_reshape_and_mean_axis(rng):
    x = Tensor(rng.standard_normal(12))
    err = finite_difference_check(
        lambda tape: total(tape, tanh(tape, mean(tape, reshape(tape, x, (3, 4)), axis=1))), [x])
    assert err < TOL


def test_unused_parameter_gets_zeros(rng):
    x = Tensor(rng.standard_normal(3))
    unused = Tensor(rng.standard_normal((2, 2)))
    tape = GradTape()
    gx, gu = backward(tape, total(tape, tanh(tape, x)), [x, unused])
    np.testing.assert_array_equal(gu, np.zeros((2, 2)))
    assert np.all(gx > 0)


def test_backward_rejects_non_scalar_loss(rng):
    x = Tensor(rng.standard_normal(3))
    tape = GradTape()
    y = tanh(tape, x)
    with pytest.raises(ContractError):
        backward(tape, y, [x])


def test_backward_rejects_loss_from_another_tape(rng):
    x = Tensor(rng.standard_normal(3))
    loss = total(GradTape(), x)
    with pytest.raises(ContractError):
        backward(GradTape(), loss, [x])


def test_disabled_tape_records_nothing_and_keeps_values(rng):
    x = Tensor(rng.standard_normal((2, 3)))
    W = Tensor(rng.standard_normal((4, 3)))
    b = Tensor(np.zeros(4))
    off, on = GradTape(enabled=False), GradTape()
    a = affine_forward(off, x, W, b)
    c = affine_forward(on, x, W, b)
    assert len(off) == 0 and len(on) == 1
    np.testing.assert_array_equal(a.value, c.value)


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        affine_forward(GradTape(), Tensor(np.ones(3)), Tensor(np.ones((2, 4))), Tensor(np.ones(2)))


def test_sigmoid_is_stable_at_extremes():
    assert sigmoid(-1000.0) == 0.0
    assert sigmoid(1000.0) == 1.0
    assert sigmoid(0.0) == 0.5
    assert isinstance(sigmoid(0.3), float)
    np.testing.assert_allclose(sigmoid(np.array([-2.0, 2.0])), [1 / (1 + np.e ** 2), 1 / (1 + np.e ** -2)])


def test_dropout_zero_rate_is_identity(rng):
    x = Tensor(rng.standard_normal(5))
    tape = GradTape()
    assert dropout(tape, x, 0.0, rng) is x
    assert len(tape) == 0


def test_dropout_keeps_expectation():
    x = Tensor(np.ones(200_000))
    y = dropout(GradTape(), x, 0.25, np.random.default_rng(0))
    assert set(np.unique(y.value)) <= {0.0, 1.0 / 0.75}
    assert abs(y.value.mean() - 1.0) < 0.01


def test_finite_difference_check_rejects_bad_eps(rng):
    x = Tensor(rng.standard_normal(2))
    with pytest.raises(ContractError):
        finite_difference_check(lambda tape: total(tape, x), [x], eps=0.0)


def test_finite_difference_check_rejects_nondeterminism():
    x = Tensor(np.ones(2))
    noise = np.random.default_rng(7)

    def f(tape):
        return total(tape, affine_forward(tape, x, Tensor(noise.standard_normal((1, 2))), Tensor(np.zeros(1))))

    with pytest.raises(ContractError):
        finite_difference_check(f, [x])


def _branches(x, W, b):
    def first(tape):
        return total(tape, tanh(tape, affine_forward(tape, x, W, b)))

    def second(tape):
        return mean(tape, logistic(tape, affine_forward(tape, x, W, b)))

    return first, second


def test_backward_is_linear_in_the_loss(rng):
    x, W, b = Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal(3))
    first, second = _branches(x, W, b)
    grads = []
    for f in (first, second):
        tape = GradTape()
        grads.append(backward(tape, f(tape), [x, W, b]))
    tape = GradTape()
    both = backward(tape, add(tape, first(tape), second(tape)), [x, W, b])
    for g, g1, g2 in zip(both, *grads):
        np.testing.assert_allclose(g, g1 + g2, rtol=1e-12, atol=1e-14)
    tape = GradTape()
    y = first(tape)
    doubled = backward(tape, add(tape, y, y), [x, W, b])
    for g, g1 in zip(doubled, grads[0]):
        np.testing.assert_allclose(g, 2.0 * g1, rtol=1e-12, atol=1e-14)


def test_backward_replays_bit_identically(rng):
    x, W, b = Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal(3))
    first, _ = _branches(x, W, b)
    tape = GradTape()
    loss = first(tape)
    once = backward(tape, loss, [x, W, b])
    again = backward(tape, loss, [x, W, b])
    fresh_tape = GradTape()
    fresh = backward(fresh_tape, first(fresh_tape), [x, W, b])
    for a, b_, c in zip(once, again, fresh):
        np.testing.assert_array_equal(a, b_)
        np.testing.assert_array_equal(a, c)
