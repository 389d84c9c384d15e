import numpy as np
import pytest

from gmmcomet.core.errors import ConfigurationError, ContractViolation, NonFiniteGradientError
from gmmcomet.services import losses
from gmmcomet.services.netcore import (
    OptimizerState, OutputGrads, backward, forward, grad_check, iter_minibatches, sgd_step, softmax,
)


def _linear_output_loss(rng, batch, arch):
    a = rng.standard_normal((batch.shape[0], arch.feature_dim))
    b = rng.standard_normal((batch.shape[0], arch.reduced_dim))
    c = rng.standard_normal((batch.shape[0], arch.num_classes))

    def loss_fn(params):
        trace = forward(params, batch)
        value = float(np.sum(a * trace.features) + np.sum(b * trace.reduced) + np.sum(c * trace.logits))
        return value, backward(params, trace, OutputGrads(value, a, b, c))

    return loss_fn


def test_forward_shapes_and_softmax(tiny_params, rng):
    batch = rng.standard_normal((5, 3))
    trace = forward(tiny_params, batch)
    assert trace.features.shape == (5, 3)
    assert trace.reduced.shape == (5, 2)
    assert trace.logits.shape == (5, 2)
    np.testing.assert_allclose(trace.probs.sum(axis=1), 1.0, atol=1e-12)
    assert len(trace.hidden) == 1


def test_forward_rejects_wrong_input_dim(tiny_params):
    with pytest.raises(ConfigurationError):
        forward(tiny_params, np.zeros((2, 5)))


def test_backward_matches_finite_differences_on_all_coordinates(tiny_params, rng):
    batch = rng.standard_normal((4, 3))
    loss_fn = _linear_output_loss(rng, batch, tiny_params.arch)
    assert grad_check(loss_fn, tiny_params) < 1e-4


def test_backward_through_smoothed_cross_entropy(tiny_params, rng):
    batch = rng.standard_normal((6, 3))
    targets = np.array([0, 1, 0, 1, 1, 0])

    def loss_fn(params):
        trace = forward(params, batch)
        value, d_logits = losses.smoothed_cross_entropy(trace.logits, targets, 0.1)
        return value, backward(params, trace, OutputGrads(value, logits=d_logits))

    assert grad_check(loss_fn, tiny_params, num_samples=30, rng=rng) < 1e-4


def test_backward_refuses_frozen_params_and_vector_losses(tiny_params, rng):
    trace = forward(tiny_params, rng.standard_normal((2, 3)))
    with pytest.raises(ContractViolation):
        backward(tiny_params.copy(frozen=True), trace, OutputGrads(0.0))
    with pytest.raises(ContractViolation):
        backward(tiny_params, trace, OutputGrads(np.zeros(2)))


def test_sgd_step_heavy_ball_momentum(tiny_params):
    params = tiny_params.copy()
    start = params.copy()
    grads = params.zeros_like()
    for array in grads.arrays():
        array.fill(1.0)
    opt = OptimizerState.for_params(params, learning_rate=0.1, momentum=0.5)
    sgd_step(params, grads, opt)
    sgd_step(params, grads, opt)
    # v1 = 1, v2 = 0.5 + 1 = 1.5, total displacement 0.1 * (1 + 1.5)
    for before, after in zip(start.arrays(), params.arrays()):
        np.testing.assert_allclose(before - after, 0.25, atol=1e-12)


def test_softmax_is_shift_invariant(rng):
    for _ in range(20):
        logits = 3.0 * rng.standard_normal((4, 5))
        shift = rng.uniform(-50.0, 50.0, size=(4, 1))
        np.testing.assert_allclose(softmax(logits + shift), softmax(logits), atol=1e-12, rtol=0)
    np.testing.assert_allclose(softmax(np.array([2.0, 0.0])), [0.8807970779778823, 0.11920292202211755], atol=1e-15)


def test_sgd_step_is_bitwise_deterministic(tiny_params, rng):
    grads = tiny_params.zeros_like()
    for array in grads.arrays():
        array[...] = rng.standard_normal(array.shape)
    results = []
    for _ in range(2):
        params = tiny_params.copy()
        opt = OptimizerState.for_params(params, learning_rate=0.001, momentum=0.9)
        for _ in range(3):
            sgd_step(params, grads, opt)
        results.append((params, opt))
    (p1, o1), (p2, o2) = results
    for a, b in zip(p1.arrays() + o1.velocity, p2.arrays() + o2.velocity):
        assert a.tobytes() == b.tobytes()


def test_sgd_step_rejects_non_finite_gradient_without_touching_params(tiny_params):
    params = tiny_params.copy()
    start = params.copy()
    grads = params.zeros_like()
    grads.classifier.bias[0] = np.nan
    opt = OptimizerState.for_params(params, 0.1, 0.9)
    with pytest.raises(NonFiniteGradientError) as err:
        sgd_step(params, grads, opt)
    assert err.value.array_name == "classifier.bias"
    assert params.equals(start)
    assert all(np.all(v == 0) for v in opt.velocity)


def test_copy_is_deep(tiny_params):
    clone = tiny_params.copy()
    clone.trunk[0].weight += 1.0
    assert not clone.equals(tiny_params)
    assert tiny_params.max_abs_diff(clone) == pytest.approx(1.0)


def test_iter_minibatches_covers_every_index_once(rng):
    seen = np.concatenate(list(iter_minibatches(10, 3, rng)))
    assert sorted(seen.tolist()) == list(range(10))
