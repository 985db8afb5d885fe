import numpy as np
import pytest

from core.networks import AdamOptimizer, MlpParams, backward, forward, polyak_update


def numeric_grads(params, loss_fn, h=1e-6):
    flat = params.flatten()
    grads = np.zeros_like(flat)
    for index in range(flat.size):
        bumped = flat.copy()
        bumped[index] += h
        params.assign_flat(bumped)
        upper = loss_fn()
        bumped[index] -= 2.0 * h
        params.assign_flat(bumped)
        lower = loss_fn()
        grads[index] = (upper - lower) / (2.0 * h)
    params.assign_flat(flat)
    return grads


def test_init_shapes_and_zero_biases(rng):
    params = MlpParams.init([5, 7, 3], rng, output_scale=0.01)
    assert [w.shape for w in params.weights] == [(7, 5), (3, 7)]
    assert all(np.all(b == 0.0) for b in params.biases)
    assert params.num_parameters() == 7 * 5 + 7 + 3 * 7 + 3
    assert np.abs(params.weights[-1]).max() <= 0.01 * np.sqrt(6.0 / 10.0)


def test_mismatched_layers_rejected():
    with pytest.raises(ValueError):
        MlpParams([2, 3], [np.zeros((2, 3))], [np.zeros(3)])
    with pytest.raises(ValueError):
        MlpParams([2, 3], [np.zeros((3, 2))], [np.zeros(3)], activation='relu')


def test_backward_matches_finite_differences(rng):
    params = MlpParams.init([4, 6, 5, 2], rng)
    for b in params.biases:
        b[...] = rng.normal(size=b.shape) * 0.1
    x = rng.normal(size=(9, 4))
    weights = rng.normal(size=(9, 2))

    def loss():
        out, _ = forward(params, x)
        return float(np.sum(weights * out ** 2))

    out, cache = forward(params, x)
    grads, d_input = backward(params, cache, 2.0 * weights * out)
    analytic = np.concatenate([g.ravel() for g in grads])
    np.testing.assert_allclose(analytic, numeric_grads(params, loss), rtol=1e-5, atol=1e-8)

    h = 1e-6
    numeric_input = np.zeros_like(x)
    for row in range(x.shape[0]):
        for col in range(x.shape[1]):
            bumped = x.copy()
            bumped[row, col] += h
            upper = float(np.sum(weights * forward(params, bumped)[0] ** 2))
            bumped[row, col] -= 2.0 * h
            lower = float(np.sum(weights * forward(params, bumped)[0] ** 2))
            numeric_input[row, col] = (upper - lower) / (2.0 * h)
    np.testing.assert_allclose(d_input, numeric_input, rtol=1e-5, atol=1e-8)


def test_forward_accepts_a_single_row(rng):
    params = MlpParams.init([3, 4, 1], rng)
    single, _ = forward(params, np.ones(3))
    batch, _ = forward(params, np.ones((1, 3)))
    np.testing.assert_array_equal(single, batch)


def test_adam_first_step_moves_by_learning_rate():
    tensor = np.array([1.0, -2.0, 3.0])
    optimizer = AdamOptimizer.for_tensors([tensor], lr=0.1)
    optimizer.step([tensor], [np.array([0.5, -4.0, 0.0])])
    np.testing.assert_allclose(tensor, [0.9, -1.9, 3.0], atol=1e-6)
    assert optimizer.t == 1


def test_adam_minimizes_a_quadratic():
    tensor = np.array([3.0, -5.0])
    optimizer = AdamOptimizer.for_tensors([tensor], lr=0.05)
    for _ in range(2000):
        optimizer.step([tensor], [2.0 * tensor])
    np.testing.assert_allclose(tensor, [0.0, 0.0], atol=5e-2)


def test_polyak_blends_into_a_new_object(rng):
    target = MlpParams.init([3, 4, 2], rng)
    online = MlpParams.init([3, 4, 2], rng)
    before = target.flatten()
    blended = polyak_update(target, online, 0.25)
    np.testing.assert_allclose(blended.flatten(), 0.25 * online.flatten() + 0.75 * before)
    np.testing.assert_array_equal(target.flatten(), before)
    assert blended is not target


def test_polyak_rejects_shape_mismatch(rng):
    with pytest.raises(ValueError):
        polyak_update(MlpParams.init([3, 4, 2], rng), MlpParams.init([3, 5, 2], rng), 0.1)
