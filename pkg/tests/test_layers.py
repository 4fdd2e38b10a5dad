import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latentmorph import tensor as T
from latentmorph.layers import LayerSpec, Parameter, adam_step, apply_layer, clip_grad_norm, init_parameters
from latentmorph.tensor import ContractError, Tape, Tensor
from latentmorph.vae import ModelConfig, parameter_shapes


def test_kaiming_bounds_and_zero_bias():
    specs = [LayerSpec("c", "conv3d", 2, 16, 4, 2, 1, "relu"), LayerSpec("d", "dense", 100, 7)]
    params = init_parameters(specs, seed=0)
    assert [p.name for p in params] == ["c.kernel", "c.bias", "d.weight", "d.bias"]
    assert np.abs(params[0].value.data).max() <= math.sqrt(6 / (2 * 64))
    assert np.abs(params[2].value.data).max() <= math.sqrt(6 / 100)
    assert not params[1].value.data.any() and not params[3].value.data.any()
    # a uniform draw should nearly reach its bound with this many samples
    assert np.abs(params[0].value.data).max() > 0.95 * math.sqrt(6 / (2 * 64))


def test_init_is_seed_deterministic():
    specs = ModelConfig(input_size=8, latent_dim=4, encoder_channels=(2, 3)).layer_specs()
    a = init_parameters(specs, 3)
    b = init_parameters(specs, 3)
    c = init_parameters(specs, 4)
    assert all(np.array_equal(p.value.data, q.value.data) for p, q in zip(a, b))
    assert not np.array_equal(a[0].value.data, c[0].value.data)


def test_desk32_parameter_count():
    total = sum(int(np.prod(s)) for _, s in parameter_shapes(ModelConfig().layer_specs()))
    assert total == 533284


def test_transpose_fan_in_accounts_for_stride():
    spec = LayerSpec("t", "conv3d_transpose", 64, 32, 4, 2, 1)
    assert spec.weight_shape == (64, 32, 4, 4, 4)
    assert spec.fan_in == 64 * 64 // 8


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec("x", "pool", 1, 1)
    with pytest.raises(ValueError):
        LayerSpec("x", "dense", 1, 1, activation="tanh")
    with pytest.raises(ValueError):
        LayerSpec("x", "dense", 0, 1)


def test_dense_layer_forward():
    spec = LayerSpec("d", "dense", 3, 2, activation="relu")
    w = Tensor([[1.0, -1.0], [0.0, 2.0], [1.0, 0.0]])
    b = Tensor([0.5, -10.0])
    out = apply_layer(spec, w, b, Tensor([[1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(out.data, [[4.5, 0.0]])


def _adam_oracle(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(1e-4, 0.5))
def test_adam_matches_scalar_oracle(grads, lr):
    p = Parameter("w", Tensor([1.5]))
    for g in grads:
        p.value.grad = np.array([g])
        adam_step([p], lr)
    assert p.value.data[0] == pytest.approx(_adam_oracle(1.5, grads, lr), rel=1e-12, abs=1e-12)
    assert p.step_count == len(grads)
    assert p.grad is None


def test_adam_first_step_moves_by_lr():
    p = Parameter("w", Tensor([0.0, 0.0]))
    p.value.grad = np.array([3.0, -0.001])
    adam_step([p], 0.01)
    np.testing.assert_allclose(p.value.data, [-0.01, 0.01], rtol=1e-4)


def test_adam_minimizes_quadratic():
    p = Parameter("w", Tensor([4.0, -3.0]))
    for _ in range(2000):
        with Tape() as tape:
            loss = T.sum(T.mul(p.value, p.value))
        tape.backward(loss)
        adam_step([p], 0.05)
    assert np.abs(p.value.data).max() < 1e-2


def test_adam_requires_gradients():
    with pytest.raises(ContractError):
        adam_step([Parameter("w", Tensor([1.0]))], 0.1)


def test_clip_grad_norm():
    a, b = Parameter("a", Tensor([0.0])), Parameter("b", Tensor([0.0]))
    a.value.grad, b.value.grad = np.array([3.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.hypot(a.grad[0], b.grad[0]) == pytest.approx(1.0)
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)


def test_adam_zero_gradient_leaves_parameters():
    p = Parameter("w", Tensor([1.0, -2.0]))
    p.value.grad = np.zeros(2)
    adam_step([p], 0.1)
    np.testing.assert_array_equal(p.value.data, [1.0, -2.0])


def test_adam_single_step_closed_form():
    p = Parameter("w", Tensor([0.0]))
    p.value.grad = np.array([1.0])
    adam_step([p], 0.001)
    # m_hat = 1, v_hat = 1
    assert p.value.data[0] == -0.001 / (1.0 + 1e-8)


def test_identical_params_stay_identical():
    a, b = Parameter("a", Tensor([0.3, 0.7])), Parameter("b", Tensor([0.3, 0.7]))
    rng = np.random.default_rng(0)
    for _ in range(25):
        g = rng.standard_normal(2)
        a.value.grad, b.value.grad = g.copy(), g.copy()
        adam_step([a, b], 0.01)
    assert np.array_equal(a.value.data, b.value.data)


def test_adam_descent_smoke():
    w = Parameter("w", Tensor(np.random.default_rng(1).standard_normal(6)))
    f = [float(np.sum(w.value.data**2))]
    for step in range(1, 51):
        with Tape() as tape:
            loss = T.sum(T.mul(w.value, w.value))
        tape.backward(loss)
        adam_step([w], 0.01)
        if step % 10 == 0:
            f.append(float(np.sum(w.value.data**2)))
    assert all(b < a for a, b in zip(f, f[1:]))
