import gc
import weakref
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentmorph import tensor as T
from latentmorph.tensor import ContractError, ShapeError, Tape, Tensor, finite_diff_grad

from oracles import rel_err

N_INSTANCES = 20
TOL = 1e-4


def _weighted(out, R):
    return T.sum(T.mul(out, Tensor(R)))


def check_gradients(fn, arrays_in, rng):
    """Compare tape gradients with central differences for each input."""
    out_shape = fn(*[Tensor(a) for a in arrays_in]).shape
    R = rng.standard_normal(out_shape)
    leaves = [Tensor(a, requires_grad=True) for a in arrays_in]
    with Tape() as tape:
        loss = _weighted(fn(*leaves), R)
    tape.backward(loss)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(t, i=i):
            args = [Tensor(a) for a in arrays_in]
            args[i] = t
            return _weighted(fn(*args), R)

        numeric = finite_diff_grad(f, Tensor(arrays_in[i]))
        worst = max(worst, rel_err(leaf.grad, numeric))
    return worst


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, 0.3, x)


OPS = {
    "add_same": (lambda a, b: T.add(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "add_scalar": (lambda a, b: T.add(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal(())]),
    "add_channel": (lambda a, b: T.add(a, b), lambda r: [r.standard_normal((2, 3, 2)), r.standard_normal(3)]),
    "sub_channel": (lambda a, b: T.sub(a, b), lambda r: [r.standard_normal((2, 3, 2, 2, 2)), r.standard_normal(3)]),
    "mul_same": (lambda a, b: T.mul(a, b), lambda r: [r.standard_normal((4, 3)), r.standard_normal((4, 3))]),
    "mul_scalar": (lambda a, b: T.mul(a, b), lambda r: [r.standard_normal(()), r.standard_normal((2, 5))]),
    "div_same": (lambda a, b: T.div(a, b), lambda r: [r.standard_normal((3, 3)), _pos(r, (3, 3))]),
    "div_channel": (lambda a, b: T.div(a, b), lambda r: [r.standard_normal((2, 4)), _pos(r, 4)]),
    "scale": (lambda a: T.scale(a, -1.7), lambda r: [r.standard_normal((5,))]),
    "neg": (lambda a: T.neg(a), lambda r: [r.standard_normal((2, 3))]),
    "exp": (lambda a: T.exp(a), lambda r: [r.standard_normal((3, 4))]),
    "log": (lambda a: T.log(a), lambda r: [_pos(r, (3, 4))]),
    "relu": (lambda a: T.relu(a), lambda r: [_away_from_zero(r, (4, 5))]),
    "sigmoid": (lambda a: T.sigmoid(a), lambda r: [3 * r.standard_normal((4, 5))]),
    "softmax": (lambda a: T.softmax(a), lambda r: [r.standard_normal((3, 4))]),
    "log_softmax": (lambda a: T.log_softmax(a), lambda r: [r.standard_normal((3, 4))]),
    "sum_all": (lambda a: T.sum(a), lambda r: [r.standard_normal((2, 3, 4))]),
    "sum_axes": (lambda a: T.sum(a, axis=(2, 3)), lambda r: [r.standard_normal((2, 3, 2, 2))]),
    "mean": (lambda a: T.mean(a, axis=1), lambda r: [r.standard_normal((3, 5))]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), lambda r: [r.standard_normal((3, 4))]),
    "concat": (lambda a, b: T.concat([a, b]), lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 2))]),
    "matmul": (lambda a, b: T.matmul(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
    "conv3d": (
        lambda x, w, b: T.conv3d(x, w, b, stride=2, pad=1),
        lambda r: [r.standard_normal((2, 2, 4, 4, 4)), r.standard_normal((3, 2, 3, 3, 3)), r.standard_normal(3)],
    ),
    "conv3d_transpose": (
        lambda x, w, b: T.conv3d_transpose(x, w, b, stride=2, pad=1),
        lambda r: [r.standard_normal((1, 3, 2, 2, 2)), r.standard_normal((3, 2, 4, 4, 4)), r.standard_normal(2)],
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_primitive_gradients_match_finite_differences(name):
    fn, make = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    errors = [check_gradients(fn, make(rng), rng) for _ in range(N_INSTANCES)]
    assert max(errors) <= TOL, (name, max(errors))


def test_leaf_grads_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = T.sum(T.mul(x, x))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_shared_input_gradients_sum():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = T.sum(T.add(T.mul(x, x), x))
    tape.backward(y)
    assert x.grad[0] == pytest.approx(7.0)


def test_intermediate_nodes_have_no_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        h = T.exp(x)
        loss = T.sum(h)
    tape.backward(loss)
    assert h.grad is None
    assert x.grad is not None


def test_non_scalar_loss_is_a_contract_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.exp(x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_operator_overloads_record_on_tape():
    a = Tensor([2.0], requires_grad=True)
    b = Tensor([5.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(a * b - a / b + a * 2)
    tape.backward(loss)
    assert a.grad[0] == pytest.approx(5 - 1 / 5 + 2)
    assert b.grad[0] == pytest.approx(2 + 2 / 25)


def test_no_recording_outside_tape():
    x = Tensor([1.0], requires_grad=True)
    y = T.exp(x)
    assert y._node is None


def test_graph_freed_without_cycle_collector():
    x = Tensor(np.ones((4, 4)), requires_grad=True)
    gc.disable()
    try:
        with Tape() as tape:
            h = T.relu(x * 3.0)
            loss = T.sum(h)
        tape.backward(loss)
        refs = [weakref.ref(tape), weakref.ref(h)]
        del tape, h, loss
        assert all(r() is None for r in refs)
    finally:
        gc.enable()
    assert np.all(x.grad == 3.0)


def test_backward_after_tape_released_raises():
    x = Tensor([1.0], requires_grad=True)
    with Tape():
        y = T.sum(T.exp(x))
    with pytest.raises(ContractError):
        y.backward()


def test_broadcast_outside_supported_forms_raises():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_log_clamps_at_zero():
    x = Tensor([0.0, 1.0], requires_grad=True)
    with Tape() as tape:
        y = T.sum(T.log(x))
    tape.backward(y)
    assert np.isfinite(y.item())
    assert x.grad[0] == 0.0


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-700, 700)))
def test_sigmoid_is_finite_and_bounded(x):
    s = T.sigmoid(Tensor(x)).data
    assert np.all(np.isfinite(s))
    assert np.all((s >= 0) & (s <= 1))


@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one_and_match_log_softmax(x):
    p = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(T.log_softmax(Tensor(x)).data), p, atol=1e-12)


def test_finite_diff_of_quadratic():
    g = finite_diff_grad(lambda t: T.sum(T.mul(t, t)), Tensor([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(g, [2.0, -4.0, 1.0], atol=1e-8)
