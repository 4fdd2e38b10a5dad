import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latentmorph import tensor as T
from latentmorph.tensor import ShapeError, Tensor

from oracles import naive_conv3d, naive_conv3d_transpose


@st.composite
def conv_case(draw):
    k = draw(st.integers(1, 4))
    stride = draw(st.integers(1, 3))
    pad = draw(st.integers(0, k - 1))
    spatial = tuple(draw(st.integers(max(1, k - 2 * pad), 7)) for _ in range(3))
    n = draw(st.integers(1, 2))
    c_in = draw(st.integers(1, 3))
    c_out = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**31))
    return k, stride, pad, spatial, n, c_in, c_out, seed


@given(conv_case())
def test_conv3d_matches_nested_loop_oracle(case):
    k, stride, pad, spatial, n, c_in, c_out, seed = case
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c_in) + spatial)
    w = rng.standard_normal((c_out, c_in, k, k, k))
    got = T.conv3d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, naive_conv3d(x, w, stride, pad), atol=1e-12, rtol=0)


@given(conv_case())
def test_conv3d_transpose_matches_scatter_oracle(case):
    k, stride, pad, spatial, n, c_in, c_out, seed = case
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c_in) + spatial)
    w = rng.standard_normal((c_in, c_out, k, k, k))
    full = [(s - 1) * stride + k - 2 * pad for s in spatial]
    if min(full) < 1:
        with pytest.raises(ShapeError):
            T.conv3d_transpose(Tensor(x), Tensor(w), stride=stride, pad=pad)
        return
    got = T.conv3d_transpose(Tensor(x), Tensor(w), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, naive_conv3d_transpose(x, w, stride, pad), atol=1e-12, rtol=0)


def _adjoint_gap(rng):
    """|<conv(x), y> - <x, conv_T(y)>| on grids where both maps round-trip exactly."""
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 4))
    pad = int(rng.integers(0, k))
    out = []
    for _ in range(3):
        o = int(rng.integers(1, 5))
        while (o - 1) * stride + k - 2 * pad < 1:
            o += 1
        out.append(o)
    spatial = tuple((o - 1) * stride + k - 2 * pad for o in out)
    n, c_in, c_out = (int(v) for v in rng.integers(1, 4, size=3))
    w = rng.standard_normal((c_out, c_in, k, k, k))
    x = rng.standard_normal((n, c_in) + spatial)
    y = rng.standard_normal((n, c_out) + tuple(out))
    lhs = np.vdot(T.conv3d(Tensor(x), Tensor(w), stride=stride, pad=pad).data, y)
    rhs = np.vdot(x, T.conv3d_transpose(Tensor(y), Tensor(w), stride=stride, pad=pad).data)
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1.0)


def test_conv_and_transpose_are_adjoint_on_100_instances():
    rng = np.random.default_rng(2024)
    gaps = [_adjoint_gap(rng) for _ in range(100)]
    assert max(gaps) <= 1e-10


def test_adjoint_exact_when_extents_round_trip():
    # k=4, s=2, p=1 maps 8 -> 4 -> 8 exactly, as used by the network
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8, 8))
    w = rng.standard_normal((5, 3, 4, 4, 4))
    y = rng.standard_normal((2, 5, 4, 4, 4))
    lhs = np.vdot(T.conv3d(Tensor(x), Tensor(w), stride=2, pad=1).data, y)
    rhs = np.vdot(x, T.conv3d_transpose(Tensor(y), Tensor(w), stride=2, pad=1).data)
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_identity_kernel_is_identity():
    x = np.random.default_rng(1).standard_normal((1, 1, 5, 5, 5))
    w = np.ones((1, 1, 1, 1, 1))
    np.testing.assert_array_equal(T.conv3d(Tensor(x), Tensor(w)).data, x)


def test_conv_extents():
    assert T.conv_output_extent(32, 4, 2, 1) == 16
    assert T.transpose_output_extent(16, 4, 2, 1) == 32
    assert T.conv_output_extent(4, 4, 1, 0) == 1


def test_conv_rejects_bad_shapes():
    x = Tensor(np.zeros((1, 2, 3, 3, 3)))
    with pytest.raises(ShapeError):
        T.conv3d(x, Tensor(np.zeros((1, 3, 2, 2, 2))))  # channel mismatch
    with pytest.raises(ShapeError):
        T.conv3d(x, Tensor(np.zeros((1, 2, 5, 5, 5))))  # kernel larger than input
    with pytest.raises(ShapeError):
        T.conv3d(x, Tensor(np.zeros((1, 2, 2, 2, 2))), bias=Tensor(np.zeros(4)))
