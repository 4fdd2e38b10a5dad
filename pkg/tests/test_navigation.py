import csv
import json

import numpy as np
import pytest

from latentmorph import tensor as T
from latentmorph.navigation import NavigationError, class_grad, navigate, read_trace_mus, write_trace
from latentmorph.shapes import read_vxg
from latentmorph.tensor import Tensor, finite_diff_grad

from oracles import rel_err


@pytest.fixture
def mu0():
    return np.array([0.3, -0.2, 0.5, 0.1])


def _prob(net, target):
    return lambda t: T.softmax(net.logits(T.reshape(t, (1, -1)))).data[0, target]


@pytest.mark.parametrize("target", [0, 1])
def test_probability_gradient_matches_finite_differences(tiny_net, target):
    rng = np.random.default_rng(target)
    for _ in range(20):
        mu = rng.standard_normal(4)
        g = class_grad(tiny_net, mu, target)
        num = finite_diff_grad(lambda t: float(_prob(tiny_net, target)(t)), Tensor(mu))
        assert rel_err(g, num) <= 1e-4


def test_probability_gradient_is_scaled_logit_gradient(tiny_net):
    rng = np.random.default_rng(5)
    for _ in range(10):
        mu = rng.standard_normal(4)
        p = tiny_net.classify(mu).probs[0]
        gp = class_grad(tiny_net, mu, 1, "probability")
        gl = class_grad(tiny_net, mu, 1, "logit")
        np.testing.assert_allclose(gp, p[0] * p[1] * gl, rtol=1e-10, atol=1e-15)


def test_zero_mlp_has_zero_gradient(tiny_net, mu0):
    for p in tiny_net.params:
        if p.name.startswith("mlp."):
            p.value.data[...] = 0.0
    assert not class_grad(tiny_net, mu0, 1).any()


def test_unknown_mode(tiny_net, mu0):
    with pytest.raises(ValueError):
        class_grad(tiny_net, mu0, 1, "hinge")


def test_trace_invariants(tiny_net, mu0):
    trace = navigate(tiny_net, mu0, target=1, lam=0.5, max_iters=12)
    assert np.array_equal(trace.steps[0].mu, mu0)
    assert [s.t for s in trace.steps] == list(range(len(trace.steps)))
    for prev, cur in zip(trace.steps, trace.steps[1:]):
        step = 0.5 * class_grad(tiny_net, prev.mu, 1)
        np.testing.assert_allclose(cur.mu - prev.mu, step, atol=1e-12, rtol=0)
    for s in trace.steps:
        assert all(np.isfinite(v) and v >= 0 for v in s.volumes.as_tuple())
        assert s.decoded.shape == (2, 8, 8, 8)
    assert trace.stop_reason in ("threshold", "max_iters")
    assert len(trace.steps) <= 13


def test_gradient_ascent_raises_target_probability(tiny_net, mu0):
    trace = navigate(tiny_net, mu0, target=1, lam=2.0, max_iters=30, mode="logit")
    probs = trace.target_probs()
    assert probs[-1] > probs[0]


def test_zero_step_keeps_mu(tiny_net, mu0):
    trace = navigate(tiny_net, mu0, lam=0.0, max_iters=5)
    assert all(np.array_equal(s.mu, mu0) for s in trace.steps)
    assert len(trace.steps) == 6 and trace.stop_reason == "max_iters"


def test_already_confident_start_stops_immediately(tiny_net, mu0):
    tiny_net.parameter("mlp.out.bias").value.data[:] = [0.0, 40.0]
    trace = navigate(tiny_net, mu0, target=1)
    assert len(trace.steps) == 1 and trace.stop_reason == "threshold"


def test_non_finite_gradient_aborts(tiny_net, mu0):
    tiny_net.parameter("mlp.fc1.weight").value.data[0, 0] = np.nan
    with pytest.raises(NavigationError, match="step 0"):
        navigate(tiny_net, mu0, max_iters=3)


def test_write_trace(tmp_path, tiny_net, mu0):
    trace = navigate(tiny_net, mu0, lam=0.5, max_iters=6, decode_every=4)
    out = write_trace(trace, tmp_path / "tr", {"sample_id": "x"})
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["stop_reason"] == trace.stop_reason and manifest["lambda"] == 0.5
    assert manifest["grids"] == ["step_0000.vxg", "step_0004.vxg", "step_0006.vxg"]
    with open(out / "steps.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "p_class0", "p_class1", "lvm", "lvcv"]
    assert len(rows) == len(trace.steps) + 1
    assert float(rows[3][2]) == trace.steps[2].probs[1]
    np.testing.assert_array_equal(read_trace_mus(out), trace.mus)
    grid = read_vxg(out / "step_0004.vxg")
    np.testing.assert_allclose(grid, trace.steps[4].decoded, atol=1e-7)
