"""Gradient ascent on a target-class probability in latent space.

Starting from a sample's latent mean ``mu_0``, each step moves

    mu_t = mu_{t-1} + lam * d y_target / d mu_{t-1}

and decodes ``mu_t`` back to voxel space so the morph can be measured.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .shapes import DTYPE_F32, VolumeMetrics, volume_metrics, write_vxg
from .tensor import Tape, Tensor
from .vae import VAENet

STEP_FIELDS = ("t", "p_class0", "p_class1", "lvm", "lvcv")


class NavigationError(RuntimeError):
    pass


def class_grad(net: VAENet, mu, target: int, mode: str = "probability") -> np.ndarray:
    """Gradient of the target class score w.r.t. ``mu``, through the MLP only.

    ``mode="probability"`` differentiates the softmax probability of
    ``target``; ``mode="logit"`` differentiates the log-odds of ``target``
    against the other class, which does not saturate.
    """
    if mode not in ("probability", "logit"):
        raise ValueError(f"unknown gradient mode {mode!r}")
    mu_t = Tensor(np.asarray(mu, dtype=np.float64).reshape(1, -1), requires_grad=True)
    with Tape() as tape:
        logits = net.logits(mu_t)
        pick = np.zeros(logits.shape)
        pick[0, target] = 1.0
        if mode == "probability":
            score = T.sum(T.mul(T.softmax(logits), Tensor(pick)))
        else:
            score = T.sum(T.mul(logits, Tensor(2.0 * pick - 1.0)))
    if not score.requires_grad:
        return np.zeros(mu_t.shape[1])
    tape.backward(score)
    return mu_t.grad.reshape(-1)


@dataclass
class NavigationStep:
    t: int
    mu: np.ndarray
    probs: np.ndarray
    decoded: np.ndarray
    volumes: VolumeMetrics

    @property
    def lvm(self) -> float:
        return self.volumes.lvm_ed

    @property
    def lvcv(self) -> float:
        return self.volumes.lvcv_ed


@dataclass
class NavigationTrace:
    steps: list
    lam: float
    target_class: int
    stop_reason: str
    mode: str = "probability"
    meta: dict = field(default_factory=dict)

    @property
    def mus(self) -> np.ndarray:
        return np.stack([s.mu for s in self.steps])

    def target_probs(self) -> np.ndarray:
        return np.array([s.probs[self.target_class] for s in self.steps])


def _measure(net: VAENet, mu: np.ndarray, t: int, threshold: float) -> NavigationStep:
    mu2 = mu.reshape(1, -1)
    probs = net.classify(mu2).probs[0]
    decoded = net.decode(mu2).data[0]
    return NavigationStep(t, mu.copy(), probs, decoded, volume_metrics(decoded, threshold))


def navigate(
    net: VAENet,
    mu0,
    target: int = 1,
    lam: float = 0.1,
    max_iters: int = 200,
    p_stop: float = 0.999,
    mode: str = "probability",
    threshold: float = 0.5,
    decode_every: int = 1,
) -> NavigationTrace:
    """Iterate the latent update until ``p_target >= p_stop`` or ``max_iters`` steps."""
    mu = np.asarray(mu0, dtype=np.float64).reshape(-1).copy()
    steps = [_measure(net, mu, 0, threshold)]
    reason = "threshold" if steps[0].probs[target] >= p_stop else "max_iters"
    t = 0
    while reason != "threshold" and t < max_iters:
        grad = class_grad(net, mu, target, mode)
        if not np.all(np.isfinite(grad)):
            raise NavigationError(f"non-finite gradient at step {t}: |mu|={np.linalg.norm(mu):.3g}")
        mu = mu + lam * grad
        t += 1
        step = _measure(net, mu, t, threshold)
        steps.append(step)
        if step.probs[target] >= p_stop:
            reason = "threshold"
    if decode_every > 1:
        # every step is measured; only the kept grids are retained for export
        for step in steps[1:-1]:
            if step.t % decode_every:
                step.decoded = None
    return NavigationTrace(steps, lam, target, reason, mode)


def write_trace(trace: NavigationTrace, out_dir, meta: dict = None) -> Path:
    """Write ``manifest.json``, ``steps.csv``, ``mu.csv`` and per-step VXG1 grids."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "lambda": trace.lam,
        "target_class": trace.target_class,
        "stop_reason": trace.stop_reason,
        "mode": trace.mode,
        "n_steps": len(trace.steps),
        "grids": [],
    }
    manifest.update(meta or {})
    with open(out / "steps.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STEP_FIELDS)
        for s in trace.steps:
            w.writerow([s.t, repr(float(s.probs[0])), repr(float(s.probs[1])), repr(s.lvm), repr(s.lvcv)])
    with open(out / "mu.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"mu_{i}" for i in range(trace.steps[0].mu.size)])
        for s in trace.steps:
            w.writerow([s.t] + [repr(float(v)) for v in s.mu])
    for s in trace.steps:
        if s.decoded is None:
            continue
        name = f"step_{s.t:04d}.vxg"
        write_vxg(out / name, s.decoded, DTYPE_F32)
        manifest["grids"].append(name)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_trace_mus(trace_dir) -> np.ndarray:
    with open(Path(trace_dir) / "mu.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r[1:]] for r in rows])
