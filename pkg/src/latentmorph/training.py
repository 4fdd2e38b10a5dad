"""Mini-batch training with Adam, periodic validation and early stopping.

Every random draw is keyed by ``(seed, iteration, ...)`` so a run can be
stopped, checkpointed and resumed without changing its outcome.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .layers import adam_step, clip_grad_norm
from .tensor import Tape
from .vae import VAENet, ce_loss, dice_loss, hard_dice, kl_loss, noise_for

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("iter", "L_rec", "L_KL", "L_MLP", "total", "val_total", "val_acc")
CLIP_NORM = 5.0


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_iters: int = 1200
    val_every: int = 200
    patience: int = 10
    seed: int = 42
    clip_grad: bool = False

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.val_every < 1 or self.patience < 1:
            raise ValueError("batch size, validation interval and patience must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")


@dataclass
class TrainState:
    iteration: int = 0
    best_val: Optional[float] = None
    best_iteration: int = -1
    bad_evals: int = 0
    stopped: bool = False
    last_eval: int = -1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(**d)


@dataclass
class _Permutations:
    seed: int
    n: int
    cache: dict = field(default_factory=dict)

    def index(self, position: int) -> int:
        epoch, offset = divmod(position, self.n)
        if epoch not in self.cache:
            self.cache = {epoch: np.random.default_rng([self.seed, 0x5EED, epoch]).permutation(self.n)}
        return int(self.cache[epoch][offset])


def batch_indices(seed: int, iteration: int, n: int, batch_size: int) -> np.ndarray:
    perms = _Permutations(seed, n)
    start = iteration * batch_size
    return np.array([perms.index(start + j) for j in range(batch_size)])


def evaluate_split(net: VAENet, X: np.ndarray, y: np.ndarray, batch_size: int = 32) -> dict:
    """Test-time losses and predictions (decoding from ``mu``, no sampling)."""
    cfg = net.config
    n = X.shape[0]
    sums = {"rec": 0.0, "kl": 0.0, "mlp": 0.0}
    mus, probs, dices = [], [], []
    for start in range(0, n, batch_size):
        xb, yb = X[start : start + batch_size], y[start : start + batch_size]
        code, x_hat, dist = net.evaluate(xb)
        m = xb.shape[0]
        sums["rec"] += dice_loss(xb, x_hat).item() * m
        sums["kl"] += kl_loss(code).item() * m
        sums["mlp"] += ce_loss(dist.logits, yb).item() * m
        dices.append(hard_dice(xb, x_hat.data) * m)
        mus.append(code.mu.data)
        probs.append(dist.probs)
    rec, kl, ce = (sums[k] / n for k in ("rec", "kl", "mlp"))
    probs = np.concatenate(probs)
    pred = np.argmax(probs, axis=1)
    return {
        "rec": rec,
        "kl": kl,
        "mlp": ce,
        "total": rec + cfg.alpha * kl + cfg.beta * ce,
        "accuracy": float(np.mean(pred == y)),
        "dice": float(np.sum(dices) / n),
        "mu": np.concatenate(mus),
        "probs": probs,
        "pred": pred,
    }


def train_step(net: VAENet, X: np.ndarray, y: np.ndarray, cfg: TrainConfig, iteration: int) -> dict:
    idx = batch_indices(cfg.seed, iteration, X.shape[0], cfg.batch_size)
    eps = noise_for(cfg.seed, iteration, idx, net.config.latent_dim)
    with Tape() as tape:
        total, parts = net.total_loss(X[idx], y[idx], eps)
    values = {k: v.item() for k, v in parts.items()}
    values["total"] = total.item()
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingDiverged(f"non-finite loss at iteration {iteration}: {values}")
    tape.backward(total)
    if cfg.clip_grad:
        clip_grad_norm(net.params, CLIP_NORM)
    adam_step(net.params, cfg.learning_rate)
    return values


def train(
    net: VAENet,
    X: np.ndarray,
    y: np.ndarray,
    X_val: Optional[np.ndarray],
    y_val: Optional[np.ndarray],
    cfg: TrainConfig,
    state: Optional[TrainState] = None,
    on_row: Optional[Callable[[dict], None]] = None,
    on_best: Optional[Callable[[TrainState], None]] = None,
    on_step: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """Run until ``cfg.max_iters`` total iterations or early stop.

    ``state`` resumes a previous run. ``on_row`` receives one metrics row per
    iteration, ``on_best`` fires whenever validation improves, and ``on_step``
    fires after every completed iteration (used for last-good checkpoints).
    """
    cfg.validate()
    state = state or TrainState()
    while state.iteration < cfg.max_iters and not state.stopped:
        it = state.iteration
        values = train_step(net, X, y, cfg, it)
        state.iteration += 1
        row = {
            "iter": it,
            "L_rec": values["rec"],
            "L_KL": values["kl"],
            "L_MLP": values["mlp"],
            "total": values["total"],
            "val_total": None,
            "val_acc": None,
        }
        due = state.iteration % cfg.val_every == 0 or state.iteration == cfg.max_iters
        if X_val is not None and due:
            ev = evaluate_split(net, X_val, y_val)
            row["val_total"], row["val_acc"] = ev["total"], ev["accuracy"]
            state.last_eval = state.iteration
            logger.info("after %d iterations: val_total %.5f val_acc %.3f dice %.3f", state.iteration, ev["total"], ev["accuracy"], ev["dice"])
            if state.best_val is None or ev["total"] < state.best_val:
                state.best_val = ev["total"]
                state.best_iteration = state.iteration
                state.bad_evals = 0
                if on_best is not None:
                    on_best(state)
            else:
                state.bad_evals += 1
                if state.bad_evals >= cfg.patience:
                    state.stopped = True
                    logger.info("early stop at iteration %d", state.iteration)
        if on_row is not None:
            on_row(row)
        if on_step is not None:
            on_step(state)
    return state
