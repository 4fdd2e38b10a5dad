"""``latentmorph`` command line: gen-data, train, eval, navigate, embed.

Settings come from built-in defaults, then an optional JSON config file
(``--config``), then command-line flags. Exit codes: 0 success, 1 usage
error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from .manifold import embed_with_trace, write_embedding_csv
from .navigation import navigate, read_trace_mus, write_trace
from .plotting import scatter_svg
from .shapes import load_sample, load_split, make_dataset, read_manifest
from .training import METRIC_FIELDS, TrainConfig, TrainState, TrainingDiverged, evaluate_split, train
from .vae import ModelConfig, VAENet, preset

logger = logging.getLogger("latentmorph")

CHECKPOINT_FORMAT = "latentmorph-checkpoint"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    data_dir: str = "data"
    checkpoint_dir: str = "runs/desk32"
    output_dir: str = "out"
    preset: str = "desk32"
    seed: int = 42
    # dataset
    n_per_class: int = 160
    split_fracs: tuple = (0.625, 0.1875, 0.1875)
    # model overrides; None keeps the preset (or the checkpoint's) value
    latent_dim: Optional[int] = None
    alpha: float = 0.1
    beta: float = 1.0
    # training
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_iters: int = 1200
    val_every: int = 200
    patience: int = 10
    clip_grad: bool = False
    # navigation
    nav_lambda: float = 0.1
    p_stop: float = 0.999
    nav_max_iters: int = 200
    nav_mode: str = "probability"
    decode_every: int = 1
    # embedding
    k: int = 10
    weight_mode: str = "heat"

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.nav_lambda < 0:
            raise UsageError("rates must be positive")
        if self.batch_size < 1:
            raise UsageError("batch size must be >= 1")
        if len(self.split_fracs) != 3 or abs(sum(self.split_fracs) - 1.0) > 1e-9:
            raise UsageError(f"split fractions must be three values summing to 1, got {self.split_fracs}")

    def model_config(self) -> ModelConfig:
        return preset(self.preset, latent_dim=self.latent_dim, alpha=self.alpha, beta=self.beta)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_iters=self.max_iters,
            val_every=self.val_every,
            patience=self.patience,
            seed=self.seed,
            clip_grad=self.clip_grad,
        )


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    values = {}
    explicit = set()
    if path:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file {path} does not exist")
        try:
            values.update(json.loads(p.read_text()))
        except json.JSONDecodeError as err:
            raise UsageError(f"config file {path} is not valid JSON: {err}") from err
        explicit |= set(values)
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for k, v in overrides.items():
        if v is not None:
            values[k] = v
            explicit.add(k)
    if "split_fracs" in values:
        values["split_fracs"] = tuple(values["split_fracs"])
    cfg = RunConfig(**values)
    cfg.validate()
    cfg._explicit = explicit
    return cfg


# ------------------------------------------------------------------ checkpoints


def checkpoint_meta(net: VAENet, tcfg: TrainConfig, state: TrainState) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "model": net.config.to_dict(),
        "train": asdict(tcfg),
        "state": state.to_dict(),
        "rng": {"seed": tcfg.seed, "iteration": state.iteration},
    }


def load_net(path, cfg: Optional[RunConfig] = None):
    """Load a checkpoint; explicit model settings in ``cfg`` must match it."""
    p = Path(path)
    if not p.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    params, meta = ckpt.load(p)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a latentmorph checkpoint")
    model = ModelConfig.from_dict(meta["model"])
    if cfg is not None and ({"preset", "latent_dim"} & getattr(cfg, "_explicit", set())):
        model = cfg.model_config()
    return VAENet(model, params=params), meta


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg: RunConfig) -> int:
    out = Path(cfg.data_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise RuntimeError(f"cannot create {out}: {err}") from err
    size = cfg.model_config().input_size
    records = make_dataset(out, cfg.n_per_class, cfg.split_fracs, cfg.seed, size)
    counts = {s: sum(r["split"] == s for r in records) for s in ("train", "val", "test")}
    logger.info("wrote %d samples to %s (%s)", len(records), out, counts)
    return 0


def _require_dataset(cfg: RunConfig) -> None:
    for split in ("train", "val", "test"):
        if not (Path(cfg.data_dir) / f"{split}.jsonl").exists():
            raise UsageError(f"dataset manifest {cfg.data_dir}/{split}.jsonl not found; run gen-data first")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def cmd_train(cfg: RunConfig, resume: bool = False) -> int:
    _require_dataset(cfg)
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train_config()
    X, y, _ = load_split(cfg.data_dir, "train")
    Xv, yv, _ = load_split(cfg.data_dir, "val")
    metrics_path = out / "metrics.csv"
    last_path, best_path = out / "last.ckpt", out / "best.ckpt"

    if resume:
        if not last_path.exists():
            raise UsageError(f"no checkpoint to resume from at {last_path}")
        net, meta = load_net(last_path)
        state = TrainState.from_dict(meta["state"])
        mode = "a"
    else:
        net = VAENet(cfg.model_config(), seed=cfg.seed)
        state = TrainState()
        mode = "w"
        ckpt.save(best_path, net.params, checkpoint_meta(net, tcfg, state))
    logger.info("training %d parameters from iteration %d", net.n_parameters(), state.iteration)

    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(METRIC_FIELDS)

        def on_row(row):
            writer.writerow([row["iter"]] + [_fmt(row[k]) for k in METRIC_FIELDS[1:]])

        def on_best(st):
            ckpt.save(best_path, net.params, checkpoint_meta(net, tcfg, st))

        try:
            state = train(net, X, y, Xv, yv, tcfg, state, on_row=on_row, on_best=on_best)
        except TrainingDiverged as err:
            # the failing step aborts before the update, so current weights are the last good ones
            ckpt.save(last_path, net.params, checkpoint_meta(net, tcfg, state))
            raise RuntimeError(f"{err}; last good weights saved to {last_path}") from err
    ckpt.save(last_path, net.params, checkpoint_meta(net, tcfg, state))
    logger.info("finished at iteration %d (best val %s at %d)", state.iteration, state.best_val, state.best_iteration)
    return 0


def classification_report(y: np.ndarray, pred: np.ndarray) -> dict:
    cm = np.zeros((2, 2), dtype=int)
    for t, p in zip(y, pred):
        cm[int(t), int(p)] += 1
    per_class = {}
    for c in (0, 1):
        tp = cm[c, c]
        predicted = cm[:, c].sum()
        actual = cm[c, :].sum()
        per_class[str(c)] = {
            "precision": float(tp / predicted) if predicted else 0.0,
            "recall": float(tp / actual) if actual else 0.0,
            "support": int(actual),
        }
    return {
        "accuracy": float(np.trace(cm) / max(cm.sum(), 1)),
        "per_class": per_class,
        "confusion_matrix": cm.tolist(),
    }


def cmd_eval(cfg: RunConfig, checkpoint: str, split: str, out_path: Optional[str]) -> dict:
    _require_dataset(cfg)
    net, _ = load_net(checkpoint, cfg)
    X, y, _ = load_split(cfg.data_dir, split)
    ev = evaluate_split(net, X, y)
    report = classification_report(y, ev["pred"])
    report.update({
        "split": split,
        "n": int(len(y)),
        "mean_dice": ev["dice"],
        "total_loss": ev["total"],
        "checkpoint": str(checkpoint),
    })
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)
    return report


def cmd_navigate(cfg: RunConfig, checkpoint: str, sample_id: str, target: int, out_dir: str) -> Path:
    records = read_manifest(Path(cfg.data_dir) / "manifest.jsonl") if (Path(cfg.data_dir) / "manifest.jsonl").exists() else None
    if records is None:
        raise UsageError(f"dataset manifest {cfg.data_dir}/manifest.jsonl not found")
    match = [r for r in records if r["id"] == sample_id]
    if not match:
        raise UsageError(f"sample {sample_id!r} not in {cfg.data_dir}/manifest.jsonl")
    net, _ = load_net(checkpoint, cfg)
    sample = load_sample(cfg.data_dir, match[0])
    mu0 = net.encode(sample.network_input()[None]).mu.data[0]
    trace = navigate(
        net, mu0, target=target, lam=cfg.nav_lambda, max_iters=cfg.nav_max_iters,
        p_stop=cfg.p_stop, mode=cfg.nav_mode, decode_every=cfg.decode_every,
    )
    meta = {
        "sample_id": sample_id,
        "sample_label": int(match[0]["label"]),
        "checkpoint": str(checkpoint),
        "p_stop": cfg.p_stop,
        "max_iters": cfg.nav_max_iters,
        "seed": cfg.seed,
    }
    out = write_trace(trace, out_dir, meta)
    first, last = trace.steps[0], trace.steps[-1]
    logger.info(
        "%d steps (%s): p%d %.4f -> %.4f, lvm %.0f -> %.0f, lvcv %.0f -> %.0f",
        len(trace.steps) - 1, trace.stop_reason, target, first.probs[target], last.probs[target],
        first.lvm, last.lvm, first.lvcv, last.lvcv,
    )
    return out


def cmd_embed(cfg: RunConfig, checkpoint: str, split: str, trace_dir: Optional[str], out_dir: str):
    _require_dataset(cfg)
    net, _ = load_net(checkpoint, cfg)
    X, y, _ = load_split(cfg.data_dir, split)
    mus = evaluate_split(net, X, y)["mu"]
    trace_mus = None
    if trace_dir:
        if not (Path(trace_dir) / "mu.csv").exists():
            raise UsageError(f"no navigation trace at {trace_dir}")
        trace_mus = read_trace_mus(trace_dir)
    emb = embed_with_trace(mus, trace_mus, k=cfg.k, weights=cfg.weight_mode)
    labels = list(y) + [None] * (0 if trace_mus is None else len(trace_mus))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_embedding_csv(out / "embedding.csv", emb, labels)
    (out / "plot.svg").write_text(scatter_svg(emb.coords, emb.source, labels))
    return emb


# ------------------------------------------------------------------ argparse


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--data", dest="data_dir", help="dataset directory")
    common.add_argument("--preset", choices=["desk32", "paper80"])
    common.add_argument("--latent-dim", dest="latent_dim", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="latentmorph", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--out", dest="data_dir_out", help="output directory (defaults to --data)")
    p.add_argument("--n-per-class", dest="n_per_class", type=int)
    p.add_argument("--split", dest="split_fracs", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))

    p = sub.add_parser("train", parents=[common], help="train the model")
    p.add_argument("--out", dest="checkpoint_dir", help="checkpoint/metrics directory")
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--val-every", dest="val_every", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--clip-grad", dest="clip_grad", action="store_const", const=True)
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", help="report.json path (stdout if omitted)")

    p = sub.add_parser("navigate", parents=[common], help="morph a sample toward a class")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample-id", required=True)
    p.add_argument("--target", type=int, default=1, choices=[0, 1])
    p.add_argument("--lambda", dest="nav_lambda", type=float)
    p.add_argument("--p-stop", dest="p_stop", type=float)
    p.add_argument("--nav-max-iters", dest="nav_max_iters", type=int)
    p.add_argument("--mode", dest="nav_mode", choices=["probability", "logit"])
    p.add_argument("--decode-every", dest="decode_every", type=int)
    p.add_argument("--out", required=True, help="trace directory")

    p = sub.add_parser("embed", parents=[common], help="Laplacian Eigenmaps of latent means")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.add_argument("--trace", help="navigation trace directory to embed jointly")
    p.add_argument("--k", type=int)
    p.add_argument("--weights", dest="weight_mode", choices=["heat", "binary"])
    p.add_argument("--out", required=True, help="output directory")
    return parser


CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    ns = vars(args)
    overrides = {k: v for k, v in ns.items() if k in CONFIG_KEYS}
    if ns.get("data_dir_out"):
        overrides["data_dir"] = ns["data_dir_out"]
    if overrides.get("split_fracs"):
        overrides["split_fracs"] = tuple(overrides["split_fracs"])
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg, resume=args.resume)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.split, args.out)
        elif args.command == "navigate":
            cmd_navigate(cfg, args.checkpoint, args.sample_id, args.target, args.out)
        elif args.command == "embed":
            cmd_embed(cfg, args.checkpoint, args.split, args.trace, args.out)
    except UsageError as err:
        print(f"latentmorph: error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - top-level reporting
        logger.debug("failure", exc_info=True)
        print(f"latentmorph: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
