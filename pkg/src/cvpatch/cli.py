"""Command-line entry point: train, eval, describe, verify.

Settings resolve as built-in defaults, then a JSON config file (--config),
then explicit flags; flags win.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import checks
from . import data as D
from . import objectives as obj
from .autograd import Tape
from .ctensor import save_tensor
from .models import ConfigError, ModelConfig, build_model, load_model, make_optimizer, save_model

FORMATS = ("phototour", "hpatches", "synthetic", "tensor")
DATA_SEED_OFFSET = 7919
EVAL_SEED_OFFSET = 104729
CHECKPOINT_NAME = "checkpoint.cxck"


class RunError(Exception):
    """Invalid run configuration or a failed run; reported as a diagnostic exit."""


@dataclass
class RunConfig:
    model: ModelConfig
    data: str | None = None
    format: str = "synthetic"
    batch_size: int = 128
    steps: int = 2000
    eval_every: int = 0
    checkpoint_every: int = 0
    seed: int = 0
    out: str = "run"
    split_file: str | None = None
    train_splits: tuple = ("a",)
    eval_splits: tuple = ()
    pairs: str | None = None
    eval_pairs: int = 2000
    synthetic_ids: int = 64
    synthetic_per_id: int = 8
    synthetic_sigma: float = 0.05
    heldout_ids: int = 64
    fixed_samples: int = 0

    def validate(self, need_data: bool = True) -> None:
        if self.batch_size < 2:
            raise RunError(f"batch size must be at least 2 for batch norm, got {self.batch_size}")
        if self.steps < 0:
            raise RunError("steps must be non-negative")
        if self.format not in FORMATS:
            raise RunError(f"unknown data format {self.format!r}")
        if need_data and self.format != "synthetic":
            if not self.data or not os.path.exists(self.data):
                raise RunError(f"data path {self.data!r} does not exist")
        if self.format == "hpatches" and not (self.split_file and os.path.isfile(self.split_file)):
            raise RunError(f"hpatches needs an existing --split-file, got {self.split_file!r}")
        if self.pairs and not os.path.isfile(self.pairs):
            raise RunError(f"pairs file {self.pairs!r} does not exist")

    def reproducible_dict(self) -> dict:
        """Settings that determine the result; paths are left out."""
        d = dataclasses.asdict(self)
        for key in ("model", "data", "out", "split_file", "pairs"):
            d.pop(key)
        return d


class MetricsLog:
    """Append-only CSV of (step, loss, lr, wall_time, eval_fpr95)."""

    HEADER = ("step", "loss", "lr", "wall_time", "eval_fpr95")

    def __init__(self, path):
        self.path = path
        self.rows: list[tuple] = []
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(self.HEADER)

    def append(self, step, loss, lr, wall_time, fpr=None):
        if self.rows and step <= self.rows[-1][0]:
            raise ValueError(f"metrics step {step} does not follow {self.rows[-1][0]}")
        row = (int(step), float(loss), float(lr), float(wall_time), fpr)
        self.rows.append(row)
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([row[0], repr(row[1]), repr(row[2]), f"{row[3]:.3f}",
                                    "" if fpr is None else repr(float(fpr))])


# -- argument handling -------------------------------------------------------------

# flag dest -> RunConfig field, or "model.<field>" for ModelConfig
_FIELDS = {
    "arch": "model.architecture", "bn": "model.bn_mode", "input": "model.input_conversion",
    "distance": "model.distance_mode", "loss": "model.loss_form",
    "decision": "model.decision_mode", "init": "model.init_scheme", "dtype": "model.dtype",
    "lr": "model.lr", "stem_channels": "model.stem_channels",
    "block_channels": "model.block_channels", "fc_width": "model.fc_width",
    "descriptor_dim": "model.descriptor_dim", "patch_size": "model.patch_size",
    "weight_decay": "model.weight_decay", "grad_clip": "model.grad_clip",
    "data": "data", "format": "format", "batch": "batch_size", "steps": "steps",
    "eval_every": "eval_every", "checkpoint_every": "checkpoint_every", "seed": "seed",
    "out": "out", "split_file": "split_file", "train_splits": "train_splits",
    "eval_splits": "eval_splits", "pairs": "pairs", "eval_pairs": "eval_pairs",
    "synthetic_ids": "synthetic_ids", "synthetic_per_id": "synthetic_per_id",
    "synthetic_sigma": "synthetic_sigma", "heldout_ids": "heldout_ids",
    "fixed_samples": "fixed_samples",
}


def _int_list(s):
    return tuple(int(v) for v in str(s).split(",") if v.strip())


def _str_list(s):
    return tuple(v.strip() for v in str(s).split(",") if v.strip())


def _add_data_flags(p):
    p.add_argument("--data", help="dataset directory or patch-store file")
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--split-file", help="HPatches split file (JSON name -> sequences)")
    p.add_argument("--train-splits", type=_str_list, help="comma-separated split names")
    p.add_argument("--eval-splits", type=_str_list, help="comma-separated split names")
    p.add_argument("--pairs", help="match file listing evaluation pairs")
    p.add_argument("--eval-pairs", type=int, help="number of sampled evaluation pairs")
    p.add_argument("--synthetic-ids", type=int)
    p.add_argument("--synthetic-per-id", type=int)
    p.add_argument("--synthetic-sigma", type=float)
    p.add_argument("--heldout-ids", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvpatch", description="Complex-valued patch matching")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a CCN or CTN model")
    tr.add_argument("--config", help="JSON file of settings; flags override it")
    tr.add_argument("--arch", choices=("ccn", "ctn"))
    tr.add_argument("--bn", choices=("per_component", "covariance"))
    tr.add_argument("--input", choices=("dft", "zero_imag"))
    tr.add_argument("--distance", choices=obj.DISTANCE_MODES)
    tr.add_argument("--loss", choices=obj.LOSS_FORMS)
    tr.add_argument("--decision", choices=("siamese", "pseudo_siamese"))
    tr.add_argument("--init", choices=("rayleigh", "glorot"))
    tr.add_argument("--dtype", choices=("float64", "float32"))
    tr.add_argument("--batch", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--weight-decay", type=float)
    tr.add_argument("--grad-clip", type=float)
    tr.add_argument("--steps", type=int)
    tr.add_argument("--eval-every", type=int)
    tr.add_argument("--checkpoint-every", type=int)
    tr.add_argument("--stem-channels", type=int)
    tr.add_argument("--block-channels", type=_int_list, help="e.g. 32,64,128")
    tr.add_argument("--fc-width", type=int)
    tr.add_argument("--descriptor-dim", type=int)
    tr.add_argument("--patch-size", type=int)
    tr.add_argument("--fixed-samples", type=int,
                    help="draw this many triplets/pairs once and cycle through them")
    tr.add_argument("--out", help="output directory")
    _add_data_flags(tr)

    ev = sub.add_parser("eval", help="FPR95 and ROC of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--arch", choices=("ccn", "ctn"), help="expected architecture")
    ev.add_argument("--split", choices=("heldout", "train"), default="heldout",
                    help="synthetic split to evaluate")
    ev.add_argument("--random-labels", action="store_true",
                    help="replace pair labels by coin flips (chance baseline)")
    ev.add_argument("--out", help="directory for roc.csv")
    _add_data_flags(ev)

    de = sub.add_parser("describe", help="export CTN descriptors")
    de.add_argument("--checkpoint", required=True)
    de.add_argument("--split", choices=("heldout", "train"), default="heldout")
    de.add_argument("--out", required=True, help="descriptor file path")
    _add_data_flags(de)

    ve = sub.add_parser("verify", help="run the built-in oracle suites")
    ve.add_argument("--suite", action="append", choices=tuple(checks.SUITES),
                    help="run only this suite (repeatable)")
    ve.add_argument("--seed", type=int, default=0)
    return parser


def _set(cfg: RunConfig, model: dict, path: str, value):
    if path.startswith("model."):
        model[path[6:]] = value
    else:
        setattr(cfg, path, value)


def resolve_run_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig(model=ModelConfig())
    model = cfg.model.to_dict()
    layered = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                layered.update(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise RunError(f"cannot read config file {args.config}: {e}") from None
        unknown = set(layered) - set(_FIELDS)
        if unknown:
            raise RunError(f"unknown config keys: {sorted(unknown)}")
    layered.update({k: v for k, v in vars(args).items() if k in _FIELDS and v is not None})
    for key, value in layered.items():
        if key in ("block_channels", "train_splits", "eval_splits") and isinstance(value, str):
            value = _int_list(value) if key == "block_channels" else _str_list(value)
        _set(cfg, model, _FIELDS[key], value)
    model["seed"] = cfg.seed
    try:
        cfg.model = ModelConfig.from_dict(model)
    except (ConfigError, TypeError) as e:
        raise RunError(f"invalid model configuration: {e}") from None
    return cfg


# -- data -----------------------------------------------------------------------------


def load_store(cfg: RunConfig, role: str = "train") -> D.PatchStore:
    """Patch store for training ("train") or evaluation ("heldout")."""
    try:
        if cfg.format == "synthetic":
            train, held = D.synth_splits(cfg.synthetic_ids, cfg.synthetic_per_id,
                                         cfg.synthetic_sigma, cfg.seed, cfg.model.patch_size,
                                         cfg.heldout_ids)
            return train if role == "train" else held
        if cfg.format == "phototour":
            return D.load_phototour(cfg.data)
        if cfg.format == "hpatches":
            splits = cfg.train_splits if role == "train" else (cfg.eval_splits or cfg.train_splits)
            return D.load_hpatches(cfg.data, cfg.split_file, splits)
        return D.PatchStore.load(cfg.data)
    except (D.IngestionError, OSError) as e:
        raise RunError(str(e)) from None


def eval_pairs(cfg: RunConfig, store: D.PatchStore, seed_offset: int = EVAL_SEED_OFFSET):
    if cfg.pairs:
        try:
            return D.load_match_file(cfg.pairs, store)
        except D.IngestionError as e:
            raise RunError(str(e)) from None
    return D.sample_pairs(store, cfg.eval_pairs, 0.5, np.random.default_rng(cfg.seed + seed_offset))


# -- evaluation -----------------------------------------------------------------------


def pair_scores(model, store: D.PatchStore, pairs):
    """(scores, labels, polarity) for a list of pairs."""
    a, b, labels = (np.asarray(c) for c in zip(*pairs))
    if model.config.architecture == "ccn":
        batch, _ = store.pair_batch(pairs)
        return model.score(batch), labels, "larger_is_match"
    used = np.unique(np.concatenate([a, b]))
    desc = model.describe(store.patches[used])
    pos = np.searchsorted(used, [a, b])
    f1, f2 = desc[pos[0]], desc[pos[1]]
    return obj.complex_distance(f1, f2, model.config.distance_mode), labels, "smaller_is_match"


def evaluate(model, store, pairs, roc_path=None):
    if store.patch_size != model.config.patch_size:
        raise RunError(f"dataset patches are {store.patch_size}px, model expects "
                       f"{model.config.patch_size}px")
    scores, labels, polarity = pair_scores(model, store, pairs)
    fpr = obj.fpr95(scores, labels, polarity)
    if roc_path:
        obj.write_roc_csv(roc_path, obj.roc_table(scores, labels, polarity))
    return fpr


# -- commands ------------------------------------------------------------------------


class BatchSource:
    """Training batches: fresh samples each step, or a fixed pool cycled in order."""

    def __init__(self, store, arch, batch_size, rng, fixed=0):
        self.store, self.arch, self.batch, self.rng = store, arch, batch_size, rng
        self.pool = self._draw(fixed) if fixed else None
        self.pos = 0

    def _draw(self, count):
        if self.arch == "ctn":
            return D.sample_triplets(self.store, count, self.rng)
        return D.sample_pairs(self.store, count, 0.5, self.rng)

    def next(self):
        if self.pool is None:
            return self._draw(self.batch)
        idx = [(self.pos + k) % len(self.pool) for k in range(self.batch)]
        self.pos = (self.pos + self.batch) % len(self.pool)
        return [self.pool[i] for i in idx]


def train_step(model, optimizer, store, samples):
    tape = Tape()
    cfg = model.config
    if cfg.architecture == "ctn":
        f1, f2, fn = model.forward_train(tape, *store.triplet_batch(samples))
        loss = obj.softpn_loss(f1, f2, fn, cfg.distance_mode, cfg.loss_form)
    else:
        x, y = store.pair_batch(samples)
        loss = obj.mse_pair_loss(model.forward(tape, x), y)
    value = float(loss.value)
    if math.isfinite(value):
        optimizer.zero_grad()
        tape.backward(loss)
        optimizer.step()
    tape.release()
    return value


def cmd_train(cfg: RunConfig, log=print):
    """Train; returns (model, metrics, final fpr95 or None)."""
    cfg.validate()
    os.makedirs(cfg.out, exist_ok=True)
    store = load_store(cfg, "train")
    if store.patch_size != cfg.model.patch_size:
        raise RunError(f"dataset patches are {store.patch_size}px, config says "
                       f"{cfg.model.patch_size}px")
    model = build_model(cfg.model)
    opt = make_optimizer(model)
    source = BatchSource(store, cfg.model.architecture, cfg.batch_size,
                         np.random.default_rng(cfg.seed + DATA_SEED_OFFSET), cfg.fixed_samples)
    metrics = MetricsLog(os.path.join(cfg.out, "metrics.csv"))
    held = load_store(cfg, "heldout")
    pairs = eval_pairs(cfg, held)
    meta = {"run": cfg.reproducible_dict()}
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        loss = train_step(model, opt, store, source.next())
        if not math.isfinite(loss):
            raise RunError(f"non-finite loss {loss} at step {step}")
        fpr = None
        if cfg.eval_every and step % cfg.eval_every == 0 and step != cfg.steps:
            fpr = evaluate(model, held, pairs)
            log(f"step {step} loss {loss:.6f} fpr95 {fpr:.4f}")
        metrics.append(step, loss, opt.lr, time.perf_counter() - t0, fpr)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_model(os.path.join(cfg.out, f"checkpoint_step{step}.cxck"), model, opt, step, meta)
    fpr = evaluate(model, held, pairs, os.path.join(cfg.out, "roc.csv"))
    if metrics.rows:
        last = metrics.rows[-1]
        metrics.rows[-1] = last[:4] + (fpr,)
        _rewrite(metrics)
    save_model(os.path.join(cfg.out, CHECKPOINT_NAME), model, opt, cfg.steps, meta)
    return model, metrics, fpr


def _rewrite(metrics: MetricsLog):
    with open(metrics.path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MetricsLog.HEADER)
        for s, loss, lr, wall, fpr in metrics.rows:
            w.writerow([s, repr(loss), repr(lr), f"{wall:.3f}", "" if fpr is None else repr(float(fpr))])


def _data_config_for(args, model_cfg: ModelConfig, stored_run: dict | None) -> RunConfig:
    """Dataset settings for eval/describe: the training run's, overridden by flags."""
    base = RunConfig(model=model_cfg)
    for k, v in (stored_run or {}).items():
        if hasattr(base, k) and k != "model":
            setattr(base, k, tuple(v) if isinstance(v, list) else v)
    cfg = resolve_run_config(args, base)
    cfg.model = model_cfg
    return cfg


def cmd_eval(args, log=print) -> float:
    try:
        model, meta = load_model(args.checkpoint)
    except (ConfigError, OSError, ValueError) as e:
        raise RunError(f"cannot load checkpoint {args.checkpoint}: {e}") from None
    arch = model.config.architecture
    if args.arch and args.arch != arch:
        raise RunError(f"checkpoint holds a {arch.upper()} model, --arch asks for {args.arch}")
    cfg = _data_config_for(args, model.config, meta.get("run"))
    cfg.validate()
    store = load_store(cfg, "train" if args.split == "train" else "heldout")
    pairs = eval_pairs(cfg, store)
    if args.random_labels:
        flips = np.random.default_rng(cfg.seed + EVAL_SEED_OFFSET + 1).random(len(pairs)) < 0.5
        pairs = [D.PatchPair(p.a, p.b, int(f)) for p, f in zip(pairs, flips)]
    roc = None
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        roc = os.path.join(args.out, "roc.csv")
    return evaluate(model, store, pairs, roc)


def cmd_describe(args) -> str:
    try:
        model, meta = load_model(args.checkpoint)
    except (ConfigError, OSError, ValueError) as e:
        raise RunError(f"cannot load checkpoint {args.checkpoint}: {e}") from None
    if model.config.architecture != "ctn":
        raise RunError("descriptors need a CTN checkpoint; a CCN scores pairs and has no "
                       "per-patch embedding")
    cfg = _data_config_for(args, model.config, meta.get("run"))
    cfg.validate()
    store = load_store(cfg, "train" if args.split == "train" else "heldout")
    desc = model.describe(store.patches)
    save_tensor(args.out, desc)
    with open(args.out + ".index.txt", "w") as f:
        f.write("row point_id\n")
        for row, pid in enumerate(store.point_ids.tolist()):
            f.write(f"{row} {pid}\n")
    return args.out


def cmd_verify(names=None, seed=0, log=print) -> bool:
    results = checks.run_all(seed=seed, names=names)
    for r in results:
        log(r.line())
        for failure in r.failures[:10]:
            log(f"    {failure}")
    ok = all(r.passed for r in results)
    log("all suites passed" if ok else "some suites FAILED")
    return ok


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = resolve_run_config(args)
            _, _, fpr = cmd_train(cfg)
            print(f"fpr95={fpr!r}")
        elif args.command == "eval":
            print(f"fpr95={cmd_eval(args)!r}")
        elif args.command == "describe":
            print(cmd_describe(args))
        else:
            return 0 if cmd_verify(args.suite, args.seed) else 1
    except RunError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
