"""``advseg`` command-line entry point.

All commands share one working directory (``--out``)::

    data/{train,val,test}/            synthetic triplets (gen-data)
    data/shift-{train,val,test}/      shifted triplets for adapter fine-tuning
    run.cfg, checkpoint.ckpt, train_log.csv          (train, mode=pretrain)
    adapter.ckpt, adapter_log.csv                    (train, mode=adapter-finetune)
    eval.csv/json, attack-<kind>.csv/json, report.csv/json, images/
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .. import data as D
from ..model import CheckpointError, load_checkpoint, save_checkpoint
from ..tensor import TensorError
from .config import ConfigError, RunConfig, dump_config_text, load_config_file, preset
from .evaluate import attack_sweep, digest_bytes, evaluate
from .train import TrainingDiverged, train

log = logging.getLogger("advseg")

COMMANDS = ("gen-data", "train", "eval", "attack", "sweep")
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage().rstrip()}\n{self.prog}: error: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="key = value config file with [model]/[train]/[data]/[attack]")
    p.add_argument("--seed", type=int, help="seed for data, init, shuffling and attack noise")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--attack", choices=("fgsm", "pgd"), help="restrict attacks to one kind")
    p.add_argument("--epsilon", type=float, nargs="+", metavar="E", help="perturbation budgets")
    p.add_argument("--steps", type=int, metavar="T", help="PGD iterations")
    p.add_argument("--alpha", type=float, metavar="A", help="PGD step size")
    p.add_argument("--random-start", action="store_true", help="start PGD from uniform noise in the ball")
    p.add_argument("--out", metavar="DIR", default="advseg-run", help="working directory")
    p.add_argument("--dump-images", type=int, metavar="N", help="samples to dump per attack row")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advseg", description="Adversarial robustness harness for a toy text-conditioned "
                                                "segmentation model.")
    sub = parser.add_subparsers(dest="command", metavar="<" + "|".join(COMMANDS) + ">", parser_class=_Parser)
    helps = {
        "gen-data": "write synthetic train/val/test triplets",
        "train": "pretrain the model or fine-tune its adapters",
        "eval": "clean DSC/IoU on the test split",
        "attack": "clean row plus one attack kind over the epsilon list",
        "sweep": "clean row plus FGSM and PGD over the epsilon list",
    }
    for name in COMMANDS:
        _add_common(sub.add_parser(name, help=helps[name], description=helps[name]))
    return parser


def resolve_config(args) -> RunConfig:
    cfg = preset(args.preset)
    if args.config:
        cfg = load_config_file(args.config, cfg)
    seed = args.seed if args.seed is not None else cfg.train.seed
    cfg = cfg.with_seed(seed)
    sweep = cfg.attack
    updates = {}
    if args.epsilon is not None:
        if any(e < 0 for e in args.epsilon):
            raise ConfigError("epsilon must be >= 0")
        updates["epsilons"] = tuple(args.epsilon)
    if args.steps is not None:
        updates["steps"] = args.steps
    if args.alpha is not None:
        updates["alpha"] = args.alpha
    if args.random_start:
        updates["random_start"] = True
    if args.dump_images is not None:
        updates["dump_images"] = args.dump_images
    if args.attack is not None:
        updates["attacks"] = (args.attack,)
    if updates:
        cfg = dataclasses.replace(cfg, attack=dataclasses.replace(sweep, **updates))
    if cfg.attack.steps < 1 or (cfg.attack.alpha is not None and cfg.attack.alpha <= 0):
        raise ConfigError("PGD needs steps >= 1 and alpha > 0")
    return cfg


# -- commands -------------------------------------------------------------------

def _dataset_specs(cfg: RunConfig):
    d, m = cfg.data, cfg.model
    common = dict(image_size=m.image_size, context_length=m.context_length, distractor_prob=d.distractor_prob)
    base = D.DatasetSpec(n_samples=d.n_train + d.n_val + d.n_test, noise_level=d.noise_level,
                         contrast=d.contrast, seed=cfg.seed, id_prefix="s", **common)
    shifted = D.DatasetSpec(n_samples=d.shift_n_train + d.n_val + d.n_test, noise_level=d.shift_noise_level,
                            contrast=d.shift_contrast, invert=d.shift_invert, seed=cfg.seed + 1,
                            id_prefix="t", **common)
    return base, shifted


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    base, shifted = _dataset_specs(cfg)
    d = cfg.data
    for prefix, spec, n_train in (("", base, d.n_train), ("shift-", shifted, d.shift_n_train)):
        parts = D.split(D.generate(spec), n_train, d.n_val)
        for name, samples in zip(("train", "val", "test"), parts):
            D.save_triplets(samples, out / "data" / f"{prefix}{name}")
            log.info("wrote %d samples to %s", len(samples), out / "data" / f"{prefix}{name}")


def _load_split(cfg: RunConfig, out: Path, name: str):
    return D.load_triplets(out / "data" / name, D.DEFAULT_VOCAB, cfg.model.image_size, cfg.model.context_length)


def _write_log(path: Path, logs) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "lr", "train_loss", "val_dsc"))
        for e in logs:
            w.writerow((e.epoch, repr(e.lr), repr(e.train_loss), repr(e.val_dsc)))


def cmd_train(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if cfg.train.mode == "pretrain":
        params, logs = train(_load_split(cfg, out, "train"), cfg.model, cfg.train, _load_split(cfg, out, "val"))
        save_checkpoint(out / "checkpoint.ckpt", params)
        _write_log(out / "train_log.csv", logs)
        (out / "run.cfg").write_text(dump_config_text(cfg), encoding="utf-8")
    else:
        init = load_checkpoint(out / "checkpoint.ckpt", cfg.model)
        params, logs = train(_load_split(cfg, out, "shift-train"), cfg.model, cfg.train,
                             _load_split(cfg, out, "shift-val"), init=init)
        save_checkpoint(out / "adapter.ckpt", params)
        _write_log(out / "adapter_log.csv", logs)
    log.info("final val DSC %.4f", logs[-1].val_dsc)


def _eval_inputs(cfg: RunConfig, out: Path):
    if cfg.train.mode == "adapter-finetune":
        ckpt, split, name = out / "adapter.ckpt", "shift-test", "synthetic-shift-test"
    else:
        ckpt, split, name = out / "checkpoint.ckpt", "test", "synthetic-test"
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}; run `advseg train` first")
    blob = ckpt.read_bytes()
    params = load_checkpoint(ckpt, cfg.model)
    provenance = {"seed": cfg.seed, "config_digest": cfg.digest(), "checkpoint_digest": digest_bytes(blob),
                  "checkpoint": ckpt.name, "split": split}
    return params, _load_split(cfg, out, split), name, provenance


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    params, samples, name, prov = _eval_inputs(cfg, out)
    report = evaluate(params, samples, cfg.model, cfg.train.loss_weights, name, cfg.seed,
                      cfg.attack.batch_size, prov)
    report.write(out, "eval")
    sys.stdout.write(report.to_csv())


def cmd_sweep(cfg: RunConfig, out: Path, stem: str) -> None:
    params, samples, name, prov = _eval_inputs(cfg, out)
    prov["attack"] = {k: v for k, v in cfg.to_dict()["attack"].items()}
    report = attack_sweep(params, samples, cfg.model, cfg.attack, cfg.train.loss_weights, name, cfg.seed,
                          dump_dir=out / "images", provenance=prov)
    report.write(out, stem)
    sys.stdout.write(report.to_csv())


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError(parser.format_usage().rstrip() + "\nadvseg: error: a command is required")
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"advseg: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(args.out)
    try:
        if args.command == "gen-data":
            cmd_gen_data(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "eval":
            cmd_eval(cfg, out)
        elif args.command == "attack":
            kind = args.attack or "fgsm"
            cfg = dataclasses.replace(cfg, attack=dataclasses.replace(cfg.attack, attacks=(kind,)))
            cmd_sweep(cfg, out, f"attack-{kind}")
        else:
            cmd_sweep(cfg, out, "report")
    except (D.DataError, CheckpointError, TensorError, TrainingDiverged, OSError, ValueError) as exc:
        print(f"advseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
