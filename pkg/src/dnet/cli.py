"""Command-line interface: ``dnet gen-data | train | eval | score | ablate``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
Settings resolve as built-in defaults < ``--config`` file < explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from typing import Optional

import numpy as np

from . import ablation
from .checkpoint import load_checkpoint, save_checkpoint
from .config import apply_overrides, flatten, format_value, read_config_file, split_keys
from .data import generate_dataset, load_split, num_classes
from .errors import CheckpointError, ConfigError, DatasetError, NumericError, ParameterError, ParseError
from .geometry import export_ply_scalar, load_cloud
from .model import DNet, ModelConfig, SET_NAMES
from .optim import AdamState
from .tensor import no_grad
from .training import accuracy, per_class_accuracy, train_epochs

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
METRICS_HEADER = ("epoch", "train_loss", "test_acc")

# run options per command and their defaults; model keys are handled separately
RUN_DEFAULTS = {
    "gen-data": {"seed": 0, "out": None, "data": None, "classes": 8, "per_class": 100, "points": 256,
                 "noise": 0.02, "rotation": "z"},
    "train": {"seed": 0, "data": None, "out": None, "normals": False, "epochs": 30, "batch_size": 16,
              "lr": 1e-3, "metrics": None, "resume": None},
    "eval": {"seed": 0, "data": None, "checkpoint": None, "normals": False, "split": "test"},
    "score": {"seed": 0, "cloud": None, "checkpoint": None, "out": None, "dump_weights": None},
    "ablate": {"seed": 0, "data": None, "out": None, "normals": False, "seeds": 3, "epochs": 30,
               "batch_size": 16, "lr": 1e-3, "tables": "grid,k,n1", "cells": None},
}


class UsageError(Exception):
    pass


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# -- argument parsing ----------------------------------------------------------
def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model overrides")
    g.add_argument("--k", dest="sgc.k", type=int, help="neighbors per point (default 20)")
    g.add_argument("--n1", type=int, help="distinctive set size (default round(0.3125 N))")
    g.add_argument("--n1-ratio", dest="n1_ratio", type=float)
    g.add_argument("--sampling", choices=("sps", "fps", "random"))
    g.add_argument("--fusion", choices=("learned", "max", "mean", "concat"))
    g.add_argument("--sets", help="ALL or a '+'-joined subset of " + ",".join(SET_NAMES))
    g.add_argument("--gate", dest="sgc.gate", choices=("scalar", "channel"))
    g.add_argument("--no-gating", dest="sgc.gating", action="store_const", const=False)
    g.add_argument("--set-width", dest="sgc.set_width", type=int)
    g.add_argument("--num-classes", dest="num_classes", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--data", help="dataset root containing manifest.csv")
    common.add_argument("--out", help="output path")
    common.add_argument("--normals", action="store_const", const=True,
                        help="use 6-column xyz + normal input")

    parser = argparse.ArgumentParser(prog="dnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic shape corpus")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--rotation", choices=("z", "so3", "none"))

    p = sub.add_parser("train", parents=[common], help="train and write the best checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--metrics", help="metrics CSV (default: <out>.metrics.csv)")
    p.add_argument("--resume", help="checkpoint to continue from")
    _model_flags(p)

    p = sub.add_parser("eval", parents=[common], help="report instance and per-class accuracy")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "test"))

    p = sub.add_parser("score", parents=[common], help="export per-point distinction as PLY")
    p.add_argument("--cloud", help="cloud text file")
    p.add_argument("--checkpoint")
    p.add_argument("--dump-weights", dest="dump_weights", help="write fusion weights CSV here")

    p = sub.add_parser("ablate", parents=[common], help="run the ablation grid and sweeps")
    p.add_argument("--seeds", type=int, help="seeds per cell: seed, seed+1, ...")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tables", help="comma list of grid,k,n1")
    p.add_argument("--cells", help="regular expression selecting cell ids")
    _model_flags(p)
    return parser


def resolve(args: argparse.Namespace) -> tuple:
    """``(run_options, model_overrides)`` from defaults, config file and flags."""
    file_values = read_config_file(args.config) if args.config else {}
    file_model, file_run = split_keys(file_values)
    defaults = RUN_DEFAULTS[args.command]
    unknown = set(file_run) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys for '{args.command}' in {args.config}: {sorted(unknown)}")
    run = dict(defaults)
    run.update(file_run)
    model = dict(file_model)
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("command", "config")}
    flag_model, flag_run = split_keys(flags)
    run.update({k: v for k, v in flag_run.items() if k in defaults})
    model.update(flag_model)
    return run, model


def provenance(command: str, run: dict, config: Optional[ModelConfig] = None) -> dict:
    out = {"command": command}
    out.update({k: run[k] for k in sorted(run)})
    if config is not None:
        out.update({f"model.{k}": v for k, v in flatten(config).items()})
    return out


def log_config(prov: dict) -> None:
    for k, v in prov.items():
        log(f"config {k} = {format_value(v)}")


def _require(run: dict, *keys) -> None:
    missing = [k for k in keys if not run.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# -- commands ------------------------------------------------------------------
def cmd_gen_data(run: dict, model: dict) -> int:
    out = run.get("out") or run.get("data")
    if not out:
        raise UsageError("gen-data needs --out <dir>")
    if model:
        raise ConfigError(f"gen-data takes no model options: {sorted(model)}")
    log_config(provenance("gen-data", run))
    path = generate_dataset(out, run["classes"], run["per_class"], run["points"], run["noise"],
                            run["seed"], run["rotation"])
    log(f"wrote {path}")
    return EXIT_OK


def _write_metrics_header(path: str, prov: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        for k, v in prov.items():
            f.write(f"# {k} = {format_value(v)}\n")
        f.write(",".join(METRICS_HEADER) + "\n")


def cmd_train(run: dict, model_overrides: dict) -> int:
    _require(run, "data", "out")
    out = run["out"]
    metrics = run["metrics"] or f"{out}.metrics.csv"
    if run["resume"]:
        ckpt = load_checkpoint(run["resume"])
        config = apply_overrides(ckpt.config, model_overrides) if model_overrides else ckpt.config
        if model_overrides:
            load_checkpoint(run["resume"], expected=config)
        model = ckpt.build_model()
        state = ckpt.optimizer or AdamState.for_params(model.parameters())
        start = int(ckpt.metadata.get("epoch", 0)) + 1
        best = float(ckpt.metadata.get("best_acc", -1.0))
    else:
        overrides = dict(model_overrides)
        overrides.setdefault("use_normals", bool(run["normals"]))
        overrides.setdefault("seed", run["seed"])
        overrides.setdefault("num_classes", num_classes(run["data"]))
        config = apply_overrides(None, overrides)
        model = DNet(config)
        state = AdamState.for_params(model.parameters())
        start, best = 1, -1.0
    if run["normals"] and not config.use_normals:
        raise ConfigError("--normals given but the model was built for xyz input")
    if num_classes(run["data"]) > config.num_classes:
        raise ConfigError(f"dataset has {num_classes(run['data'])} classes, model has {config.num_classes}")
    prov = provenance("train", run, config)
    log_config(prov)
    train = load_split(run["data"], "train", config.use_normals)
    test = load_split(run["data"], "test", config.use_normals)
    if run["epochs"] > 0 and len(test) == 0:
        raise DatasetError("test split is empty; best-accuracy checkpointing needs test clouds")
    if not (run["resume"] and os.path.exists(metrics)):
        _write_metrics_header(metrics, prov)
    meta = {"seed": run["seed"], "epoch": start - 1, "best_acc": best, "data": run["data"]}
    if run["epochs"] == 0:
        save_checkpoint(out, model, state, meta)
        log(f"epochs=0: wrote initial parameters to {out}")
        return EXIT_OK

    def on_epoch(rec, st, improved):
        nonlocal best
        with open(metrics, "a", encoding="utf-8") as f:
            f.write(f"{rec.epoch},{rec.train_loss:.6f},{rec.test_acc:.6f}\n")
        meta.update(epoch=rec.epoch, train_loss=rec.train_loss, test_acc=rec.test_acc)
        if rec.test_acc > best:
            best = rec.test_acc
            meta["best_acc"] = best
            save_checkpoint(out, model, st, meta)
        else:
            meta["best_acc"] = best
        save_checkpoint(f"{out}.last", model, st, meta)
        log(f"epoch {rec.epoch}: loss {rec.train_loss:.4f} test_acc {rec.test_acc:.4f} best {best:.4f}")

    train_epochs(model, train, test, run["epochs"], run["batch_size"], run["lr"], seed=run["seed"],
                 state=state, start_epoch=start, on_epoch=on_epoch)
    return EXIT_OK


def cmd_eval(run: dict, model_overrides: dict) -> int:
    _require(run, "data", "checkpoint")
    ckpt = load_checkpoint(run["checkpoint"])
    config = ckpt.config
    if model_overrides:
        load_checkpoint(run["checkpoint"], expected=apply_overrides(config, model_overrides))
    if run["normals"] and not config.use_normals:
        raise ConfigError("--normals given but the checkpoint was trained on xyz input")
    n_data = num_classes(run["data"])
    if n_data != config.num_classes:
        raise ConfigError(f"dataset has {n_data} classes but the checkpoint predicts {config.num_classes}")
    log_config(provenance("eval", run, config))
    split = load_split(run["data"], run["split"], config.use_normals)
    if len(split) == 0:
        raise DatasetError(f"the {run['split']} split is empty; nothing to evaluate")
    model = ckpt.build_model()
    acc = accuracy(model, split)
    per = per_class_accuracy(model, split, config.num_classes)
    print(f"instance_accuracy {acc:.6f} ({int(round(acc * len(split)))}/{len(split)})")
    for c, a in enumerate(per):
        print(f"class {c} accuracy {'n/a' if np.isnan(a) else f'{a:.6f}'}")
    return EXIT_OK


def cmd_score(run: dict, model_overrides: dict) -> int:
    _require(run, "cloud", "checkpoint", "out")
    ckpt = load_checkpoint(run["checkpoint"])
    config = ckpt.config
    if model_overrides:
        raise ConfigError("score uses the checkpoint config; model overrides are not allowed")
    if config.sampling != "sps" or not config.uses_selection:
        raise ConfigError("distinction scores need sampling=sps and a P_H or P_L branch")
    log_config(provenance("score", run, config))
    cloud = load_cloud(run["cloud"])
    model = ckpt.build_model()
    with no_grad():
        res = model.forward(cloud.features(config.use_normals))
    alpha = res.alpha.data.reshape(-1)
    export_ply_scalar(cloud, alpha, run["out"])
    log(f"wrote {run['out']} ({len(cloud)} vertices)")
    if run["dump_weights"]:
        if res.psi is None:
            raise ConfigError("fusion weights exist only for fusion=learned")
        psi = res.psi.data.reshape(res.psi.shape[0], -1)
        with open(run["dump_weights"], "w", encoding="utf-8", newline="") as f:
            f.write(f"# rows = {','.join(config.sets)}\n")
            w = csv.writer(f, lineterminator="\n")
            w.writerow([f"c{i}" for i in range(psi.shape[1])])
            for row in psi:
                w.writerow([f"{v:.9f}" for v in row])
        log(f"wrote {run['dump_weights']} ({psi.shape[0]} x {psi.shape[1]})")
    return EXIT_OK


def cmd_ablate(run: dict, model_overrides: dict) -> int:
    _require(run, "data", "out")
    tables = tuple(t for t in str(format_value(run["tables"])).split(",") if t)
    bad = set(tables) - set(ablation.TABLES)
    if bad:
        raise UsageError(f"unknown tables {sorted(bad)}; choose from {ablation.TABLES}")
    overrides = dict(model_overrides)
    overrides.setdefault("use_normals", bool(run["normals"]))
    overrides.setdefault("num_classes", num_classes(run["data"]))
    base = apply_overrides(None, overrides)
    prov = provenance("ablate", run, base)
    log_config(prov)
    train = load_split(run["data"], "train", base.use_normals)
    test = load_split(run["data"], "test", base.use_normals)
    if len(test) == 0:
        raise DatasetError("test split is empty")
    seeds = [run["seed"] + i for i in range(int(run["seeds"]))]

    def progress(res):
        status = f"FAILED {res.error}" if res.error else f"{res.mean:.4f} +- {res.std:.4f}"
        log(f"cell {res.cell.cell_id}: {status}")

    results = ablation.run_ablation(base, train, test, seeds, run["epochs"], run["batch_size"], run["lr"],
                                    tables, run["cells"], progress)
    with open(run["out"], "w", encoding="utf-8", newline="") as f:
        f.write(ablation.format_table(results, prov, tables))
    log(f"wrote {run['out']} ({len(results)} cells)")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "score": cmd_score,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        run, model = resolve(args)
        # overflow is detected explicitly (non-finite loss / logits -> exit 3)
        with np.errstate(over="ignore", invalid="ignore"):
            return COMMANDS[args.command](run, model)
    except (UsageError, ConfigError, ParameterError) as e:
        log(f"error: {e}")
        return EXIT_USAGE
    except NumericError as e:
        log(f"numeric failure: {e}")
        return EXIT_NUMERIC
    except (DatasetError, ParseError, CheckpointError, OSError) as e:
        log(f"data error: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
