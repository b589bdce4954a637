"""Command-line entry point.

Every subcommand reads one JSON config (``--config``), optionally starting
from a named ``--preset``, with ``--set key.path=value`` overrides applied
last.  Outputs are written to ``--out``; the wall-clock time of a run goes
to a ``<out>.timing.json`` sidecar so the output itself stays reproducible.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 dataset error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

import numpy as np

from ..diffnet import NumericalError
from ..localopt import Family
from ..model import load_checkpoint, save_checkpoint
from . import experiments as ex
from .config import ConfigError, load_config
from .data import IdxFormatError
from .training import model_family, retrain_encoder, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_DATASET = 0, 2, 3, 4

log = logging.getLogger("vaegaps")


def _parser():
    p = argparse.ArgumentParser(prog="vaegaps", description="Inference-gap experiments for VAEs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, checkpoint=True):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--preset", help="named preset to start from")
        s.add_argument("--paper-scale", action="store_true", default=None,
                       help="use the full-size preset settings")
        s.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config entry (repeatable)")
        s.add_argument("--out", required=True, help="output path")
        if checkpoint:
            s.add_argument("--checkpoint", required=True, help="trained model checkpoint")
        return s

    add("train", "train a VAE and write a checkpoint", checkpoint=False)
    add("retrain-encoder", "train a new encoder on a frozen decoder")
    add("gaps", "per-point and aggregate inference-gap report")
    add("ais", "forward AIS estimates of log p(x)")
    s = add("bdmc", "BDMC sandwich on data simulated from the model")
    s.add_argument("--intermediates", type=int, help="override eval.ais_intermediate")
    add("local-opt", "per-datapoint optimized bounds for each family")
    add("curve", "train and record bounds at log-spaced epochs (CSV)", checkpoint=False)
    add("grid", "2-D posterior densities on a grid (CSV)")
    return p


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError) as err:
        raise ConfigError(f"cannot load checkpoint {path}: {err}") from err


def _subset(dataset, cfg):
    if cfg.eval.split not in dataset.splits:
        raise ex.DatasetError(f"dataset has no {cfg.eval.split!r} split")
    return ex.eval_subset(dataset, cfg.eval.split, cfg.eval.subset)


def _doc(kind, cfg, **body):
    return {"version": ex.REPORT_VERSION, "kind": kind, "config": cfg.to_dict(), **body}


def run(args):
    cfg = load_config(args.config, args.overrides, args.preset, args.paper_scale)
    dataset = ex.load_dataset(cfg.data)
    cmd = args.command
    status = EXIT_OK

    if cmd in ("train", "retrain-encoder"):
        if cmd == "train":
            res = train(cfg, dataset)
            seed = cfg.train.seed
        else:
            model, _ = _load_model(args.checkpoint)
            res = retrain_encoder(model, dataset, cfg)
            seed = cfg.retrain.seed
        res.model.meta["history"] = res.history
        res.model.meta["diverged"] = res.diverged
        save_checkpoint(res.model, args.out, seed, cfg.to_dict())
        if res.diverged:
            log.error("training diverged; last good checkpoint written to %s", args.out)
            status = EXIT_NUMERICAL
        return status

    if cmd == "curve":
        rows, _ = ex.gaps_over_epochs(cfg, dataset, train)
        ex.write_csv(args.out, ("epoch", "split", "bound", "value"), rows)
        return status

    model, _ = _load_model(args.checkpoint)
    if cmd == "gaps":
        doc = ex.gap_report(model, dataset, cfg)
    elif cmd == "ais":
        points, idx = _subset(dataset, cfg)
        doc = _doc("ais", cfg, per_point=ex.ais_report(model, points, idx, cfg.eval))
    elif cmd == "bdmc":
        doc = _doc("bdmc", cfg, **ex.bdmc_report(model, cfg.eval, args.intermediates))
    elif cmd == "local-opt":
        points, idx = _subset(dataset, cfg)
        fams = list(dict.fromkeys(cfg.eval.families + [model_family(model).value]))
        doc = _doc("local-opt", cfg, per_point=ex.local_opt_report(model, points, idx, cfg.eval,
                                                                    [Family(f) for f in fams]))
    elif cmd == "grid":
        if cfg.eval.grid_index >= len(dataset):
            raise ConfigError("eval.grid_index is outside the dataset")
        table, _ = ex.grid_dump(model, dataset.images[cfg.eval.grid_index], cfg.eval)
        ex.write_csv(args.out, ex.GRID_COLUMNS, (tuple(float(v) for v in r) for r in table))
        return status
    else:  # pragma: no cover - argparse restricts the choices
        raise ConfigError(f"unknown command {cmd!r}")
    ex.write_json(args.out, doc)
    return status


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.time()
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            status = run(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ex.DatasetError, IdxFormatError) as err:
        print(f"dataset error: {err}", file=sys.stderr)
        return EXIT_DATASET
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    with open(args.out + ".timing.json", "w") as fh:
        json.dump({"command": args.command, "wall_clock_s": time.time() - start}, fh)
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
