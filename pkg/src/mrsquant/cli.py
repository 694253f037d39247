"""``mrsquant`` command line."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import harness
from .basis import BasisError
from .datagen import DatasetFormatError
from .nnet.network import WeightsFormatError

log = logging.getLogger("mrsquant")

COMMANDS = {
    "gen-basis": "copy and validate the basis file into the run directory",
    "gen-data": "generate train/test datasets for every SNR",
    "train": "train one network per SNR",
    "fit": "run the VARPRO-LM baseline on every test set",
    "eval": "score both methods: table and scatter CSVs",
    "learning-curve": "train on nested training subsets and report loss vs size",
    "run": "gen-basis, gen-data, train, fit and eval in order",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrsquant", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="experiment config (JSON); defaults if omitted")
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--seed", type=int, help="global seed (overrides the config)")
        sp.add_argument("--workers", type=int, default=1,
                        help="parallel workers for generation and fitting (1: bit-exact)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "learning-curve":
            sp.add_argument("--sizes", type=int, nargs="+", help="training-set sizes")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = harness.load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        run = harness.Run(args.out, cfg, args.workers)

        def progress(it, train_loss, val_loss):
            log.info("iter %d  train %.5f  val %.5f", it, train_loss, val_loss)

        cmd = args.command
        if cmd == "gen-basis":
            harness.cmd_gen_basis(run)
        elif cmd == "gen-data":
            harness.cmd_gen_data(run)
        elif cmd == "train":
            harness.cmd_train(run, progress)
        elif cmd == "fit":
            harness.cmd_fit(run)
        elif cmd == "eval":
            harness.cmd_eval(run)
        elif cmd == "learning-curve":
            points = harness.cmd_learning_curve(run, args.sizes, progress)
            if not harness.gap_non_increasing(points):
                log.warning("generalization gap grows with training-set size")
        elif cmd == "run":
            harness.cmd_run(run, progress)
    except (harness.HarnessError, BasisError, DatasetFormatError, WeightsFormatError) as exc:
        print(f"mrsquant {args.command}: {exc}", file=sys.stderr)
        return 2
    for line in run.log:
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
