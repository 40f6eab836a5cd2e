"""Command-line experiment runner.

    ifl-sim run --protocol ifl --rounds 60 --mc-runs 3 --synthetic --out runs/ifl
    ifl-sim compare runs/ifl runs/fsl --threshold 0.6 0.7
    ifl-sim compose runs/ifl/checkpoints/run0/round60 --synthetic --out runs/ifl/post

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .data import DataError
from .experiment import (PROTOCOL_CHOICES, ConfigError, ExperimentConfig, compare_runs,
                         compose_eval, load_data, run_experiment)
from .models import ContractError
from .protocols import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

# flag name -> ExperimentConfig field
RUN_FLAGS = {
    "protocol": "protocol", "clients": "n_clients", "rounds": "rounds",
    "local_steps": "local_steps", "batch_size": "batch_size", "alpha": "alpha",
    "lr_base": "lr_base", "lr_modular": "lr_modular", "lr_fl": "lr_fl", "seed": "seed",
    "mc_runs": "mc_runs", "data_dir": "data_dir", "synthetic": "synthetic",
    "train_limit": "train_limit", "test_limit": "test_limit", "eval_every": "eval_every",
    "checkpoint_every": "checkpoint_every", "threads": "threads", "specs": "specs",
    "update_rule": "update_rule", "mb_unit": "mb_unit", "out": "out",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ifl-sim", description="Interoperable federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train one protocol over Monte Carlo seeds")
    run.add_argument("--config", help="JSON config file; flags override it")
    run.add_argument("--protocol", choices=PROTOCOL_CHOICES)
    run.add_argument("--clients", type=int)
    run.add_argument("--rounds", type=int)
    run.add_argument("--local-steps", type=int)
    run.add_argument("--batch-size", type=int)
    run.add_argument("--alpha", type=float)
    run.add_argument("--lr-base", type=float)
    run.add_argument("--lr-modular", type=float)
    run.add_argument("--lr-fl", type=float)
    run.add_argument("--update-rule", choices=("sequential", "summed"))
    run.add_argument("--seed", type=int, help="master seed")
    run.add_argument("--mc-runs", type=int)
    run.add_argument("--data-dir", help="directory holding the KMNIST IDX files")
    run.add_argument("--synthetic", action="store_true", default=None,
                     help="use generated Gaussian-blob images instead of KMNIST")
    run.add_argument("--train-limit", type=int, help="first N training samples (default 50000)")
    run.add_argument("--test-limit", type=int)
    run.add_argument("--eval-every", type=int)
    run.add_argument("--checkpoint-every", type=int, help="0 keeps only the final round")
    run.add_argument("--threads", type=int, help="client worker threads")
    run.add_argument("--specs", help="JSON architecture file (default: built-in four clients)")
    run.add_argument("--mb-unit", type=float, help="bytes per reported MB (1e6 or 1048576)")
    run.add_argument("--out")

    cmp_ = sub.add_parser("compare", help="merge run directories into an accuracy-vs-MB table")
    cmp_.add_argument("runs", nargs="+")
    cmp_.add_argument("--threshold", type=float, nargs="+", default=[0.9])
    cmp_.add_argument("--out", help="write the merged table as CSV")

    comp = sub.add_parser("compose", help="evaluate all base/modular pairings of checkpoints")
    comp.add_argument("checkpoint_dir")
    comp.add_argument("--data-dir")
    comp.add_argument("--synthetic", action="store_true")
    comp.add_argument("--seed", type=int, default=0)
    comp.add_argument("--test-limit", type=int)
    comp.add_argument("--out", default=".")
    return parser


def resolve_config(args) -> ExperimentConfig:
    values = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"config: {err}") from None
    for flag, field in RUN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[field] = v
    try:
        return ExperimentConfig.from_dict(values)
    except TypeError as err:
        raise ConfigError(str(err)) from None


def _cmd_run(args) -> int:
    config = resolve_config(args)
    summary = run_experiment(config)
    acc_m, acc_s = summary["final_accuracy"]
    mb_m, _ = summary["cumulative_uplink_mb"]
    print(f"{'protocol':<8} {'runs':>4} {'rounds':>6} {'accuracy':>16} {'uplink MB':>10}")
    print(f"{summary['protocol']:<8} {summary['runs']:>4} {config.rounds:>6} "
          f"{acc_m:>9.4f} ± {acc_s:.4f} {mb_m:>10.3f}")
    print(f"artifacts in {config.out}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    table, reach = compare_runs(args.runs, tuple(args.threshold))
    if args.out and table:
        with open(args.out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(table[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(table)
    for protocol, by_t in reach.items():
        for t, mb in by_t.items():
            shown = "unreached" if mb is None else f"{mb:.3f} MB"
            print(f"{protocol:<6} accuracy >= {t:.2f}: {shown}")
    return EXIT_OK


def _cmd_compose(args) -> int:
    if not args.synthetic and not args.data_dir:
        raise ConfigError("data_dir: required unless --synthetic is set")
    config = ExperimentConfig(synthetic=args.synthetic, data_dir=args.data_dir, seed=args.seed,
                              test_limit=args.test_limit, train_limit=1)
    _, test = load_data(config)
    matrix = compose_eval(args.checkpoint_dir, test, args.out)
    for row in matrix:
        print(" ".join(f"{v:.4f}" for v in row))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    handlers = {"run": _cmd_run, "compare": _cmd_compare, "compose": _cmd_compose}
    try:
        return handlers[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContractError, CheckpointError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as err:
        print(f"numeric divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
