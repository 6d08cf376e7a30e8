"""Command-line entry point.

Every pipeline stage is a subcommand reading and writing one run
directory; ``run-all`` chains them and ``report`` concatenates the CSV
rows of finished runs.  Configuration comes from an optional
``--config`` file plus repeatable ``--set key=value`` overrides.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

import argparse
import sys

from .config import ConfigurationError, build_config, run_id
from .experiment import (ConcurrencyError, StageError, collect_report_lines,
                         resolve_run_dir, run_experiment, run_stage)

STAGE_COMMANDS = {
    "gen-corpus": "corpus",
    "train-surrogate": "surrogate",
    "make-triggers": "triggers",
    "poison": "poison",
    "train-victim": "victim",
    "evaluate": "evaluate",
    "defend": "defend",
}

STAGE_HELP = {
    "gen-corpus": "generate both corpora and the shared vocabulary",
    "train-surrogate": "train the attacker's model on its own corpus",
    "make-triggers": "materialize the poison set and triggered test set",
    "poison": "mix the poison set into the victim's training file",
    "train-victim": "train the victim on the injected corpus",
    "evaluate": "measure attack success, clean BLEU, and the flatness probe",
    "defend": "run the detectors and retrain on the filtered corpus",
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stabforge",
        description="identifier-renaming backdoor pipeline for seq2seq code models")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(sp):
        sp.add_argument("--config", metavar="FILE",
                        help="key=value config file (defaults apply without one)")
        sp.add_argument("--set", action="append", default=[], dest="overrides",
                        metavar="KEY=VALUE", help="override one config entry")

    for command, help_text in STAGE_HELP.items():
        add_config_args(sub.add_parser(command, help=help_text))
    add_config_args(sub.add_parser(
        "run-all", help="run every stage and write the final report"))

    report = sub.add_parser(
        "report", help="concatenate report CSV rows across run directories")
    report.add_argument("runs", nargs="+", metavar="RUN_DIR",
                        help="run directories holding report.csv")
    report.add_argument("--out", default="-", metavar="FILE",
                        help="output file ('-' prints to stdout)")
    return parser


def cmd_report(args):
    try:
        lines = collect_report_lines(args.runs)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "report":
        return cmd_report(args)
    try:
        cfg = build_config(args.config, args.overrides)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    run = resolve_run_dir(cfg)
    try:
        if args.command == "run-all":
            report = run_experiment(cfg)
            print(f"run {report.run_id} complete in {run}")
            print(",".join(report.row().values()))
        else:
            run_stage(STAGE_COMMANDS[args.command], run, cfg)
            print(f"{args.command} done in {run} (run {run_id(cfg)})")
    except (StageError, ConcurrencyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
