"""
Bambino Engine: Command Line v1.0
==================================
Subcommands:
  gen-data                                    Synthetic L1/L2 corpora, tokenizer, task files
  pretrain  --role {baby,parent}              Pure causal-LM pretraining of one role
  continual --mode {bambino,no-ppo,no-alternating}
                                              Continual L2 training of the baby
  eval      --checkpoint DIR [--baseline DIR]
                                              Perplexities, task accuracies, deltas
  report    [--reports FILE ...]              Multi-seed ablation summary

Common flags: --config PATH, --seed INT, --out DIR, --verbose, --quiet.

Each command prints one JSON summary line on stdout; logs and progress go to
stderr. Exit status 1 on a pipeline error, 2 on a usage error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from bambino_engine import BambinoError, ExperimentConfig, load_config
from bambino_engine.config import apply_overrides
from bambino_engine.core.evalkit import EvalReport
from bambino_engine.core.kvtext import atomic_write_bytes
from bambino_engine.tools import (
    cmd_continual, cmd_eval, cmd_gen_data, cmd_pretrain, cmd_report,
)
from bambino_engine.tools.ablation import AblationSummary
from pdf_report import generate_ablation_pdf, generate_eval_pdf

logger = logging.getLogger("bambino_engine.cli")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


# ── Argument parsing ───────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config file)")
    common.add_argument("--out", help="output root (overrides paths.out_dir)")
    noise = common.add_mutually_exclusive_group()
    noise.add_argument("--verbose", action="store_true", help="debug logging")
    noise.add_argument("--quiet", action="store_true", help="warnings only, no progress bars")

    parser = argparse.ArgumentParser(
        prog="bambino",
        description="Continual pretraining with interleaved causal-LM and PPO feedback steps.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write synthetic corpora and tokenizer")

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the baby or the parent")
    p.add_argument("--role", choices=["baby", "parent"], required=True)
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")

    p = sub.add_parser("continual", parents=[common], help="continual training on L2")
    p.add_argument("--mode", choices=["bambino", "no-ppo", "no-alternating"], default="bambino")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory or run directory")
    p.add_argument("--baseline", help="checkpoint to measure acquisition and forgetting against")
    p.add_argument("--name", help="report name (default eval-<run>-seed<seed>)")
    p.add_argument("--pdf", action="store_true", help="also write a printable PDF")

    p = sub.add_parser("report", parents=[common], help="summarise evaluation reports across seeds")
    p.add_argument("--reports", nargs="+", help="report files (default: every report in reports/)")
    p.add_argument("--pdf", action="store_true", help="also write a printable PDF")
    return parser


def configure_logging(verbose: bool, quiet: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO)


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    return apply_overrides(config, seed=args.seed, out_dir=args.out)


# ── Dispatch ───────────────────────────────────────────────────

def _with_pdf(summary: dict, data: bytes) -> dict:
    target = Path(summary["files"][0]).with_suffix(".pdf")
    atomic_write_bytes(target, data)
    summary["files"].append(str(target))
    return summary


def run(args: argparse.Namespace) -> dict:
    config = resolve_config(args)
    progress = not args.quiet and sys.stderr.isatty()

    if args.command == "gen-data":
        return cmd_gen_data(config)
    if args.command == "pretrain":
        return cmd_pretrain(config, args.role, resume=args.resume, progress=progress)
    if args.command == "continual":
        return cmd_continual(config, args.mode, resume=args.resume, progress=progress)
    if args.command == "eval":
        summary = cmd_eval(config, args.checkpoint, baseline=args.baseline, name=args.name)
        if args.pdf:
            report = EvalReport(**summary["report"])
            summary = _with_pdf(summary, generate_eval_pdf(report, Path(summary["files"][0]).stem))
        return summary
    if args.command == "report":
        summary = cmd_report(config, args.reports)
        if args.pdf:
            summary = _with_pdf(summary, generate_ablation_pdf(AblationSummary(**summary["summary"])))
        return summary
    raise BambinoError(f"unknown command {args.command!r}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        summary = run(args)
    except (BambinoError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        print(json.dumps({"ok": False, "error": str(e), "type": type(e).__name__}, sort_keys=True))
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
