"""
ablation.py
===========
Multi-seed comparison of the three continual-training modes.

Reports are grouped by mode; every metric is summarised by its median over
seeds. The expected ordering on final L2 evaluation perplexity is

    bambino <= no-ppo   and   bambino <= no-alternating

checked on the medians. Every seed whose own triple breaks the ordering is
flagged, so a favourable median cannot hide a bad seed.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from ..config import ExperimentConfig, RunPaths
from ..core.evalkit import EvalReport, parse_report
from ..core.kvtext import atomic_write_text, dump_pairs
from ..errors import EvalError

logger = logging.getLogger(__name__)

REFERENCE_MODE = "bambino"
ABLATION_MODES = ("no-ppo", "no-alternating")
SUMMARY_NAME = "ablation-summary"


class ModeSummary(BaseModel):
    mode:                     str
    seeds:                    List[int]
    median_l2_ppl:            float
    median_l1_ppl:            float
    median_acquisition_delta: Optional[float] = None
    median_forgetting_delta:  Optional[float] = None
    median_suite_accuracy:    Dict[str, float] = {}


class SeedFlag(BaseModel):
    seed:   int
    reason: str


class AblationSummary(BaseModel):
    modes:         Dict[str, ModeSummary]
    ordering:      Dict[str, bool] = {}
    ordering_holds: bool = True
    flagged_seeds: List[SeedFlag] = []


def _median(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.median(present)) if present else None


def summarize_mode(mode: str, reports: Sequence[EvalReport]) -> ModeSummary:
    suites = sorted({s for r in reports for s in r.suite_accuracy})
    return ModeSummary(
        mode=mode,
        seeds=sorted(s for r in reports for s in r.seeds),
        median_l2_ppl=_median([r.l2_ppl_after for r in reports]),
        median_l1_ppl=_median([r.l1_ppl_after for r in reports]),
        median_acquisition_delta=_median([r.acquisition_delta for r in reports]),
        median_forgetting_delta=_median([r.forgetting_delta for r in reports]),
        median_suite_accuracy={s: _median([r.suite_accuracy.get(s) for r in reports]) for s in suites})


def summarize_ablation(reports: Sequence[EvalReport]) -> AblationSummary:
    if not reports:
        raise EvalError("no evaluation reports to summarise")
    by_mode: Dict[str, List[EvalReport]] = {}
    for r in reports:
        by_mode.setdefault(r.mode, []).append(r)
    modes = {mode: summarize_mode(mode, group) for mode, group in sorted(by_mode.items())}

    ordering: Dict[str, bool] = {}
    flags: List[SeedFlag] = []
    if REFERENCE_MODE in modes:
        reference = modes[REFERENCE_MODE].median_l2_ppl
        for other in ABLATION_MODES:
            if other in modes:
                ordering[f"{REFERENCE_MODE}_le_{other}"] = reference <= modes[other].median_l2_ppl

        per_seed: Dict[int, Dict[str, float]] = {}
        for mode, group in by_mode.items():
            for r in group:
                for seed in r.seeds:
                    per_seed.setdefault(seed, {})[mode] = r.l2_ppl_after
        for seed in sorted(per_seed):
            values = per_seed[seed]
            if REFERENCE_MODE not in values:
                continue
            worse = [m for m in ABLATION_MODES if m in values and values[REFERENCE_MODE] > values[m]]
            if worse:
                flags.append(SeedFlag(seed=seed, reason=(
                    f"{REFERENCE_MODE} L2 perplexity {values[REFERENCE_MODE]:.4f} above "
                    + ", ".join(f"{m} {values[m]:.4f}" for m in worse))))

    for flag in flags:
        logger.warning("seed %d breaks the expected ordering: %s", flag.seed, flag.reason)
    return AblationSummary(modes=modes, ordering=ordering,
                           ordering_holds=all(ordering.values()), flagged_seeds=flags)


def format_summary(summary: AblationSummary) -> str:
    pairs = []
    for mode, s in summary.modes.items():
        for key, value in s.model_dump(exclude={"mode", "median_suite_accuracy"}).items():
            pairs.append((f"mode.{mode}.{key}", value))
        for suite, value in s.median_suite_accuracy.items():
            pairs.append((f"mode.{mode}.median_suite_accuracy.{suite}", value))
    pairs.extend((f"ordering.{k}", v) for k, v in summary.ordering.items())
    pairs.append(("ordering_holds", summary.ordering_holds))
    pairs.append(("flagged_seeds", [f.seed for f in summary.flagged_seeds]))
    pairs.extend((f"flag.{f.seed}", f.reason) for f in summary.flagged_seeds)
    return dump_pairs(pairs)


def cmd_report(config: ExperimentConfig, report_files: Optional[Sequence] = None) -> dict:
    """Summarise evaluation reports (default: every report in the reports directory)."""
    paths = RunPaths(config)
    summary_path = paths.report(SUMMARY_NAME)
    if report_files:
        files = [Path(f) for f in report_files]
    else:
        files = sorted(p for p in paths.reports.glob("*.txt") if p != summary_path) \
            if paths.reports.is_dir() else []
    missing = [str(f) for f in files if not f.is_file()]
    if missing:
        raise EvalError(f"report files not found: {', '.join(missing)}")
    summary = summarize_ablation([parse_report(f) for f in files])
    atomic_write_text(summary_path, format_summary(summary))
    logger.info("summarised %d reports into %s", len(files), summary_path)
    return {"ok": True, "command": "report", "summary": summary.model_dump(),
            "files": [str(summary_path)]}
