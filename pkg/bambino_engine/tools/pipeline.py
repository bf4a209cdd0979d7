"""
pipeline.py
===========
The staged experiment, one function per command-line subcommand.

    gen-data    synthetic L1/L2 corpora, shared tokenizer, grammars, task files
    pretrain    pure causal-LM training of the baby (on L1) or the parent (on L2)
    continual   continual training of the baby on L2 in one of three modes
    eval        perplexities, task accuracies and, against a baseline,
                acquisition / forgetting deltas

Each command returns a JSON-serialisable summary dict; the CLI prints it as its
single line of standard output.

Usage:
    from bambino_engine.config import ExperimentConfig
    from bambino_engine.tools.pipeline import cmd_gen_data, cmd_pretrain

    config = ExperimentConfig()
    cmd_gen_data(config)
    cmd_pretrain(config, role="baby")
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

from ..config import LANGUAGES, SPLITS, ExperimentConfig, RunPaths, validate_inputs
from ..core.checkpoint import (
    checkpoint_checksum, clear_checkpoints, latest_checkpoint, load_checkpoint,
    save_checkpoint, step_dir,
)
from ..core.evalkit import (
    builtin_tasks, evaluate_model, forgetting_report, parse_task_file,
    write_report, write_task_file,
)
from ..core.kvtext import atomic_write_text
from ..core.model import LanguageModel
from ..core.textdata import (
    CharTokenizer, Corpus, SyntheticGrammar, build_tokenizer, generate_synthetic,
    load_corpus, random_grammar, write_documents,
)
from ..core.training import (
    MetricsRecord, TrainerState, TrainingConfigs, evaluate_corpora, run_bambino,
    run_pretraining,
)
from ..errors import CheckpointError, ConfigurationError

logger = logging.getLogger(__name__)

ROLE_LANGUAGE = {"baby": "L1", "parent": "L2"}
MODE_SCHEDULES = {
    "bambino":        "interleaved",
    "no-ppo":         "clm_only",
    "no-alternating": "block_split",
}


# ── Metrics log ────────────────────────────────────────────────

class MetricsLog:
    """
    Append-only JSON-lines log of MetricsRecords. Opening it for a resumed run
    keeps only the records before the resume step, so the finished log matches
    an uninterrupted run line for line.
    """

    def __init__(self, path, resume_step: Optional[int] = None):
        self.path = Path(path)
        kept = []
        if resume_step is not None and self.path.is_file():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                try:
                    record = json.loads(line)
                except json.JSONDecodeError:
                    break
                if record.get("step", resume_step) < resume_step:
                    kept.append(line + "\n")
        atomic_write_text(self.path, "".join(kept))
        self._handle = None

    def __enter__(self) -> "MetricsLog":
        self._handle = self.path.open("a", encoding="utf-8")
        return self

    def __exit__(self, *exc) -> None:
        self._handle.close()
        self._handle = None

    def append(self, record: MetricsRecord) -> None:
        self._handle.write(record.model_dump_json() + "\n")
        self._handle.flush()


def read_metrics(path) -> List[MetricsRecord]:
    return [MetricsRecord.model_validate_json(line)
            for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


# ── Helpers ────────────────────────────────────────────────────

def build_grammars(config: ExperimentConfig) -> Dict[str, SyntheticGrammar]:
    d = config.data
    return {
        "L1": random_grammar(list(d.l1_alphabet), d.order, d.concentration, d.mean_len, d.len_dist, d.l1_seed),
        "L2": random_grammar(list(d.l2_alphabet), d.order, d.concentration, d.mean_len, d.len_dist, d.l2_seed),
    }


def _sample_seed(config: ExperimentConfig, language: str, split: str) -> int:
    return config.data.sample_seed * 100 + 10 * LANGUAGES.index(language) + SPLITS.index(split)


def load_tokenizer(paths: RunPaths) -> CharTokenizer:
    return CharTokenizer.load(paths.tokenizer)


def load_eval_corpora(paths: RunPaths, tokenizer: CharTokenizer) -> Dict[str, Corpus]:
    return {lang: load_corpus(paths.corpus(lang, "eval"), tokenizer, lang) for lang in LANGUAGES}


def resolve_checkpoint(path) -> Path:
    """A checkpoint directory itself, or the latest one inside a run directory."""
    path = Path(path)
    if (path / "manifest.json").is_file():
        return path
    found = latest_checkpoint(path)
    if found is None:
        raise CheckpointError(f"no checkpoint found at {path}")
    return found


def load_tasks(paths: RunPaths) -> list:
    files = sorted(paths.tasks_dir.glob("*.txt")) if paths.tasks_dir.is_dir() else []
    return [parse_task_file(f) for f in files + paths.extra_tasks]


# ── Commands ───────────────────────────────────────────────────

def cmd_gen_data(config: ExperimentConfig) -> dict:
    """Write L1/L2 train and eval corpora, their grammars, the tokenizer and task files."""
    paths = RunPaths(config)
    grammars = build_grammars(config)
    written = []
    counts = {"train": config.data.train_docs, "eval": config.data.eval_docs}
    for lang, grammar in grammars.items():
        grammar.save(paths.grammar(lang))
        written.append(paths.grammar(lang))
        for split in SPLITS:
            docs = generate_synthetic(grammar, counts[split], _sample_seed(config, lang, split))
            write_documents(paths.corpus(lang, split), docs)
            written.append(paths.corpus(lang, split))
            logger.info("wrote %d %s %s documents", len(docs), lang, split)

    tokenizer = build_tokenizer([paths.corpus(lang, "train") for lang in LANGUAGES])
    tokenizer.save(paths.tokenizer)
    written.append(paths.tokenizer)

    for task in builtin_tasks(grammars["L1"], grammars["L2"], seed=config.data.sample_seed,
                              n_items=config.data.task_items):
        target = paths.tasks_dir / f"{task.name}.txt"
        write_task_file(target, task)
        written.append(target)

    return {
        "ok": True,
        "command": "gen-data",
        "vocab_size": tokenizer.vocab_size,
        "entropy_rate": {lang: g.entropy_rate() for lang, g in grammars.items()},
        "files": [str(p) for p in written],
    }


def cmd_pretrain(config: ExperimentConfig, role: str, resume: bool = False,
                 progress: bool = False) -> dict:
    """Causal-LM pretraining of `role` on its own language."""
    if role not in ROLE_LANGUAGE:
        raise ConfigurationError(f"role must be one of {sorted(ROLE_LANGUAGE)}, got {role!r}")
    validate_inputs(config, "pretrain", role)
    paths = RunPaths(config)
    language = ROLE_LANGUAGE[role]
    tokenizer = load_tokenizer(paths)
    corpus = load_corpus(paths.corpus(language, "train"), tokenizer, language)
    eval_corpora = load_eval_corpora(paths, tokenizer)
    model_cfg = getattr(config, role).to_transformer(tokenizer.vocab_size, seed_offset=config.seed)
    run_dir = paths.run_dir(role)
    max_docs = config.metrics.eval_max_docs

    state: Optional[TrainerState] = None
    found = latest_checkpoint(run_dir) if resume else None
    if found is not None:
        model, state, extra = load_checkpoint(found, expected_config=model_cfg, role=role)
        initial = extra["initial_eval_ppl"]
    else:
        clear_checkpoints(run_dir)
        model = LanguageModel(model_cfg, role)
        initial = evaluate_corpora(model, eval_corpora, max_docs)
    logger.info("pretraining %s: %d parameters on %d %s tokens",
                role, model.params.num_values, corpus.num_tokens, language)

    def on_checkpoint(s: TrainerState) -> None:
        save_checkpoint(step_dir(run_dir, s.step), model, s,
                        extra={"language": language, "initial_eval_ppl": initial})

    with MetricsLog(paths.metrics(f"pretrain-{role}"), state.step if state else None) as log:
        records = run_pretraining(
            model, corpus, config.train, seed=config.seed, state=state,
            eval_corpora=eval_corpora, eval_max_docs=max_docs,
            on_record=log.append, on_checkpoint=on_checkpoint,
            record_wall_clock=config.metrics.record_wall_clock,
            progress=progress)

    final = latest_checkpoint(run_dir)
    last = records[-1] if records else None
    return {
        "ok": True,
        "command": "pretrain",
        "role": role,
        "steps": config.train.pretrain_steps,
        "resumed_from": state.step if state else None,
        "final_loss": last.clm_loss if last else None,
        "initial_eval_ppl": initial,
        "eval_ppl": {"L1": last.l1_eval_ppl, "L2": last.l2_eval_ppl} if last else None,
        "checkpoint": str(final),
    }


def cmd_continual(config: ExperimentConfig, mode: str, resume: bool = False,
                  progress: bool = False) -> dict:
    """Continual training of the pretrained baby on L2 under `mode`."""
    if mode not in MODE_SCHEDULES:
        raise ConfigurationError(f"mode must be one of {sorted(MODE_SCHEDULES)}, got {mode!r}")
    validate_inputs(config, "continual")
    paths = RunPaths(config)
    tokenizer = load_tokenizer(paths)
    corpus = load_corpus(paths.corpus("L2", "train"), tokenizer, "L2")
    eval_corpora = load_eval_corpora(paths, tokenizer)
    schedule = config.schedule.model_copy(update={"mode": MODE_SCHEDULES[mode]})

    baby_ckpt, parent_ckpt = resolve_checkpoint(paths.run_dir("baby")), None
    baby, _, _ = load_checkpoint(baby_ckpt, role="baby")
    parent = None
    if schedule.uses_feedback:
        parent_ckpt = resolve_checkpoint(paths.run_dir("parent"))
        parent, _, _ = load_checkpoint(parent_ckpt, role="parent")
        if parent.config.vocab_size != baby.config.vocab_size:
            raise CheckpointError("baby and parent checkpoints use different vocabularies")

    run_dir = paths.run_dir(f"continual-{mode}")
    state = None
    found = latest_checkpoint(run_dir) if resume else None
    if found is not None:
        baby, state, _ = load_checkpoint(found, expected_config=baby.config, role="baby")
    else:
        clear_checkpoints(run_dir)

    def on_epoch_end(epoch: int, s: TrainerState) -> None:
        save_checkpoint(step_dir(run_dir, s.step), baby, s,
                        extra={"mode": mode, "epoch": epoch, "seed": config.seed,
                               "baseline": str(baby_ckpt)})

    cfgs = TrainingConfigs(train=config.train, reward=config.reward, ppo=config.ppo)
    with MetricsLog(paths.metrics(f"continual-{mode}"), state.step if state else None) as log:
        _, records = run_bambino(
            corpus, baby, parent, schedule, cfgs, tokenizer, seed=config.seed, state=state,
            eval_corpora=eval_corpora, eval_max_docs=config.metrics.eval_max_docs,
            on_record=log.append, on_epoch_end=on_epoch_end,
            record_wall_clock=config.metrics.record_wall_clock,
            progress=progress)

    final = latest_checkpoint(run_dir)
    phases = [r.phase for r in read_metrics(paths.metrics(f"continual-{mode}"))]
    last = records[-1] if records else None
    return {
        "ok": True,
        "command": "continual",
        "mode": mode,
        "schedule": schedule.mode,
        "clm_steps": phases.count("clm"),
        "ppo_steps": phases.count("ppo"),
        "skipped_ppo_steps": sum(r.skipped for r in records),
        "eval_ppl": {"L1": last.l1_eval_ppl, "L2": last.l2_eval_ppl} if last else None,
        "checkpoint": str(final),
        "checksum": checkpoint_checksum(final) if final else None,
    }


def cmd_eval(config: ExperimentConfig, checkpoint, baseline=None, name: Optional[str] = None) -> dict:
    """Evaluate a checkpoint; with a baseline, also report acquisition and forgetting."""
    validate_inputs(config, "eval")
    paths = RunPaths(config)
    tokenizer = load_tokenizer(paths)
    corpora = load_eval_corpora(paths, tokenizer)
    tasks = load_tasks(paths)

    target = resolve_checkpoint(checkpoint)
    model, _, extra = load_checkpoint(target)
    mode = extra.get("mode", "none")
    seeds = [extra.get("seed", config.seed)]
    if baseline is not None:
        base_path = resolve_checkpoint(baseline)
        base_model, _, _ = load_checkpoint(base_path)
        report = forgetting_report(base_model, model, corpora["L1"], corpora["L2"], tasks, tokenizer,
                                   mode=mode, seeds=seeds, checkpoint=str(target),
                                   baseline=str(base_path))
    else:
        report = evaluate_model(model, corpora["L1"], corpora["L2"], tasks, tokenizer,
                                mode=mode, seeds=seeds, checkpoint=str(target))

    name = name or f"eval-{target.parent.name}-seed{seeds[0]}"
    report_path = paths.report(name)
    write_report(report_path, report)
    logger.info("wrote evaluation report %s", report_path)
    return {"ok": True, "command": "eval", "report": report.model_dump(), "files": [str(report_path)]}
