"""
evalkit.py
==========
Measurement harness: corpus perplexity, zero-shot classification by template
perplexity, minimal-pair scoring, and the acquisition / forgetting report.

Corpus perplexity is a micro-average,
    PPL(D) = exp( Σ_doc −log P(doc) / Σ_doc (|doc| − 1) ),
so long and short documents weigh by the tokens they contribute.

Zero-shot classification fills every label template with the item text and
predicts the label whose filled template has the lowest perplexity; ties go
to the lowest label index.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from ..errors import CheckpointError, EvalError, TaskDefinitionError
from .kvtext import atomic_write_text, dump_pairs, parse_line, parse_pairs
from .model import LanguageModel, sequence_log_prob
from .textdata import CharTokenizer, Corpus, SyntheticGrammar, generate_synthetic

logger = logging.getLogger(__name__)

TEXT_SLOT = "{text}"
TASK_KINDS = ("classification", "minimal_pair")


# ── Tasks ──────────────────────────────────────────────────────

@dataclass
class EvalTask:
    name: str
    items: List[Tuple[str, int]]
    label_templates: List[str]
    suite: str = "L2"

    def __post_init__(self):
        if len(self.label_templates) < 2:
            raise TaskDefinitionError(f"task {self.name!r} needs at least 2 labels")
        for template in self.label_templates:
            if TEXT_SLOT not in template:
                raise TaskDefinitionError(f"task {self.name!r}: template {template!r} has no {TEXT_SLOT} slot")
        for text, label in self.items:
            if not 0 <= label < len(self.label_templates):
                raise TaskDefinitionError(
                    f"task {self.name!r}: gold label {label} outside [0, {len(self.label_templates)})")

    def fill(self, text: str) -> List[str]:
        return [t.replace(TEXT_SLOT, text) for t in self.label_templates]


@dataclass
class MinimalPairTask:
    """Pairs of (acceptable, unacceptable) strings."""
    name: str
    pairs: List[Tuple[str, str]]
    suite: str = "L2"


Task = Union[EvalTask, MinimalPairTask]


class EvalReport(BaseModel):
    mode:                   str = "none"
    seeds:                  List[int] = []
    checkpoint:             str = ""
    baseline:               Optional[str] = None
    l1_ppl_before:          Optional[float] = None
    l1_ppl_after:           float
    l2_ppl_before:          Optional[float] = None
    l2_ppl_after:           float
    forgetting_delta:       Optional[float] = None
    acquisition_delta:      Optional[float] = None
    task_accuracy:          Dict[str, float] = {}
    task_accuracy_before:   Dict[str, float] = {}
    suite_accuracy:         Dict[str, float] = {}
    suite_accuracy_before:  Dict[str, float] = {}


# ── Scoring ────────────────────────────────────────────────────

def document_log_prob(m, doc: Sequence[int]) -> Tuple[float, int]:
    """
    Total log-probability of a document and the number of predicted tokens.
    Documents longer than the context are scored in windows overlapping by
    one token, so every token after the first is predicted exactly once.
    """
    if len(doc) < 2:
        raise EvalError(f"document of length {len(doc)} has nothing to predict")
    width = getattr(getattr(m, "config", None), "context_length", len(doc))
    total, count = 0.0, 0
    for start in range(0, len(doc) - 1, width - 1):
        window = doc[start:start + width]
        if len(window) < 2:
            break
        logp = sequence_log_prob(m, window)
        total += float(logp.sum())
        count += logp.size
    return total, count


def corpus_perplexity(m, corpus: Corpus) -> float:
    if not corpus.documents:
        raise EvalError(f"corpus {corpus.language_tag!r} is empty")
    total, count = 0.0, 0
    for doc in corpus.documents:
        lp, n = document_log_prob(m, doc)
        total += lp
        count += n
    return float(np.exp(-total / count))


def text_perplexity(m, tokenizer: CharTokenizer, text: str) -> float:
    lp, n = document_log_prob(m, tokenizer.encode_document(text))
    return float(np.exp(-lp / n))


def classify_items(m, task: EvalTask, tokenizer: CharTokenizer) -> List[int]:
    predictions = []
    for text, _ in task.items:
        ppls = [text_perplexity(m, tokenizer, filled) for filled in task.fill(text)]
        predictions.append(int(np.argmin(ppls)))
    return predictions


def zero_shot_classify(m, task: EvalTask, tokenizer: CharTokenizer) -> float:
    if not task.items:
        raise EvalError(f"task {task.name!r} has no items")
    predictions = classify_items(m, task, tokenizer)
    correct = sum(p == gold for p, (_, gold) in zip(predictions, task.items))
    return correct / len(task.items)


def minimal_pair_accuracy(m, task: MinimalPairTask, tokenizer: CharTokenizer) -> float:
    """Fraction of pairs where the acceptable string has strictly lower perplexity."""
    if not task.pairs:
        raise EvalError(f"task {task.name!r} has no pairs")
    wins = sum(text_perplexity(m, tokenizer, good) < text_perplexity(m, tokenizer, bad)
               for good, bad in task.pairs)
    return wins / len(task.pairs)


def task_accuracy(m, task: Task, tokenizer: CharTokenizer) -> float:
    if isinstance(task, MinimalPairTask):
        return minimal_pair_accuracy(m, task, tokenizer)
    return zero_shot_classify(m, task, tokenizer)


def suite_averages(accuracy: Dict[str, float], tasks: Sequence[Task]) -> Dict[str, float]:
    groups: Dict[str, List[float]] = defaultdict(list)
    for task in tasks:
        if task.name in accuracy:
            groups[task.suite].append(accuracy[task.name])
    return {suite: float(np.mean(values)) for suite, values in sorted(groups.items())}


# ── Reports ────────────────────────────────────────────────────

def evaluate_model(m: LanguageModel, l1_corpus: Corpus, l2_corpus: Corpus,
                   tasks: Sequence[Task], tokenizer: CharTokenizer, *,
                   mode: str = "none", seeds: Sequence[int] = (),
                   checkpoint: str = "") -> EvalReport:
    accuracy = {t.name: task_accuracy(m, t, tokenizer) for t in tasks}
    return EvalReport(
        mode=mode, seeds=list(seeds), checkpoint=checkpoint,
        l1_ppl_after=corpus_perplexity(m, l1_corpus),
        l2_ppl_after=corpus_perplexity(m, l2_corpus),
        task_accuracy=accuracy,
        suite_accuracy=suite_averages(accuracy, tasks))


def forgetting_report(baby_before: LanguageModel, baby_after: LanguageModel,
                      l1_corpus: Corpus, l2_corpus: Corpus, tasks: Sequence[Task],
                      tokenizer: CharTokenizer, *, mode: str = "none",
                      seeds: Sequence[int] = (), checkpoint: str = "",
                      baseline: str = "") -> EvalReport:
    """
    Forgetting = L1 PPL after − before; acquisition = L2 PPL before − after.
    Both positive means the baby learned L2 and lost some L1.
    """
    if baby_before.config != baby_after.config:
        raise CheckpointError("baseline and evaluated checkpoints were built with different configs")
    before = evaluate_model(baby_before, l1_corpus, l2_corpus, tasks, tokenizer)
    after = evaluate_model(baby_after, l1_corpus, l2_corpus, tasks, tokenizer)
    return after.model_copy(update=dict(
        mode=mode, seeds=list(seeds), checkpoint=checkpoint, baseline=baseline,
        l1_ppl_before=before.l1_ppl_after,
        l2_ppl_before=before.l2_ppl_after,
        forgetting_delta=after.l1_ppl_after - before.l1_ppl_after,
        acquisition_delta=before.l2_ppl_after - after.l2_ppl_after,
        task_accuracy_before=before.task_accuracy,
        suite_accuracy_before=before.suite_accuracy))


_DICT_FIELDS = ("task_accuracy", "task_accuracy_before", "suite_accuracy", "suite_accuracy_before")


def format_report(report: EvalReport) -> str:
    pairs = []
    for name, value in report.model_dump().items():
        if name in _DICT_FIELDS:
            pairs.extend((f"{name}.{k}", v) for k, v in value.items())
        else:
            pairs.append((name, value))
    return dump_pairs(pairs)


def write_report(path, report: EvalReport) -> None:
    atomic_write_text(path, format_report(report))


def parse_report(path) -> EvalReport:
    text = Path(path).read_text(encoding="utf-8")
    fields: Dict[str, object] = {name: {} for name in _DICT_FIELDS}
    for key, value, lineno in parse_pairs(text, str(path), EvalError):
        head, _, tail = key.partition(".")
        if head in _DICT_FIELDS and tail:
            fields[head][tail] = value
        elif key in EvalReport.model_fields:
            fields[key] = value
        else:
            raise EvalError(f"{path}:{lineno}: unknown report key {key!r}")
    return EvalReport(**fields)


# ── Task files ─────────────────────────────────────────────────

def format_task(task: Task) -> str:
    if isinstance(task, MinimalPairTask):
        head = dump_pairs([("name", task.name), ("suite", task.suite), ("kind", "minimal_pair")])
        body = "".join(f"{good}\t{bad}\n" for good, bad in task.pairs)
    else:
        head = dump_pairs([("name", task.name), ("suite", task.suite),
                           ("kind", "classification"), ("labels", task.label_templates)])
        body = "".join(f"{label}\t{text}\n" for text, label in task.items)
    return head + body


def write_task_file(path, task: Task) -> None:
    atomic_write_text(path, format_task(task))


def parse_task_file(path) -> Task:
    """
    Header lines `key = <JSON>` (name, suite, kind, labels), then one item per
    line: `label_index<TAB>text` or, for minimal pairs, `acceptable<TAB>unacceptable`.
    """
    source = str(path)
    header: Dict[str, object] = {}
    rows: List[Tuple[int, str, str]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if "\t" in line:
            left, _, right = line.partition("\t")
            rows.append((lineno, left, right))
        elif line.strip() and not line.lstrip().startswith("#"):
            key, value = parse_line(line.strip(), lineno, source, TaskDefinitionError)
            header[key] = value

    if "name" not in header:
        raise TaskDefinitionError(f"{source}: missing 'name'")
    name, suite = str(header["name"]), str(header.get("suite", "L2"))
    kind = header.get("kind", "classification")
    if kind not in TASK_KINDS:
        raise TaskDefinitionError(f"{source}: unknown task kind {kind!r}")
    if kind == "minimal_pair":
        return MinimalPairTask(name, [(good, bad) for _, good, bad in rows], suite)

    labels = header.get("labels")
    if not isinstance(labels, list):
        raise TaskDefinitionError(f"{source}: 'labels' must be a list of templates")
    items = []
    for lineno, left, text in rows:
        try:
            items.append((text, int(left)))
        except ValueError:
            raise TaskDefinitionError(f"{source}:{lineno}: label index {left!r} is not an integer") from None
    return EvalTask(name, items, [str(t) for t in labels], suite)


# ── Built-in synthetic tasks ───────────────────────────────────

def _fragments(grammar: SyntheticGrammar, n: int, length: int, seed: int) -> List[str]:
    """n strings of exactly `length` characters cut from grammar samples."""
    out: List[str] = []
    rng_seed = seed
    while len(out) < n:
        for doc in generate_synthetic(grammar, 4 * n, rng_seed):
            if len(doc) >= length:
                out.append(doc[:length])
                if len(out) == n:
                    break
        rng_seed += 1
    return out


def language_id_task(l1: SyntheticGrammar, l2: SyntheticGrammar, n_items: int = 40,
                     text_length: int = 24, anchor_length: int = 16, seed: int = 0) -> EvalTask:
    """Is this text L1 (label 0) or L2 (label 1)? Each template leads with a fragment of its language."""
    anchor_1 = _fragments(l1, 1, anchor_length, seed + 1000)[0]
    anchor_2 = _fragments(l2, 1, anchor_length, seed + 2000)[0]
    texts_1 = _fragments(l1, n_items // 2, text_length, seed)
    texts_2 = _fragments(l2, n_items - n_items // 2, text_length, seed + 1)
    items = [(t, 0) for t in texts_1] + [(t, 1) for t in texts_2]
    order = np.random.default_rng(seed).permutation(len(items))
    return EvalTask(
        name="language_id",
        items=[items[i] for i in order],
        label_templates=[f"{anchor_1} {TEXT_SLOT}", f"{anchor_2} {TEXT_SLOT}"],
        suite="L2")


def plausibility_task(grammar: SyntheticGrammar, suite: str, n_pairs: int = 40,
                      prefix_length: int = 16, continuation_length: int = 16,
                      seed: int = 0) -> MinimalPairTask:
    """Shared prefix, then the real continuation vs the same characters shuffled."""
    rng = np.random.default_rng(seed)
    pairs = []
    for fragment in _fragments(grammar, n_pairs, prefix_length + continuation_length, seed):
        prefix, tail = fragment[:prefix_length], fragment[prefix_length:]
        shuffled = tail
        for _ in range(8):
            shuffled = "".join(rng.permutation(list(tail)))
            if shuffled != tail:
                break
        if shuffled != tail:
            pairs.append((prefix + tail, prefix + shuffled))
    return MinimalPairTask(f"plausibility_{suite}", pairs, suite)


def builtin_tasks(l1: SyntheticGrammar, l2: SyntheticGrammar, seed: int = 0,
                  n_items: int = 40) -> List[Task]:
    return [
        language_id_task(l1, l2, n_items=n_items, seed=seed),
        plausibility_task(l2, "L2", n_pairs=n_items, seed=seed + 1),
        plausibility_task(l1, "L1", n_pairs=n_items, seed=seed + 2),
    ]
