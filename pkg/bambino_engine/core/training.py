"""
training.py
===========
Continual training of the baby on L2: causal-LM learning steps interleaved
with PPO feedback steps whose reward is the parent's perplexity of the baby's
generations.

Per feedback step, for each prompt x (BOS + the first k tokens of a
training document):
    y      ~ baby(· | x)                         sampled continuation
    R(y)   = min(α / (β · max(PPL_parent(y) − τ, δ)), R_max)
    Â_t    = r_t + γ V(s_{t+1}) − V(s_t)         r_t = R at the last action, else 0
    r_t(θ) = exp(log π_θ(a_t|s_t) − log π_θold(a_t|s_t))
    L      = −mean_t min(r_t Â_t, clip(r_t, 1−ε, 1+ε) Â_t) + c_v · mean_t (V(s_t) − G_t)²

Schedule modes:
    interleaved   epoch step i is CLM when (i mod (r_clm + r_ppo)) < r_clm
    clm_only      no feedback steps
    block_split   first ⌊fraction · steps_per_epoch⌋ steps of every epoch are CLM

Source: clipped-surrogate policy optimisation with a one-step TD advantage.
"""

import logging
import math
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from ..errors import ConfigurationError, RolloutShapeError, ShortGenerationError
from .numerics import (
    AdamState, ComputationTape, DenseArray, ParameterSet, adam_step, add,
    backward, clip, cross_entropy_next_token, exp, mean_all, minimum, mul,
    no_tape, scale, slice_axis, sub,
)
from .evalkit import corpus_perplexity
from .model import (
    GenerationSettings, LanguageModel, perplexity, sample_continuation,
    token_log_probs,
)
from .textdata import PAD, Batch, BatchIterator, CharTokenizer, Corpus

logger = logging.getLogger(__name__)

PHASES = ("clm", "ppo")
SCHEDULE_MODES = ("interleaved", "clm_only", "block_split")


# ── Configuration ──────────────────────────────────────────────

class RewardConfig(BaseModel):
    alpha:      float = Field(1.0,  gt=0)
    beta:       float = Field(0.1,  gt=0)
    tau:        float = Field(1.0,  ge=0)
    ppl_floor:  float = Field(0.1,  gt=0)
    reward_cap: float = Field(10.0, gt=0)


class PPOConfig(BaseModel):
    clip_epsilon:       float = Field(0.2, gt=0, lt=1)
    gamma:              float = Field(1.0, gt=0, le=1)
    value_coef:         float = Field(0.5, ge=0)
    prompt_length:      int   = Field(5,   ge=1)
    rollout_batch_size: int   = Field(4,   ge=1)
    rollouts_per_step:  int   = Field(1,   ge=1)
    lr:                 float = Field(1e-4, gt=0)
    max_new_tokens:     int   = Field(32,  ge=1)
    temperature:        float = Field(1.0, gt=0)


class ScheduleConfig(BaseModel):
    r_clm:                int   = Field(10, ge=1)
    r_ppo:                int   = Field(2,  ge=0)
    mode:                 Literal["interleaved", "clm_only", "block_split"] = "interleaved"
    block_split_fraction: float = Field(0.85, gt=0, lt=1)
    epochs:               int   = Field(10, ge=1)
    steps_per_epoch:      Optional[int] = Field(100, ge=1)

    @property
    def uses_feedback(self) -> bool:
        if self.mode == "clm_only":
            return False
        return self.mode == "block_split" or self.r_ppo > 0


class TrainConfig(BaseModel):
    batch_size:       int   = Field(16,   ge=1)
    pretrain_steps:   int   = Field(2000, ge=1)
    pretrain_lr:      float = Field(1e-3, gt=0)
    continual_lr:     float = Field(3e-4, gt=0)
    max_grad_norm:    float = Field(1.0,  gt=0)
    checkpoint_every: int   = Field(500,  ge=1)


class MetricsRecord(BaseModel):
    step:                  int
    phase:                 Literal["clm", "ppo"]
    epoch:                 int
    clm_loss:              Optional[float] = None
    ppo_loss:              Optional[float] = None
    value_loss:            Optional[float] = None
    mean_reward:           Optional[float] = None
    mean_parent_ppl:       Optional[float] = None
    l1_eval_ppl:           Optional[float] = None
    l2_eval_ppl:           Optional[float] = None
    repetition_rate:       Optional[float] = None
    distinct_bigram_ratio: Optional[float] = None
    n_rollouts:            int = 0
    n_discarded:           int = 0
    skipped:               bool = False
    lr:                    float = 0.0
    grad_norm:             Optional[float] = None
    wall_clock_ms:         float = 0.0


@dataclass
class TrainingConfigs:
    train: TrainConfig = field(default_factory=TrainConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)


# ── Rollouts ───────────────────────────────────────────────────

@dataclass
class Rollout:
    """
    One prompt and its sampled continuation. `values[t]` is V(s_t) for the
    state just before action t; old log-probs are frozen at collection.
    """
    prompt: List[int]
    actions: List[int]
    old_log_probs: np.ndarray
    values: np.ndarray
    reward: float = 0.0
    parent_ppl: float = float("nan")
    advantages: Optional[np.ndarray] = None

    def __post_init__(self):
        self.old_log_probs = np.array(self.old_log_probs, dtype=np.float64)
        self.old_log_probs.setflags(write=False)
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.actions)
        if self.old_log_probs.shape != (n,) or self.values.shape != (n,):
            raise RolloutShapeError(
                f"{n} actions but old_log_probs {self.old_log_probs.shape} "
                f"and values {self.values.shape}")

    @property
    def sequence(self) -> List[int]:
        return self.prompt + self.actions

    @property
    def step_rewards(self) -> np.ndarray:
        r = np.zeros(len(self.actions))
        if len(self.actions):
            r[-1] = self.reward
        return r


def reward_from_perplexity(ppl: float, rc: RewardConfig) -> float:
    return min(rc.alpha / (rc.beta * max(ppl - rc.tau, rc.ppl_floor)), rc.reward_cap)


def score_generation(generated: Sequence[int], parent: LanguageModel, tokenizer: CharTokenizer,
                     rc: RewardConfig) -> Tuple[float, float]:
    """(reward, parent perplexity) of a generation, scored on its decoded text with no specials."""
    text = tokenizer.decode(generated, skip_specials=True)
    ids = tokenizer.encode(text)[:parent.config.context_length]
    if len(ids) < 2:
        raise ShortGenerationError(f"generation {text!r} has {len(ids)} tokens, need 2")
    ppl = perplexity(parent, ids)
    return reward_from_perplexity(ppl, rc), ppl


def compute_reward(generated: Sequence[int], parent: LanguageModel, rc: RewardConfig,
                   tokenizer: CharTokenizer) -> float:
    return score_generation(generated, parent, tokenizer, rc)[0]


def _as_dense(x) -> DenseArray:
    return x if isinstance(x, DenseArray) else DenseArray(x)


def probability_ratio(new_logp, old_logp) -> DenseArray:
    """r_t = exp(new − old); gradients flow through `new_logp` only."""
    new_logp = _as_dense(new_logp)
    old = np.asarray(old_logp, dtype=np.float64)
    if new_logp.shape != old.shape:
        raise RolloutShapeError(f"log-prob shapes differ: {new_logp.shape} vs {old.shape}")
    return exp(sub(new_logp, DenseArray(old)))


def advantages(rollout: Rollout, gamma: float) -> np.ndarray:
    values = rollout.values
    if values.shape != (len(rollout.actions),):
        raise RolloutShapeError(
            f"values {values.shape} do not cover {len(rollout.actions)} actions")
    next_values = np.append(values[1:], 0.0)
    return rollout.step_rewards + gamma * next_values - values


def discounted_returns(rollout: Rollout, gamma: float) -> np.ndarray:
    """G_t = Σ_{j≥t} γ^{j−t} r_j."""
    rewards = rollout.step_rewards
    out = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def value_loss(values_new, rollout: Rollout, gamma: float) -> DenseArray:
    values_new = _as_dense(values_new)
    target = discounted_returns(rollout, gamma)
    if values_new.shape != target.shape:
        raise RolloutShapeError(f"values {values_new.shape} vs {target.shape} returns")
    diff = sub(values_new, DenseArray(target))
    return mean_all(mul(diff, diff))


def ppo_surrogate_loss(ratios, advantages_, eps: float) -> DenseArray:
    ratios = _as_dense(ratios)
    adv = DenseArray(np.asarray(advantages_, dtype=np.float64))
    if ratios.shape != adv.shape:
        raise RolloutShapeError(f"ratios {ratios.shape} vs advantages {adv.shape}")
    if not 0 < eps < 1:
        raise ConfigurationError(f"clip epsilon must be in (0, 1), got {eps}")
    unclipped = mul(ratios, adv)
    clipped = mul(clip(ratios, 1.0 - eps, 1.0 + eps), adv)
    return scale(mean_all(minimum(unclipped, clipped)), -1.0)


# ── Diagnostics ────────────────────────────────────────────────

def repetition_rate(generations: Sequence[Sequence[int]]) -> float:
    """Fraction of tokens equal to the token right before them."""
    repeats = total = 0
    for g in generations:
        for a, b in zip(g, g[1:]):
            repeats += a == b
            total += 1
    return repeats / total if total else 0.0


def distinct_bigram_ratio(generations: Sequence[Sequence[int]]) -> float:
    bigrams = [(a, b) for g in generations for a, b in zip(g, g[1:])]
    return len(set(bigrams)) / len(bigrams) if bigrams else 0.0


# ── Steps ──────────────────────────────────────────────────────

def _update(params: ParameterSet, opt: AdamState, max_norm: float) -> float:
    norm = params.clip_grad_norm(max_norm)
    adam_step(params, opt)
    return norm


def clm_step(baby: LanguageModel, batch: Batch, opt: AdamState, *, step: int = 0,
             epoch: int = 0, max_grad_norm: float = 1.0) -> MetricsRecord:
    baby.params.zero_grad()
    with ComputationTape() as tape:
        logits, _ = baby.forward(batch.inputs)
        loss = cross_entropy_next_token(logits, batch.targets, ignore_index=PAD)
    backward(loss, tape)
    norm = _update(baby.params, opt, max_grad_norm)
    return MetricsRecord(step=step, phase="clm", epoch=epoch, clm_loss=loss.item(),
                         lr=opt.lr, grad_norm=norm)


def extract_prompts(batch: Batch, k: int) -> List[List[int]]:
    """BOS + the first k tokens of each row that opens a document of at least k tokens."""
    prompts = []
    for row in np.flatnonzero(batch.doc_start):
        if batch.mask[row, :k + 1].all():
            prompts.append([int(t) for t in batch.tokens[row, :k + 1]])
    return prompts


def rollout_rng(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, index]))


RewardFn = Callable[[List[int]], Tuple[float, float]]


def collect_rollout(baby: LanguageModel, prompt: List[int], gs: GenerationSettings,
                    rng: np.random.Generator, reward_fn: RewardFn) -> Rollout:
    """Sample, score, and freeze θ_old log-probs and values for one prompt."""
    actions = sample_continuation(baby, prompt, gs, rng)
    if len(actions) < 2:
        raise ShortGenerationError(f"{len(actions)} generated tokens, need 2")
    reward, ppl = reward_fn(actions)
    sequence = prompt + actions
    start = len(prompt) - 1
    with no_tape():
        logits, values = baby.forward(sequence)
        logp = token_log_probs(logits, sequence).data
    return Rollout(prompt=list(prompt), actions=actions,
                   old_log_probs=logp[start:],
                   values=values.data[start:start + len(actions)],
                   reward=reward, parent_ppl=ppl)


def ppo_step(baby: LanguageModel, parent: Optional[LanguageModel], prompts: Sequence[List[int]],
             cfgs: TrainingConfigs, opt: AdamState, tokenizer: CharTokenizer, *,
             seed: int = 0, step: int = 0, epoch: int = 0,
             reward_fn: Optional[RewardFn] = None) -> MetricsRecord:
    """
    One feedback step: collect rollouts under θ_old, then a single optimisation
    pass on the clipped surrogate plus the value regression.
    """
    ppo = cfgs.ppo
    if reward_fn is None:
        if parent is None:
            raise ConfigurationError("a feedback step needs a parent model or a reward function")
        reward_fn = lambda actions: score_generation(actions, parent, tokenizer, cfgs.reward)  # noqa: E731
    gs = GenerationSettings(max_new_tokens=ppo.max_new_tokens, temperature=ppo.temperature)

    rollouts: List[Rollout] = []
    discarded = 0
    for p, prompt in enumerate(prompts[:ppo.rollout_batch_size]):
        budget = baby.config.context_length - len(prompt)
        settings = gs if budget >= gs.max_new_tokens else gs.model_copy(update={"max_new_tokens": budget})
        for j in range(ppo.rollouts_per_step):
            rng = rollout_rng(seed, step, p * ppo.rollouts_per_step + j)
            try:
                rollouts.append(collect_rollout(baby, prompt, settings, rng, reward_fn))
            except ShortGenerationError as e:
                discarded += 1
                logger.info("step %d: discarded rollout %d/%d (%s)", step, p, j, e)

    if not rollouts:
        logger.warning("step %d: every rollout discarded, skipping feedback step", step)
        return MetricsRecord(step=step, phase="ppo", epoch=epoch, skipped=True,
                             n_discarded=discarded, lr=opt.lr)

    for r in rollouts:
        r.advantages = advantages(r, ppo.gamma)

    baby.params.zero_grad()
    surrogate_total, value_total = 0.0, 0.0
    with ComputationTape() as tape:
        total = None
        for r in rollouts:
            sequence = r.sequence
            start, n = len(r.prompt) - 1, len(r.actions)
            logits, values = baby.forward(sequence)
            new_logp = slice_axis(token_log_probs(logits, sequence), start, start + n, axis=0)
            surrogate = ppo_surrogate_loss(probability_ratio(new_logp, r.old_log_probs),
                                           r.advantages, ppo.clip_epsilon)
            v_loss = value_loss(slice_axis(values, start, start + n, axis=0), r, ppo.gamma)
            surrogate_total += surrogate.item()
            value_total += v_loss.item()
            term = add(surrogate, scale(v_loss, ppo.value_coef))
            total = term if total is None else add(total, term)
        loss = scale(total, 1.0 / len(rollouts))
    backward(loss, tape)
    norm = _update(baby.params, opt, cfgs.train.max_grad_norm)

    generations = [r.actions for r in rollouts]
    return MetricsRecord(
        step=step, phase="ppo", epoch=epoch,
        ppo_loss=surrogate_total / len(rollouts),
        value_loss=value_total / len(rollouts),
        mean_reward=float(np.mean([r.reward for r in rollouts])),
        mean_parent_ppl=float(np.mean([r.parent_ppl for r in rollouts])),
        repetition_rate=repetition_rate(generations),
        distinct_bigram_ratio=distinct_bigram_ratio(generations),
        n_rollouts=len(rollouts), n_discarded=discarded,
        lr=opt.lr, grad_norm=norm)


# ── Schedule ───────────────────────────────────────────────────

def clm_block_length(steps_per_epoch: int, fraction: float) -> int:
    return int(math.floor(fraction * steps_per_epoch + 1e-9))


def phase_for_step(epoch_step: int, steps_per_epoch: int, schedule: ScheduleConfig) -> str:
    """Phase of one step, counted from the start of its epoch."""
    if schedule.mode == "clm_only":
        return "clm"
    if schedule.mode == "block_split":
        cut = clm_block_length(steps_per_epoch, schedule.block_split_fraction)
        return "clm" if epoch_step < cut else "ppo"
    cycle = schedule.r_clm + schedule.r_ppo
    return "clm" if epoch_step % cycle < schedule.r_clm else "ppo"


# ── Drivers ────────────────────────────────────────────────────

@dataclass
class TrainerState:
    """Everything needed to resume a run at `step` exactly."""
    step: int
    epoch: int
    iterator: Dict[str, int]
    clm_opt: AdamState
    ppo_opt: Optional[AdamState] = None


def _next_batch(iterator: BatchIterator) -> Batch:
    batch = iterator.next_batch()
    if batch is None:
        iterator.new_epoch()
        batch = iterator.next_batch()
    return batch


def _progress(total: int, initial: int, desc: str, enabled: bool) -> tqdm:
    return tqdm(total=total, initial=initial, desc=desc, file=sys.stderr,
                disable=not enabled, leave=False)


def evaluate_corpora(model: LanguageModel, eval_corpora: Dict[str, Corpus],
                     max_docs: Optional[int] = None) -> Dict[str, float]:
    out = {}
    for tag, corpus in eval_corpora.items():
        if max_docs is not None and len(corpus) > max_docs:
            corpus = Corpus(corpus.documents[:max_docs], corpus.language_tag, corpus.source_manifest)
        out[tag] = corpus_perplexity(model, corpus)
    return out


def _attach_eval(record: MetricsRecord, ppls: Dict[str, float]) -> None:
    record.l1_eval_ppl = ppls.get("L1")
    record.l2_eval_ppl = ppls.get("L2")


def run_pretraining(model: LanguageModel, corpus: Corpus, train: TrainConfig, *, seed: int = 0,
                    state: Optional[TrainerState] = None,
                    eval_corpora: Optional[Dict[str, Corpus]] = None,
                    eval_max_docs: Optional[int] = None,
                    on_record: Optional[Callable[[MetricsRecord], None]] = None,
                    on_checkpoint: Optional[Callable[[TrainerState], None]] = None,
                    record_wall_clock: bool = False,
                    progress: bool = False) -> List[MetricsRecord]:
    """Pure causal-LM training for `train.pretrain_steps` steps."""
    iterator = BatchIterator(corpus, train.batch_size, model.config.context_length, seed=seed)
    if state is None:
        state = TrainerState(step=0, epoch=0, iterator=iterator.state_dict(),
                             clm_opt=AdamState.for_params(model.params, lr=train.pretrain_lr))
    else:
        iterator.load_state_dict(state.iterator)
        logger.info("resuming %s pretraining at step %d", model.role, state.step)

    records = []
    bar = _progress(train.pretrain_steps, state.step, f"pretrain {model.role}", progress)
    while state.step < train.pretrain_steps:
        started = time.perf_counter()
        record = clm_step(model, _next_batch(iterator), state.clm_opt, step=state.step,
                          epoch=iterator.epoch, max_grad_norm=train.max_grad_norm)
        state.step += 1
        state.epoch = iterator.epoch
        state.iterator = iterator.state_dict()
        if state.step == train.pretrain_steps and eval_corpora:
            _attach_eval(record, evaluate_corpora(model, eval_corpora, eval_max_docs))
        if record_wall_clock:
            record.wall_clock_ms = (time.perf_counter() - started) * 1000.0
        records.append(record)
        if on_record:
            on_record(record)
        if on_checkpoint and (state.step % train.checkpoint_every == 0
                              or state.step == train.pretrain_steps):
            on_checkpoint(state)
        bar.update(1)
    bar.close()
    return records


def run_bambino(corpus: Corpus, baby: LanguageModel, parent: Optional[LanguageModel],
                schedule: ScheduleConfig, cfgs: TrainingConfigs, tokenizer: CharTokenizer, *,
                seed: int = 0,
                state: Optional[TrainerState] = None,
                eval_corpora: Optional[Dict[str, Corpus]] = None,
                eval_max_docs: Optional[int] = None,
                on_record: Optional[Callable[[MetricsRecord], None]] = None,
                on_epoch_end: Optional[Callable[[int, TrainerState], None]] = None,
                reward_fn: Optional[RewardFn] = None,
                record_wall_clock: bool = False,
                progress: bool = False) -> Tuple[LanguageModel, List[MetricsRecord]]:
    """
    Continual training of `baby` on `corpus` under `schedule`. Each step takes
    the next batch; learning steps fit it, feedback steps draw prompts from it.
    """
    if schedule.uses_feedback and parent is None and reward_fn is None:
        raise ConfigurationError(f"schedule mode {schedule.mode!r} with r_ppo={schedule.r_ppo} needs a parent model")

    iterator = BatchIterator(corpus, cfgs.train.batch_size, baby.config.context_length, seed=seed)
    steps_per_epoch = schedule.steps_per_epoch or iterator.batches_per_epoch
    total_steps = steps_per_epoch * schedule.epochs
    if state is None:
        state = TrainerState(
            step=0, epoch=0, iterator=iterator.state_dict(),
            clm_opt=AdamState.for_params(baby.params, lr=cfgs.train.continual_lr),
            ppo_opt=AdamState.for_params(baby.params, lr=cfgs.ppo.lr))
    else:
        iterator.load_state_dict(state.iterator)
        logger.info("resuming continual training at step %d (epoch %d)", state.step, state.epoch)

    records = []
    bar = _progress(total_steps, state.step, f"continual {schedule.mode}", progress)
    while state.step < total_steps:
        epoch, epoch_step = divmod(state.step, steps_per_epoch)
        started = time.perf_counter()
        batch = _next_batch(iterator)
        phase = phase_for_step(epoch_step, steps_per_epoch, schedule)
        if phase == "clm":
            record = clm_step(baby, batch, state.clm_opt, step=state.step, epoch=epoch,
                              max_grad_norm=cfgs.train.max_grad_norm)
        else:
            prompts = extract_prompts(batch, cfgs.ppo.prompt_length)
            record = ppo_step(baby, parent, prompts, cfgs, state.ppo_opt, tokenizer,
                              seed=seed, step=state.step, epoch=epoch, reward_fn=reward_fn)
        state.step += 1
        state.iterator = iterator.state_dict()
        epoch_done = state.step % steps_per_epoch == 0
        if epoch_done:
            state.epoch = epoch + 1
            if eval_corpora:
                _attach_eval(record, evaluate_corpora(baby, eval_corpora, eval_max_docs))
        if record_wall_clock:
            record.wall_clock_ms = (time.perf_counter() - started) * 1000.0
        records.append(record)
        if on_record:
            on_record(record)
        if epoch_done:
            logger.info("epoch %d done at step %d", epoch, state.step)
            if on_epoch_end:
                on_epoch_end(epoch, state)
        bar.update(1)
    bar.close()
    return baby, records
