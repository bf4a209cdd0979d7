"""
model.py
========
Decoder-only transformer with a tied LM head and a scalar value head.

One class plays both roles: the baby (the policy being trained on L2) and the
parent (a frozen L2 model whose perplexity scores the baby's generations).

Architecture (pre-norm GPT-2 layout):
    x = wte[ids] + wpe[:T]
    per layer:  x += proj(attn(ln_1(x)))      causal, multi-head
                x += mlp(ln_2(x))             GELU, width d_ff
    h = ln_f(x)
    logits = h @ wteᵀ                         tied head
    values = h @ w_v + b_v                    zero-initialised

Perplexity is the standard length-normalised form
    PPL(x) = exp(−(1/|x|) Σ_t log P(x_t | x_<t)),
summed over the |x| predicted positions t = 1 … T'−1.
"""

import copy
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from ..errors import (
    ContextLengthError, DegenerateSequenceError, GenerationError, VocabError,
)
from .numerics import (
    DenseArray, ParameterSet, add, causal_mask, embedding, gather, gelu,
    layer_norm, log_softmax, matmul, no_tape, reshape, scale, slice_axis,
    softmax_rows, transpose,
)
from .textdata import EOS

logger = logging.getLogger(__name__)

ROLES = ("baby", "parent")


# ── Configuration ──────────────────────────────────────────────

class TransformerConfig(BaseModel):
    vocab_size:     int   = Field(..., ge=1)
    context_length: int   = Field(128, ge=2)
    d_model:        int   = Field(64,  ge=1)
    n_heads:        int   = Field(4,   ge=1)
    n_layers:       int   = Field(2,   ge=1)
    d_ff:           int   = Field(256, ge=1)
    init_scale:     float = Field(0.02, gt=0)
    seed:           int   = 0

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class GenerationSettings(BaseModel):
    max_new_tokens: int   = Field(32, ge=1)
    temperature:    float = Field(1.0, gt=0)
    stop_token:     int   = EOS
    seed:           int   = 0


# ── Model ──────────────────────────────────────────────────────

def init_parameters(config: TransformerConfig) -> ParameterSet:
    rng = np.random.default_rng(config.seed)
    d, f, sigma = config.d_model, config.d_ff, config.init_scale
    params = ParameterSet()

    def normal(*shape):
        return DenseArray(rng.normal(0.0, sigma, size=shape))

    params.add("wte", normal(config.vocab_size, d))
    params.add("wpe", normal(config.context_length, d))
    for i in range(config.n_layers):
        p = f"h.{i}."
        params.add(p + "ln_1.weight", DenseArray(np.ones(d)))
        params.add(p + "ln_1.bias", DenseArray.zeros(d))
        params.add(p + "attn.qkv.weight", normal(d, 3 * d))
        params.add(p + "attn.qkv.bias", DenseArray.zeros(3 * d))
        params.add(p + "attn.proj.weight", normal(d, d))
        params.add(p + "attn.proj.bias", DenseArray.zeros(d))
        params.add(p + "ln_2.weight", DenseArray(np.ones(d)))
        params.add(p + "ln_2.bias", DenseArray.zeros(d))
        params.add(p + "mlp.fc.weight", normal(d, f))
        params.add(p + "mlp.fc.bias", DenseArray.zeros(f))
        params.add(p + "mlp.proj.weight", normal(f, d))
        params.add(p + "mlp.proj.bias", DenseArray.zeros(d))
    params.add("ln_f.weight", DenseArray(np.ones(d)))
    params.add("ln_f.bias", DenseArray.zeros(d))
    params.add("value_head.weight", DenseArray.zeros(d, 1))
    params.add("value_head.bias", DenseArray.zeros(1))
    return params


class LanguageModel:
    def __init__(self, config: TransformerConfig, role: str = "baby",
                 params: Optional[ParameterSet] = None):
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {role!r}")
        self.config = config
        self.role = role
        self.params = params if params is not None else init_parameters(config)

    @property
    def lm_head(self) -> DenseArray:
        """The output projection; the same array as the token embedding."""
        return self.params["wte"]

    def clone(self, role: Optional[str] = None) -> "LanguageModel":
        return LanguageModel(self.config, role or self.role, copy.deepcopy(self.params))

    def check_tokens(self, ids: np.ndarray) -> None:
        length = ids.shape[-1]
        if length < 1 or length > self.config.context_length:
            raise ContextLengthError(
                f"sequence length {length} outside [1, {self.config.context_length}]")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise VocabError(f"token id outside [0, {self.config.vocab_size})")

    def forward(self, tokens) -> Tuple[DenseArray, DenseArray]:
        """
        Logits [.., T', V] and values [.., T'] for a 1-D sequence or a 2-D
        batch of sequences. Records on the active tape, if any.
        """
        ids = np.asarray(tokens, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        self.check_tokens(ids)
        batch, length = ids.shape
        c, p = self.config, self.params

        x = add(embedding(p["wte"], ids), slice_axis(p["wpe"], 0, length, axis=0))
        for i in range(c.n_layers):
            x = add(x, self._attention(i, layer_norm(x, p[f"h.{i}.ln_1.weight"], p[f"h.{i}.ln_1.bias"])))
            x = add(x, self._mlp(i, layer_norm(x, p[f"h.{i}.ln_2.weight"], p[f"h.{i}.ln_2.bias"])))
        h = layer_norm(x, p["ln_f.weight"], p["ln_f.bias"])

        logits = matmul(h, transpose(self.lm_head))
        values = reshape(add(matmul(h, p["value_head.weight"]), p["value_head.bias"]), (batch, length))
        if single:
            logits = reshape(logits, (length, c.vocab_size))
            values = reshape(values, (length,))
        return logits, values

    def _attention(self, i: int, x: DenseArray) -> DenseArray:
        c, p = self.config, self.params
        batch, length, d = x.shape
        qkv = add(matmul(x, p[f"h.{i}.attn.qkv.weight"]), p[f"h.{i}.attn.qkv.bias"])

        def heads(t: DenseArray) -> DenseArray:
            return transpose(reshape(t, (batch, length, c.n_heads, c.head_dim)), (0, 2, 1, 3))

        q = heads(slice_axis(qkv, 0, d))
        k = heads(slice_axis(qkv, d, 2 * d))
        v = heads(slice_axis(qkv, 2 * d, 3 * d))
        scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(c.head_dim))
        weights = softmax_rows(causal_mask(scores))
        y = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (batch, length, d))
        return add(matmul(y, p[f"h.{i}.attn.proj.weight"]), p[f"h.{i}.attn.proj.bias"])

    def _mlp(self, i: int, x: DenseArray) -> DenseArray:
        p = self.params
        hidden = gelu(add(matmul(x, p[f"h.{i}.mlp.fc.weight"]), p[f"h.{i}.mlp.fc.bias"]))
        return add(matmul(hidden, p[f"h.{i}.mlp.proj.weight"]), p[f"h.{i}.mlp.proj.bias"])

    def logits(self, tokens) -> np.ndarray:
        """Untracked logits as a plain array."""
        with no_tape():
            return self.forward(tokens)[0].data


class CountNgramModel:
    """
    Frequency-table scorer: P(c | previous `order` tokens) from add-`smoothing`
    counts. Exposes the same `logits` method as LanguageModel, so it can stand
    in wherever a scorer is expected (perplexity oracles, baselines).
    """

    def __init__(self, vocab_size: int, order: int = 1, smoothing: float = 0.0):
        self.vocab_size = vocab_size
        self.order = order
        self.smoothing = smoothing
        self.counts: dict = {}

    @classmethod
    def from_table(cls, table: np.ndarray) -> "CountNgramModel":
        """Bigram model whose row `prev` is the given next-token distribution."""
        table = np.asarray(table, dtype=np.float64)
        model = cls(table.shape[1], order=1)
        model.counts = {(prev,): row.copy() for prev, row in enumerate(table)}
        return model

    def fit(self, documents: Sequence[Sequence[int]]) -> "CountNgramModel":
        for doc in documents:
            for t in range(1, len(doc)):
                key = tuple(doc[max(0, t - self.order):t])
                row = self.counts.setdefault(key, np.zeros(self.vocab_size))
                row[doc[t]] += 1.0
        return self

    def logits(self, tokens) -> np.ndarray:
        ids = [int(t) for t in np.asarray(tokens).ravel()]
        out = np.empty((len(ids), self.vocab_size))
        for t in range(len(ids)):
            key = tuple(ids[max(0, t + 1 - self.order):t + 1])
            row = self.counts.get(key, np.zeros(self.vocab_size)) + self.smoothing
            total = row.sum()
            probs = row / total if total > 0 else np.full(self.vocab_size, 1.0 / self.vocab_size)
            with np.errstate(divide="ignore"):
                out[t] = np.log(probs)
        return out


# ── Operations ─────────────────────────────────────────────────

def forward_logits(m: LanguageModel, tokens) -> DenseArray:
    return m.forward(tokens)[0]


def value_estimates(m: LanguageModel, tokens) -> DenseArray:
    """V(s_t) for every prefix state s_t = x_0 … x_t."""
    return m.forward(tokens)[1]


def token_log_probs(logits: DenseArray, tokens) -> DenseArray:
    """Differentiable log P(x_t | x_<t) for t = 1 … T'−1 of one sequence."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.shape[-1] < 2:
        raise DegenerateSequenceError(f"need at least 2 tokens, got {ids.shape[-1]}")
    logp = log_softmax(logits)
    positions = np.arange(ids.shape[-1] - 1)
    return gather(logp, (positions, ids[1:]))


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sequence_log_prob(m, tokens) -> np.ndarray:
    """Entry t−1 holds log P(x_t | x_0 … x_{t−1}) for t = 1 … T'−1."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 2:
        raise DegenerateSequenceError(f"need a sequence of at least 2 tokens, got shape {ids.shape}")
    logp = _log_softmax_np(m.logits(ids)[:-1])
    return logp[np.arange(ids.size - 1), ids[1:]]


def perplexity_from_log_probs(log_probs: Sequence[float]) -> float:
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.size == 0:
        raise DegenerateSequenceError("no predicted positions")
    return float(np.exp(-log_probs.mean()))


def perplexity(m, tokens) -> float:
    return perplexity_from_log_probs(sequence_log_prob(m, tokens))


def sample_continuation(m: LanguageModel, prompt: Sequence[int], gs: GenerationSettings,
                        rng: Optional[np.random.Generator] = None) -> List[int]:
    """
    Ancestral sampling from softmax(logits / temperature). Stops after the
    stop token or max_new_tokens; the stop token is part of the result.
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise GenerationError("prompt is empty")
    if len(prompt) + gs.max_new_tokens > m.config.context_length:
        raise GenerationError(
            f"prompt length {len(prompt)} + max_new_tokens {gs.max_new_tokens} "
            f"exceeds context length {m.config.context_length}")
    if rng is None:
        rng = np.random.default_rng(gs.seed)

    sequence = list(prompt)
    last = m.config.vocab_size - 1
    for _ in range(gs.max_new_tokens):
        z = m.logits(sequence)[-1] / gs.temperature
        probs = np.exp(z - z.max())
        cumulative = np.cumsum(probs / probs.sum())
        token = min(int(np.searchsorted(cumulative, rng.random(), side="right")), last)
        sequence.append(token)
        if token == gs.stop_token:
            break
    return sequence[len(prompt):]
