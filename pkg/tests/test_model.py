import math

import numpy as np
import pytest
from pydantic import ValidationError

from bambino_engine.core.model import (
    CountNgramModel, GenerationSettings, LanguageModel, TransformerConfig,
    forward_logits, perplexity, sample_continuation, sequence_log_prob,
    token_log_probs, value_estimates,
)
from bambino_engine.core.numerics import (
    AdamState, ComputationTape, DenseArray, adam_step, add, backward, cross_entropy_next_token,
    max_relative_error, mean_all, mul, numerical_gradient, slice_axis, sub, sum_all,
)
from bambino_engine.core.textdata import BOS, EOS, PAD, CharTokenizer
from bambino_engine.errors import (
    ContextLengthError, DegenerateSequenceError, GenerationError, VocabError,
)

from .conftest import UniformModel, gradient_pair


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValidationError):
        TransformerConfig(vocab_size=8, d_model=10, n_heads=4)


def test_head_is_tied_to_embedding(toy_model):
    assert toy_model.lm_head is toy_model.params["wte"]


def test_fresh_model_logits_are_finite(toy_model):
    logits = forward_logits(toy_model, [BOS, 4, 5, 6, EOS])
    assert logits.shape == (5, toy_model.config.vocab_size)
    assert np.all(np.isfinite(logits.data))


def test_batch_forward_matches_single(toy_model):
    batch = np.array([[BOS, 4, 5, 6], [BOS, 7, 7, 4]])
    logits, values = toy_model.forward(batch)
    for row in range(2):
        np.testing.assert_allclose(logits.data[row], toy_model.logits(batch[row]), atol=1e-12)
    assert values.shape == (2, 4)


def test_logits_are_causal(toy_model):
    a = toy_model.logits([BOS, 4, 5, 6, 7])
    b = toy_model.logits([BOS, 4, 5, 6, 4])
    np.testing.assert_array_equal(a[:-1], b[:-1])
    assert not np.array_equal(a[-1], b[-1])


def test_values_are_causal(toy_model):
    toy_model.params["value_head.weight"].data[:] = 0.3
    a = value_estimates(toy_model, [BOS, 4, 5, 6]).data
    b = value_estimates(toy_model, [BOS, 4, 5, 7]).data
    np.testing.assert_array_equal(a[:-1], b[:-1])


def test_zero_value_head_gives_zero_values(toy_model):
    assert value_estimates(toy_model, [BOS, 4, 5]).data.tolist() == [0.0, 0.0, 0.0]


def test_value_head_gradient(toy_model):
    tokens = [BOS, 4, 5, 6]
    target = DenseArray([0.5, -1.0, 2.0, 0.0])
    w = toy_model.params["value_head.weight"]
    w.data[:] = np.linspace(-0.2, 0.2, w.data.size).reshape(w.shape)

    def loss_fn():
        diff = sub(value_estimates(toy_model, tokens), target)
        return mean_all(mul(diff, diff))

    analytic, numeric = gradient_pair(loss_fn, w)
    assert max_relative_error(analytic, numeric) < 1e-5


def test_full_model_gradient_sample(toy_model):
    tokens = [BOS, 4, 5, 6, 7, EOS]

    def loss_fn():
        return mean_all(token_log_probs(forward_logits(toy_model, tokens), tokens))

    for name in ("wte", "h.0.attn.qkv.weight", "h.0.mlp.fc.weight", "ln_f.weight"):
        p = toy_model.params[name]
        indices = list(range(0, p.data.size, max(1, p.data.size // 7)))
        analytic, numeric = gradient_pair(loss_fn, p, indices=indices)
        assert max_relative_error(analytic, numeric) < 1e-5, name


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradient_random_entries(seed):
    """Two layers, two heads, width 16 over an 11-symbol vocabulary."""
    tokenizer = CharTokenizer(list("abcdefg"))
    assert tokenizer.vocab_size == 11
    cfg = TransformerConfig(vocab_size=11, context_length=16, d_model=16, n_heads=2,
                            n_layers=2, d_ff=32, init_scale=0.2, seed=seed)
    m = LanguageModel(cfg)
    rng = np.random.default_rng(seed)
    for _, p in m.params.items():
        p.data[...] = rng.normal(scale=0.3, size=p.shape)
    tokens = rng.integers(0, 11, size=16)

    def loss_fn():
        logits, values = m.forward(tokens)
        return add(mean_all(token_log_probs(logits, tokens)), mean_all(mul(values, values)))

    names = list(m.params)
    picks = {}
    while sum(len(v) for v in picks.values()) < 100:
        name = names[int(rng.integers(len(names)))]
        picks.setdefault(name, set()).add(int(rng.integers(m.params[name].data.size)))
    for name, indices in picks.items():
        analytic, numeric = gradient_pair(loss_fn, m.params[name], indices=sorted(indices))
        assert max_relative_error(analytic, numeric) < 1e-4, name


def test_target_only_token_trains_its_embedding_row(toy_model):
    """The output head is the embedding matrix, so a token seen only as a target moves its wte row."""
    target_only = 7
    tokens = [BOS, 4, 5, 6, 4, 5, target_only]
    assert target_only not in tokens[:-1]
    assert not any("head" in name and "value" not in name for name in toy_model.params)

    params = toy_model.params
    before = params["wte"].data.copy()
    params.zero_grad()
    with ComputationTape() as tape:
        logits = forward_logits(toy_model, tokens)
        loss = cross_entropy_next_token(slice_axis(logits, 0, len(tokens) - 1, axis=0),
                                        tokens[1:], ignore_index=PAD)
    backward(loss, tape)
    assert np.abs(params["wte"].grad[target_only]).max() > 0
    adam_step(params, AdamState.for_params(params, lr=1e-2))
    assert not np.allclose(params["wte"].data[target_only], before[target_only])


def test_hand_computed_single_head_forward():
    """Two-token vocabulary, width 2, one head: reproduce the forward pass with plain numpy."""
    cfg = TransformerConfig(vocab_size=2, context_length=4, d_model=2, n_heads=1,
                            n_layers=1, d_ff=2, seed=0)
    m = LanguageModel(cfg)
    rng = np.random.default_rng(7)
    for _, p in m.params.items():
        p.data[...] = rng.normal(size=p.shape)
    P = {name: p.data for name, p in m.params.items()}
    ids = [0, 1, 1]

    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))

    x = P["wte"][ids] + P["wpe"][:3]
    h = ln(x, P["h.0.ln_1.weight"], P["h.0.ln_1.bias"])
    qkv = h @ P["h.0.attn.qkv.weight"] + P["h.0.attn.qkv.bias"]
    q, k, v = qkv[:, :2], qkv[:, 2:4], qkv[:, 4:]
    scores = q @ k.T / math.sqrt(2)
    scores[np.triu_indices(3, 1)] = -np.inf
    w = np.exp(scores - scores.max(-1, keepdims=True))
    w /= w.sum(-1, keepdims=True)
    x = x + (w @ v) @ P["h.0.attn.proj.weight"] + P["h.0.attn.proj.bias"]
    h = ln(x, P["h.0.ln_2.weight"], P["h.0.ln_2.bias"])
    x = x + gelu(h @ P["h.0.mlp.fc.weight"] + P["h.0.mlp.fc.bias"]) @ P["h.0.mlp.proj.weight"] \
        + P["h.0.mlp.proj.bias"]
    expected = ln(x, P["ln_f.weight"], P["ln_f.bias"]) @ P["wte"].T

    np.testing.assert_allclose(m.logits(ids), expected, atol=1e-9)


def test_forward_rejects_overlong_and_unknown(toy_model):
    with pytest.raises(ContextLengthError):
        toy_model.logits([BOS] * (toy_model.config.context_length + 1))
    with pytest.raises(VocabError):
        toy_model.logits([BOS, toy_model.config.vocab_size])


# ── Log-probabilities and perplexity ───────────────────────────

def test_uniform_log_probs_and_perplexity():
    m = UniformModel(8)
    tokens = [0, 5, 3, 7, 1]
    np.testing.assert_allclose(sequence_log_prob(m, tokens), -math.log(8), atol=1e-12)
    assert perplexity(m, tokens) == pytest.approx(8.0, abs=1e-9)


def test_log_probs_are_normalised(toy_model):
    prefix = [BOS, 4, 5]
    per_candidate = [sequence_log_prob(toy_model, prefix + [c])[-1]
                     for c in range(toy_model.config.vocab_size)]
    assert np.exp(per_candidate).sum() == pytest.approx(1.0, abs=1e-12)
    assert max(per_candidate) <= 0.0


def test_certain_model_has_unit_perplexity():
    table = np.zeros((3, 3))
    table[0, 1] = table[1, 2] = table[2, 0] = 1.0
    assert perplexity(CountNgramModel.from_table(table), [0, 1, 2, 0, 1]) == pytest.approx(1.0)


def test_bigram_table_perplexity():
    table = np.array([[0.2, 0.5, 0.3],
                      [0.6, 0.1, 0.3],
                      [0.25, 0.25, 0.5]])
    tokens = [0, 1, 0, 2, 2]
    by_hand = math.exp(-(math.log(0.5) + math.log(0.6) + math.log(0.3) + math.log(0.5)) / 4)
    assert perplexity(CountNgramModel.from_table(table), tokens) == pytest.approx(by_hand, abs=1e-12)


def test_single_token_sequence_is_degenerate(toy_model):
    with pytest.raises(DegenerateSequenceError):
        sequence_log_prob(toy_model, [BOS])


def test_count_model_fit():
    m = CountNgramModel(4, order=1).fit([[0, 1, 2], [0, 1, 3]])
    logp = m.logits([0, 1])
    assert np.exp(logp[0, 1]) == pytest.approx(1.0)
    assert np.exp(logp[1, 2]) == pytest.approx(0.5)


# ── Sampling ───────────────────────────────────────────────────

def test_eos_forced_model_stops_immediately(toy_model):
    toy_model.params["ln_f.weight"].data[:] = 0.0
    toy_model.params["ln_f.bias"].data[:] = 1.0
    toy_model.params["wte"].data[:, :] = 0.0
    toy_model.params["wte"].data[EOS, :] = 100.0
    out = sample_continuation(toy_model, [BOS, 4], GenerationSettings(max_new_tokens=8))
    assert out == [EOS]


def test_sampling_is_seeded(toy_model):
    gs = GenerationSettings(max_new_tokens=10, seed=5)
    assert sample_continuation(toy_model, [BOS, 4], gs) == sample_continuation(toy_model, [BOS, 4], gs)


def test_sampling_respects_max_new_tokens(toy_model):
    gs = GenerationSettings(max_new_tokens=3, stop_token=-1)
    assert len(sample_continuation(toy_model, [BOS], gs)) == 3


def test_first_token_frequencies_match_softmax(toy_model):
    gs = GenerationSettings(max_new_tokens=1, temperature=1.0)
    z = toy_model.logits([BOS, 4])[-1]
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    rng = np.random.default_rng(0)
    counts = np.zeros_like(probs)
    for _ in range(10_000):
        counts[sample_continuation(toy_model, [BOS, 4], gs, rng)[0]] += 1
    assert np.abs(counts / 10_000 - probs).max() < 0.02


def test_generation_errors(toy_model):
    with pytest.raises(GenerationError):
        sample_continuation(toy_model, [], GenerationSettings())
    with pytest.raises(GenerationError):
        sample_continuation(toy_model, [BOS] * 10, GenerationSettings(max_new_tokens=10))


def test_clone_is_independent(toy_model):
    twin = toy_model.clone(role="parent")
    twin.params["wte"].data[:] = 0.0
    assert twin.role == "parent"
    assert np.any(toy_model.params["wte"].data != 0.0)


def test_numerical_gradient_restores_array():
    a = DenseArray([1.0, 2.0])
    numerical_gradient(lambda: float(sum_all(a).item()), a)
    assert a.data.tolist() == [1.0, 2.0]
