import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bambino_engine.config import ExperimentConfig, build_config
from bambino_engine.core.model import LanguageModel, TransformerConfig
from bambino_engine.core.numerics import ComputationTape, backward, numerical_gradient
from bambino_engine.core.textdata import CharTokenizer

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("fast", max_examples=20, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class UniformModel:
    """Scorer with all-zero logits: every token has probability 1/V."""

    def __init__(self, vocab_size: int, context_length: int = 128):
        self.config = TransformerConfig(vocab_size=vocab_size, context_length=context_length,
                                        d_model=4, n_heads=1, n_layers=1, d_ff=4)

    def logits(self, tokens) -> np.ndarray:
        return np.zeros((len(np.asarray(tokens).ravel()), self.config.vocab_size))


def zero_model(config: TransformerConfig, role: str = "baby") -> LanguageModel:
    """A LanguageModel whose every parameter is zero except layer-norm gains: logits are all 0."""
    model = LanguageModel(config, role)
    for name, p in model.params.items():
        if not name.endswith("ln_1.weight") and not name.endswith("ln_2.weight") \
                and not name.endswith("ln_f.weight"):
            p.data[...] = 0.0
    return model


def gradient_pair(loss_fn, array, indices=None, h=1e-6):
    """(analytic, numeric) gradients of scalar loss_fn() w.r.t. `array`."""
    array.grad = None
    with ComputationTape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = array.grad.ravel()
    if indices is not None:
        analytic = analytic[list(indices)]

    def value():
        return loss_fn().item()

    return analytic, numerical_gradient(value, array, h=h, indices=indices)


@pytest.fixture
def toy_tokenizer():
    return CharTokenizer(list("abcd"))


@pytest.fixture
def toy_model_config(toy_tokenizer):
    return TransformerConfig(vocab_size=toy_tokenizer.vocab_size, context_length=16,
                             d_model=8, n_heads=2, n_layers=1, d_ff=16, init_scale=0.2, seed=3)


@pytest.fixture
def toy_model(toy_model_config):
    return LanguageModel(toy_model_config)


@pytest.fixture
def tiny_experiment(tmp_path):
    """A configuration small enough for the whole pipeline to run in seconds."""
    model = {"context_length": 24, "d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 16}
    return build_config({
        "seed": 0,
        "paths": {"out_dir": str(tmp_path / "run")},
        "data": {"l1_alphabet": "abcde ", "l2_alphabet": "cdefg ", "order": 1,
                 "mean_len": 12.0, "train_docs": 40, "eval_docs": 10, "task_items": 6},
        "baby": {**model, "seed": 1},
        "parent": {**model, "seed": 2},
        "train": {"batch_size": 4, "pretrain_steps": 6, "checkpoint_every": 3},
        "ppo": {"prompt_length": 3, "rollout_batch_size": 2, "max_new_tokens": 6},
        "schedule": {"epochs": 2, "steps_per_epoch": 12},
        "metrics": {"eval_max_docs": 5},
    })


@pytest.fixture
def default_config():
    return ExperimentConfig()
