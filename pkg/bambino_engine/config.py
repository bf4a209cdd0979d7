"""
config.py
=========
ExperimentConfig and its flat text format.

    # comments and blank lines are ignored
    seed = 0
    ppo.clip_epsilon = 0.2
    schedule.mode = "interleaved"

Every value is a JSON literal. Keys are `section.field` for section models and
bare names for top-level fields. Unknown keys are rejected.

Precedence: model defaults < config file < command-line flags.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, ValidationError, model_validator

from .core.kvtext import atomic_write_text, dump_pairs, parse_pairs
from .core.model import TransformerConfig
from .core.textdata import LENGTH_DISTRIBUTIONS
from .core.training import PPOConfig, RewardConfig, ScheduleConfig, TrainConfig
from .errors import ConfigurationError

logger = logging.getLogger(__name__)

STAGES = ("gen-data", "pretrain", "continual", "eval", "report")
LANGUAGES = ("L1", "L2")
SPLITS = ("train", "eval")


# ── Sections ───────────────────────────────────────────────────

class PathsConfig(BaseModel):
    out_dir:        str = "run"
    data_dir:       str = "data"
    checkpoint_dir: str = "checkpoints"
    metrics_dir:    str = "metrics"
    reports_dir:    str = "reports"
    task_files:     List[str] = []


class DataConfig(BaseModel):
    l1_alphabet:   str   = "abcdefghij "
    l2_alphabet:   str   = "ghijklmnop "
    order:         int   = Field(2,   ge=1, le=4)
    concentration: float = Field(0.5, gt=0)
    l1_seed:       int   = 101
    l2_seed:       int   = 202
    sample_seed:   int   = 7
    mean_len:      float = Field(64.0, ge=1)
    len_dist:      str   = Field("poisson", pattern="^(" + "|".join(LENGTH_DISTRIBUTIONS) + ")$")
    train_docs:    int   = Field(2000, ge=1)
    eval_docs:     int   = Field(200,  ge=1)
    task_items:    int   = Field(40,   ge=2)


class ModelConfig(BaseModel):
    """TransformerConfig minus the vocabulary, which comes from the tokenizer."""
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

    def to_transformer(self, vocab_size: int, seed_offset: int = 0) -> TransformerConfig:
        return TransformerConfig(vocab_size=vocab_size, **self.model_dump(exclude={"seed"}),
                                 seed=self.seed + seed_offset)


class MetricsConfig(BaseModel):
    record_wall_clock: bool = False
    eval_max_docs:     Optional[int] = Field(200, ge=1)


class ExperimentConfig(BaseModel):
    seed:     int = 0
    paths:    PathsConfig    = PathsConfig()
    data:     DataConfig     = DataConfig()
    baby:     ModelConfig    = ModelConfig(seed=1)
    parent:   ModelConfig    = ModelConfig(seed=2)
    train:    TrainConfig    = TrainConfig()
    reward:   RewardConfig   = RewardConfig()
    ppo:      PPOConfig      = PPOConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    metrics:  MetricsConfig  = MetricsConfig()

    @model_validator(mode="after")
    def _prompt_fits_context(self):
        if self.ppo.prompt_length + 2 > self.baby.context_length:
            raise ValueError(
                f"ppo.prompt_length {self.ppo.prompt_length} leaves no room in "
                f"context_length {self.baby.context_length}")
        return self


SECTIONS = [name for name, f in ExperimentConfig.model_fields.items()
            if isinstance(f.default, BaseModel)]


# ── Text format ────────────────────────────────────────────────

def serialize_config(config: ExperimentConfig) -> str:
    pairs = []
    for name, value in config.model_dump().items():
        if name in SECTIONS:
            pairs.extend((f"{name}.{k}", v) for k, v in value.items())
        else:
            pairs.append((name, value))
    return dump_pairs(pairs)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    tree: Dict[str, Any] = {}
    seen: Dict[str, int] = {}
    for key, value, lineno in parse_pairs(text, source, ConfigurationError):
        if key in seen:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r} (first on line {seen[key]})")
        seen[key] = lineno
        section, dot, field = key.partition(".")
        if not dot:
            if key not in ExperimentConfig.model_fields or key in SECTIONS:
                raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
            tree[key] = value
            continue
        if section not in SECTIONS:
            raise ConfigurationError(f"{source}:{lineno}: unknown section {section!r}")
        section_model = type(ExperimentConfig.model_fields[section].default)
        if field not in section_model.model_fields:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        tree.setdefault(section, {})[field] = value
    return build_config(tree, source)


def build_config(tree: Dict[str, Any], source: str = "<config>") -> ExperimentConfig:
    """Validate a nested dict; section defaults fill whatever the dict leaves out."""
    defaults = ExperimentConfig().model_dump()
    merged = {k: ({**defaults[k], **tree[k]} if k in SECTIONS and k in tree else tree.get(k, defaults[k]))
              for k in defaults}
    try:
        return ExperimentConfig(**merged)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        raise ConfigurationError(f"{source}: {problems}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def write_config(path, config: ExperimentConfig) -> None:
    atomic_write_text(path, serialize_config(config))


def apply_overrides(config: ExperimentConfig, seed: Optional[int] = None,
                    out_dir: Optional[str] = None) -> ExperimentConfig:
    """Command-line flags win over the file."""
    tree = config.model_dump()
    if seed is not None:
        tree["seed"] = seed
    if out_dir is not None:
        tree["paths"]["out_dir"] = out_dir
    return build_config(tree, "<command line>")


# ── Run layout ─────────────────────────────────────────────────

class RunPaths:
    """Where every stage reads and writes, all under paths.out_dir."""

    def __init__(self, config: ExperimentConfig):
        p = config.paths
        self.root = Path(p.out_dir)
        self.data = self.root / p.data_dir
        self.checkpoints = self.root / p.checkpoint_dir
        self.metrics_dir = self.root / p.metrics_dir
        self.reports = self.root / p.reports_dir
        self.extra_tasks = [Path(t) for t in p.task_files]

    @property
    def tokenizer(self) -> Path:
        return self.data / "tokenizer.txt"

    @property
    def tasks_dir(self) -> Path:
        return self.data / "tasks"

    def corpus(self, language: str, split: str) -> Path:
        return self.data / f"{language.lower()}_{split}.txt"

    def grammar(self, language: str) -> Path:
        return self.data / f"grammar_{language.lower()}.txt"

    def run_dir(self, name: str) -> Path:
        """Checkpoint directory for `baby`, `parent` or `continual-<mode>`."""
        return self.checkpoints / name

    def metrics(self, name: str) -> Path:
        return self.metrics_dir / f"{name}.jsonl"

    def report(self, name: str) -> Path:
        return self.reports / f"{name}.txt"



def validate_inputs(config: ExperimentConfig, stage: str, role: Optional[str] = None) -> None:
    """Fail before any work when a file the stage reads is missing."""
    if stage not in STAGES:
        raise ConfigurationError(f"unknown stage {stage!r}")
    paths = RunPaths(config)
    required: List[Path] = []
    if stage == "pretrain":
        language = "L1" if role == "baby" else "L2"
        required += [paths.tokenizer, paths.corpus(language, "train"), paths.corpus(language, "eval")]
    elif stage == "continual":
        required += [paths.tokenizer, paths.corpus("L2", "train")]
        required += [paths.corpus(lang, "eval") for lang in LANGUAGES]
    elif stage == "eval":
        required += [paths.tokenizer] + [paths.corpus(lang, "eval") for lang in LANGUAGES]
        required += paths.extra_tasks
    missing = [str(p) for p in required if not p.exists()]
    if missing:
        raise ConfigurationError(f"stage {stage!r} is missing inputs: {', '.join(missing)}")
