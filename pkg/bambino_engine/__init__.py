"""
Bambino Engine
==============
Continual pretraining of a small "baby" language model on a second language,
alternating causal-LM learning steps with PPO feedback steps rewarded by a
"parent" model's perplexity of the baby's generations.

Quick start:
    from bambino_engine import ExperimentConfig, cmd_gen_data, cmd_pretrain, cmd_continual

    config = ExperimentConfig()
    cmd_gen_data(config)
    cmd_pretrain(config, role="parent")
    cmd_pretrain(config, role="baby")
    summary = cmd_continual(config, mode="bambino")
"""

from .config import ExperimentConfig, load_config, parse_config, serialize_config
from .errors import BambinoError
from .tools import cmd_continual, cmd_eval, cmd_gen_data, cmd_pretrain, cmd_report

__version__ = "1.0.0"
__all__ = [
    "ExperimentConfig", "load_config", "parse_config", "serialize_config",
    "BambinoError",
    "cmd_gen_data", "cmd_pretrain", "cmd_continual", "cmd_eval", "cmd_report",
]
