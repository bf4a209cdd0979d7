# Bambino Engine - Core modules
from .numerics import ComputationTape, DenseArray, ParameterSet, AdamState, adam_step, backward
from .textdata import CharTokenizer, Corpus, SyntheticGrammar, BatchIterator, default_grammars
from .model import LanguageModel, TransformerConfig, GenerationSettings, perplexity
from .training import run_bambino, run_pretraining, clm_step, ppo_step, compute_reward
from .evalkit import EvalTask, MinimalPairTask, EvalReport, corpus_perplexity, forgetting_report

__all__ = [
    "ComputationTape", "DenseArray", "ParameterSet", "AdamState", "adam_step", "backward",
    "CharTokenizer", "Corpus", "SyntheticGrammar", "BatchIterator", "default_grammars",
    "LanguageModel", "TransformerConfig", "GenerationSettings", "perplexity",
    "run_bambino", "run_pretraining", "clm_step", "ppo_step", "compute_reward",
    "EvalTask", "MinimalPairTask", "EvalReport", "corpus_perplexity", "forgetting_report",
]
