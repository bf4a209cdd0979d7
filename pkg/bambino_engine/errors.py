"""
errors.py
=========
Exception hierarchy for the engine.

Everything derives from BambinoError, which is a ValueError so callers that
only guard against bad input keep working. The command-line surface catches
BambinoError once and turns it into a non-zero exit status.
"""


class BambinoError(ValueError):
    """Root of every error raised by bambino_engine."""


# ── numerics ──────────────────────────────────────────────────

class DimensionError(BambinoError):
    pass


class RankError(BambinoError):
    pass


class DegenerateBatchError(BambinoError):
    """Every target position of a batch is ignored."""


class OptimizerPreconditionError(BambinoError):
    pass


class DuplicateParameterError(BambinoError):
    """A parameter name is registered twice in one ParameterSet."""


# ── textdata ──────────────────────────────────────────────────

class IngestionError(BambinoError):
    pass


class EmptyVocabError(BambinoError):
    pass


class GrammarValidationError(BambinoError):
    pass


# ── model ─────────────────────────────────────────────────────

class ContextLengthError(BambinoError):
    pass


class VocabError(BambinoError):
    pass


class GenerationError(BambinoError):
    pass


class DegenerateSequenceError(BambinoError):
    pass


# ── training ──────────────────────────────────────────────────

class ShortGenerationError(BambinoError):
    """A generation is too short for the parent to score."""


class RolloutShapeError(BambinoError):
    pass


class ConfigurationError(BambinoError):
    pass


class CheckpointError(BambinoError):
    pass


# ── evalkit ───────────────────────────────────────────────────

class EvalError(BambinoError):
    pass


class TaskDefinitionError(BambinoError):
    pass
