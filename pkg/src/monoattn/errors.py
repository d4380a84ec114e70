"""Exception types.

Every error carries a short ``category`` string; the command-line front end
prints it as the machine-parsable part of its one-line error message.
"""


class MonoAttnError(Exception):
    category = "error"


class DimensionError(MonoAttnError, ValueError):
    category = "dimension"


class IndexRangeError(MonoAttnError, IndexError):
    category = "index"


class DomainError(MonoAttnError, ValueError):
    category = "domain"


class InvalidMaskError(MonoAttnError, ValueError):
    category = "invalid-mask"


class EmptySequenceError(MonoAttnError, ValueError):
    category = "empty-sequence"


class DeterminismError(MonoAttnError, RuntimeError):
    category = "nondeterministic"


class UninitializedGradientError(MonoAttnError, RuntimeError):
    category = "uninitialized-gradient"


class DivergedTrainingError(MonoAttnError, RuntimeError):
    category = "diverged"


class ConfigError(MonoAttnError, ValueError):
    category = "config"


class ParseError(MonoAttnError, ValueError):
    category = "parse"

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class EmptyCorpusError(MonoAttnError, ValueError):
    category = "empty-corpus"


class VocabMismatchError(MonoAttnError, ValueError):
    category = "vocab-mismatch"


class CheckpointError(MonoAttnError, ValueError):
    category = "checkpoint"


class CheckpointVersionError(CheckpointError):
    category = "checkpoint-version"


class CheckpointTruncatedError(CheckpointError):
    category = "checkpoint-truncated"


class CheckpointShapeError(CheckpointError):
    category = "checkpoint-shape"
