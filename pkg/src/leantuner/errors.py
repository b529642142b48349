"""Exception types raised by the engine.

Every error the engine raises deliberately derives from EngineError, so
callers can distinguish engine-detected misuse from genuine bugs.
"""


class EngineError(Exception):
    pass


class ShapeMismatch(EngineError):
    """Operands cannot be combined, or a stored tensor has the wrong shape."""


class IndexOutOfRange(EngineError):
    """A token id or target id falls outside the valid vocabulary range."""


class AllTargetsIgnored(EngineError):
    """Cross entropy was asked to average over zero non-ignored targets."""


class NotScalar(EngineError):
    """backward() was called on a tensor with more than one element."""


class NoTape(EngineError):
    """backward() was called on a tensor that was not recorded on the tape."""


class NonFiniteValue(EngineError):
    """Debug validation found a NaN or Inf in an operation's output."""


class MissingGradient(EngineError):
    """An optimizer step found a trainable parameter without a gradient."""


class NoTargetsMatched(EngineError):
    """Adapter attachment matched none of the requested projection names."""


class SequenceTooLong(EngineError):
    """An input sequence exceeds the model's maximum sequence length."""


class InvalidConfig(EngineError):
    """A configuration failed validation; the message names the field."""


class BadHeader(EngineError):
    """A checkpoint file's header is malformed or self-inconsistent."""


class BadMagic(BadHeader):
    """A checkpoint file's length prefix is impossible for the file."""


class MissingTensor(EngineError):
    """A required tensor name is absent from a checkpoint; names which."""


class BudgetTooSmall(EngineError):
    """A single tensor exceeds the shard byte budget in strict mode."""


class EmptyDataset(EngineError):
    """The corpus is too short to yield even one training window."""


class BadRecord(EngineError):
    """A data file record failed to parse; the message names the line."""
