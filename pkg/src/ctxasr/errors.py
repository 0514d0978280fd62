"""Exception hierarchy shared by all ctxasr modules."""


class CtxAsrError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CtxAsrError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(CtxAsrError):
    """A documented precondition was violated by the caller."""


class InvalidMaskError(CtxAsrError):
    """An attention mask leaves some query without any allowed key."""


class VocabularyError(CtxAsrError):
    """A token id is outside the model vocabulary."""


class InfeasibleAlignmentError(CtxAsrError):
    """The CTC target cannot be aligned to the available frames."""


class FormatError(CtxAsrError):
    """A file does not conform to its binary or text format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(CtxAsrError):
    """A manifest line is malformed or inconsistent."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointMismatchError(CtxAsrError):
    """Two checkpoints or a checkpoint and a config disagree on tensors."""


class RecyclingUnsupportedError(CtxAsrError):
    """The model configuration cannot support activation recycling."""


class ConfigError(CtxAsrError):
    """A run configuration is invalid (unknown key, bad value)."""


class BenchmarkInvalidError(CtxAsrError):
    """The two benchmark arms disagreed, invalidating the report."""
