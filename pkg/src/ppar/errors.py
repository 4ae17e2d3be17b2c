"""Exception hierarchy shared across the toolkit."""


class PPARError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(PPARError, ValueError):
    """Input violates a documented precondition."""


class EmptyDatasetError(ValidationError):
    pass


class ProviderError(PPARError):
    """A text-embedding provider failed. Usually worth retrying."""

    def __init__(self, message, class_id=None, class_name=None, retryable=True):
        super().__init__(message)
        self.class_id = class_id
        self.class_name = class_name
        self.retryable = retryable


class ArtifactError(PPARError):
    """A cached artifact could not be loaded or does not match the active config."""


class SchemaVersionError(ArtifactError):
    pass


class ChecksumError(ArtifactError):
    pass


class TruncatedFileError(ArtifactError):
    pass


class HashMismatchError(ArtifactError):
    pass


class NonFiniteLossError(PPARError, FloatingPointError):
    def __init__(self, message, diagnostics=None, dump_path=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.dump_path = dump_path


class EmptyBatchWarning(UserWarning):
    """A loss was asked to reduce over zero valid positions."""


class EmptyPrototypeWarning(UserWarning):
    """No class in the batch has a usable prototype."""
