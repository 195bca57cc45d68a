"""Shared exception types.

Every error raised on purpose by this package derives from MalmasError so the
CLI can map failures to a single runtime exit code without enumerating modules.
"""


class MalmasError(Exception):
    """Base class for all errors raised by this package."""


class DataError(MalmasError):
    """Raised for unusable input data: missing target, ragged rows, bad values."""


class DslError(MalmasError):
    """Raised when a feature program cannot be parsed.

    Carries the byte offset of the failure in the source text.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte {offset})")
        self.message = message
        self.offset = offset


class DslTypeError(MalmasError):
    """Raised when a parsed program references columns or kinds it must not."""


class BackendError(MalmasError):
    """Base class for chat-backend failures."""


class RetryExhaustedError(BackendError):
    """Raised when the HTTP backend gave up after its final retry."""


class ScriptKeyError(BackendError):
    """Raised when a scripted backend has no entry for a request tag."""


class MalformedReplyError(BackendError):
    """Raised when an endpoint answered but the payload is not usable."""


class EvalError(MalmasError):
    """Raised for evaluation failures: bad metric/model config, adapter faults."""


class AdapterError(EvalError):
    """Raised when an external evaluator subprocess misbehaves."""


class ConfigError(MalmasError):
    """Raised for invalid run configuration."""


class MemoryStateError(MalmasError):
    """Raised on memory-store misuse: wrong round, bad snapshot version."""
