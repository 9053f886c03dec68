from typing import Optional


class CoreGuardError(Exception):
    """Base class for every error raised by the engine."""


class SizeError(CoreGuardError):
    pass


class ConfigError(CoreGuardError):
    pass


class InputError(CoreGuardError):
    pass


class NumericError(CoreGuardError):
    def __init__(self, message: str, layer_index: Optional[int] = None):
        super().__init__(message)
        self.layer_index = layer_index


class LockError(CoreGuardError):
    pass


class VerificationError(CoreGuardError):
    def __init__(self, layer: str, line: str, error: float, report=None):
        super().__init__(f"lock verification failed at {layer} line {line} (max rel err {error:.3e})")
        self.layer = layer
        self.line = line
        self.error = error
        self.report = report


class ProtocolError(CoreGuardError):
    pass


class PadExhaustedError(ProtocolError):
    pass


class InsufficientTracesError(CoreGuardError):
    pass


class CheckpointError(CoreGuardError):
    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)
        self.offset = offset


class KeyFileError(CoreGuardError):
    pass


class KeyMismatchError(KeyFileError):
    pass
