"""Exception types shared across the package."""


class UVMapIDError(Exception):
    """Base class for all package errors."""


class ValidationError(UVMapIDError, ValueError):
    """Raised when an input violates a documented precondition."""


class DegenerateTriangleError(ValidationError):
    pass


class ObjParseError(UVMapIDError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingUVError(ObjParseError):
    pass


class CheckpointError(UVMapIDError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(
            f"checkpoint format version {found} is not supported (expected {expected})"
        )


class NonFiniteLossError(UVMapIDError, FloatingPointError):
    def __init__(self, tensor_name: str):
        self.tensor_name = tensor_name
        super().__init__(f"non-finite values encountered in {tensor_name}")
