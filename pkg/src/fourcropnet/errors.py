"""Exception hierarchy. CLI exit codes are keyed off these classes."""


class FourCropNetError(Exception):
    exit_code = 1


class ConfigError(FourCropNetError, ValueError):
    exit_code = 2


class DataError(FourCropNetError):
    exit_code = 3


class NumericalError(FourCropNetError, FloatingPointError):
    exit_code = 4


class VerificationError(FourCropNetError):
    exit_code = 5


class DimensionMismatchError(FourCropNetError, ValueError):
    """Raised when an input extent does not match what a kernel expects."""

    exit_code = 2

    def __init__(self, axis: str, expected, got):
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"dimension mismatch on axis '{axis}': expected {expected}, got {got}")


class DegenerateBatchError(NumericalError):
    pass


class NonFiniteError(NumericalError):
    pass


class ChecksumError(DataError):
    pass


class VersionError(ConfigError):
    def __init__(self, field: str, expected, got):
        self.field = field
        super().__init__(f"checkpoint field '{field}' is {got!r}, session expects {expected!r}")
