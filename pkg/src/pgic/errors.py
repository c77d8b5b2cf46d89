"""Exception types shared across the codec."""


class PgicError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(PgicError, ValueError):
    """Tensor, grid or configuration shapes do not fit together."""


class AutogradError(PgicError, RuntimeError):
    pass


class FormatError(PgicError, ValueError):
    """A byte stream or model file could not be parsed."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ConfigMismatchError(FormatError):
    """Stored parameter shapes disagree with the stored configuration."""


class PacketGapError(FormatError):
    def __init__(self, missing: int):
        super().__init__(f"packet sequence gap: packet {missing} is missing")
        self.missing = missing


class NumericalError(PgicError, ArithmeticError):
    """A non-finite value appeared where only finite values are allowed."""
