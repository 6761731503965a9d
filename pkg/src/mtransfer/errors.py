"""Exception hierarchy shared by the library and the CLI."""


class MTError(Exception):
    """Base class for every error raised by mtransfer."""


class ShapeError(MTError, ValueError):
    pass


class FormatError(MTError):
    """A binary container (weights or checkpoint) could not be parsed."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


class ImageDecodeError(MTError):
    pass


class ConfigError(MTError):
    pass


class NumericError(MTError, ArithmeticError):
    pass
