"""Exception types shared across the package."""


class PdfnetError(Exception):
    """Base class; the CLI maps every subclass to a nonzero exit code."""

    exit_code = 1


class ShapeError(PdfnetError, ValueError):
    exit_code = 3


class DataError(PdfnetError, ValueError):
    exit_code = 4


class NotFound(PdfnetError, FileNotFoundError):
    exit_code = 5


class AugmentError(PdfnetError, RuntimeError):
    exit_code = 6


class IoError(PdfnetError, OSError):
    exit_code = 7


class NumericsError(PdfnetError, FloatingPointError):
    exit_code = 8


class EmptyInput(PdfnetError, ValueError):
    exit_code = 9


class VersionError(PdfnetError, ValueError):
    exit_code = 10


class ConfigError(PdfnetError, ValueError):
    exit_code = 11
