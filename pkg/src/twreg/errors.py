"""Exception hierarchy.

Every error raised by the package derives from :class:`TwrError` so callers
(and the CLI exit-code mapping) can catch by category.
"""


class TwrError(Exception):
    """Base class for all package errors."""


class ConfigError(TwrError, ValueError):
    """Invalid parameters or inconsistent inputs."""


class DimensionMismatch(ConfigError):
    pass


class InvalidLength(ConfigError):
    pass


class IndexOutOfRange(ConfigError, IndexError):
    pass


class FoldTooSmall(ConfigError):
    pass


class MatrixFormatError(TwrError):
    """Malformed matrix or geometry file."""


class MalformedHeader(MatrixFormatError):
    pass


class NonFiniteValue(MatrixFormatError):
    pass


class FileDimensionMismatch(MatrixFormatError, DimensionMismatch):
    """Cell count in a matrix file disagrees with its header."""


class IoFailure(TwrError, OSError):
    pass


class NumericalError(TwrError, ArithmeticError):
    """A computation could not produce a finite, well-defined result."""


class ConvergenceFailure(NumericalError):
    pass


class DegenerateOperator(NumericalError):
    pass


class ZeroColumn(NumericalError):
    pass


class SingularUpdate(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


class NoValidComponent(NumericalError):
    pass


class SilentTruth(NumericalError):
    pass


class NoEnergy(NumericalError):
    pass
