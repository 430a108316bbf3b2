"""Exception hierarchy.

Every error carries the CLI exit code of its family: configuration problems
exit with 2, data problems with 3 and numerical failures with 4.
"""


class CfdgpError(Exception):
    exit_code = 1


class ConfigError(CfdgpError, ValueError):
    exit_code = 2


class InvalidSpec(ConfigError):
    pass


class DataError(CfdgpError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, row, reason):
        self.row = row
        self.reason = reason
        super().__init__(f"row {row}: {reason}")


class AlignmentError(DataError):
    pass


class NonMultipleLength(DataError):
    pass


class MissingValueInWindow(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class Empty(DataError):
    pass


class EmptyAfterExclusion(DataError):
    pass


class InsufficientSupport(DataError):
    pass


class ZeroVariance(DataError):
    pass


class NoUsableNeighbors(DataError):
    pass


class ZeroWeightSum(DataError):
    pass


class MissingSlowReading(DataError):
    pass


class UntrainedModel(DataError):
    pass


class LeakageDetected(DataError):
    pass


class NumericalError(CfdgpError, ArithmeticError):
    exit_code = 4


class NotPositiveDefinite(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


class Diverged(NumericalError):
    pass
