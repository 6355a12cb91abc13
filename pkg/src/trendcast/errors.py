"""Exception hierarchy shared across the package."""


class TrendcastError(Exception):
    """Base class for all errors raised by trendcast."""


class DataError(TrendcastError):
    """Input data does not satisfy the file or series contract."""


class MissingColumn(DataError):
    pass


class NonMonotoneDates(DataError):
    pass


class EmptyFile(DataError):
    pass


class MalformedRow(DataError):
    pass


class EmptyInput(DataError):
    pass


class EmptyIntersection(DataError):
    pass


class TooShort(TrendcastError):
    pass


class WindowTooLarge(TrendcastError):
    pass


class BadSpans(TrendcastError):
    pass


class LengthMismatch(TrendcastError):
    pass


class ShapeMismatch(TrendcastError):
    pass


class SingularRegression(TrendcastError):
    pass


class TooFewSamples(TrendcastError):
    pass


class EmptySplit(TrendcastError):
    pass


class EmptySlice(TrendcastError):
    pass


class DegenerateVariance(TrendcastError):
    pass


class NonFiniteValue(TrendcastError):
    pass


class NonFiniteGradient(NonFiniteValue):
    pass


class NonFiniteLoss(NonFiniteValue):
    pass


class ConfigError(TrendcastError):
    pass
