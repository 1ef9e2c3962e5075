"""Exception hierarchy for permiv."""


class PermivError(ValueError):
    """Base class for all errors raised by permiv."""


class RankDeficient(PermivError):
    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class ZeroMatrix(PermivError):
    pass


class NotPositiveDefinite(PermivError):
    pass


class NotSymmetric(PermivError):
    pass


class MissingIntercept(PermivError):
    pass


class DimensionMismatch(PermivError):
    pass


class SingularCovariance(PermivError):
    pass


class SingularOmega(PermivError):
    pass


class RankDeficientJacobian(PermivError):
    pass


class CapExceeded(PermivError):
    pass


class NotScalarInstrument(PermivError):
    pass


class TooFewDraws(PermivError):
    pass


class EmptyGrid(PermivError):
    pass


class ConfigError(PermivError):
    pass


class ParseError(PermivError):
    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column
