"""Exception types raised by :mod:`circe_mg`."""


class CirceError(ValueError):
    """Base class for every validation or estimation error in the package."""


class DimensionMismatch(CirceError):
    """Array shapes or lengths are inconsistent."""


class RankDeficientH(CirceError):
    """The derivative matrix has deficient column rank (p > n or collinear columns)."""


class EmptyGroup(CirceError):
    """A declared group contains no observations."""


class NegativeNoiseVariance(CirceError):
    """A supplied noise variance r_i is negative."""


class DegenerateVariance(CirceError):
    """Some observation variance V_i lies below the numerical floor."""


class SingularNormalEquations(CirceError):
    """The weighted least-squares system for the mean update is singular."""


class PreconditionViolated(CirceError):
    """An operation was called outside its stated domain."""


class TooFewSamples(CirceError):
    """Not enough residuals for the requested statistic."""


class IndexOutOfRange(CirceError, IndexError):
    """An observation, group, or factor index is out of bounds."""


class ParseError(CirceError):
    """A data or specification file could not be parsed.

    Carries the offending location when known: ``row`` is the 1-based data-row
    index (header excluded) and ``column`` the column name.
    """

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column
