"""Exception types raised by the library."""


class PolyExpandError(Exception):
    """Base class for all library errors."""


class InvalidParameterError(PolyExpandError, ValueError):
    pass


class DegenerateMixtureError(PolyExpandError):
    """Mixture inner products lost positive definiteness."""


class SingularSystemError(PolyExpandError):
    pass


class IndefiniteGramError(PolyExpandError):
    pass


class EigenFailureError(PolyExpandError):
    pass


class UnsupportedModelError(PolyExpandError):
    pass


class DegreeOverflowError(PolyExpandError):
    """The generator maps a basis element outside the enumerated space."""


class ExpmFailureError(PolyExpandError):
    pass


class DomainViolationError(PolyExpandError, ValueError):
    pass


class NegativeVarianceError(PolyExpandError):
    pass


class NonConvergenceError(PolyExpandError):
    pass


class ZeroVarianceComponentError(PolyExpandError):
    pass


class NoSolutionError(PolyExpandError):
    pass


class InfeasibleMixtureError(PolyExpandError):
    pass


class InvalidMomentsError(PolyExpandError):
    pass


class DivergentIntegralError(PolyExpandError):
    pass


class OrderMismatchError(PolyExpandError, ValueError):
    pass


class NonIntegrablePayoffError(PolyExpandError):
    pass


class SingularGramianError(PolyExpandError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class UnsupportedParameterError(PolyExpandError, ValueError):
    pass


class IntegrationFailureError(PolyExpandError):
    pass
