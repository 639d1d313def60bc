"""Exception and warning types shared across the toolkit."""


class RFBSDEError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(RFBSDEError, ValueError):
    pass


class ParameterError(RFBSDEError, ValueError):
    pass


class GridError(ParameterError):
    pass


class NormalizationError(RFBSDEError, ValueError):
    pass


class InfeasibleLCPError(RFBSDEError, ArithmeticError):
    """No complementary active set solves the per-step reflection problem."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class ConvergenceError(RFBSDEError, ArithmeticError):
    pass


class UnsupportedIntegrandError(RFBSDEError, TypeError):
    pass


class CoefficientError(RFBSDEError, ArithmeticError):
    pass


class IntensityBoundError(RFBSDEError, ArithmeticError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class StabilityError(RFBSDEError, ArithmeticError):
    pass


class ExtrapolationError(RFBSDEError, ValueError):
    pass


class ConfigError(RFBSDEError, ValueError):
    pass


class DivergenceWarning(RuntimeWarning):
    pass


class RegressionRankWarning(RuntimeWarning):
    pass


class UnreliableWindowWarning(RuntimeWarning):
    pass


class DiscretizationWarning(RuntimeWarning):
    pass
