"""Exception classes raised across the package."""


class RiskCoupleError(Exception):
    pass


class ModelError(RiskCoupleError, ValueError):
    """Structural problem with a model, policy or grid."""


class NonPositiveDiffusion(ModelError):
    pass


class EmptyEnsemble(ModelError):
    pass


class GridMismatch(ModelError):
    pass


class NonConstantSigma(ModelError):
    pass


class NumericOverflow(RiskCoupleError, FloatingPointError):
    def __init__(self, step, path, what="state"):
        self.step = step
        self.path = path
        super().__init__(f"non-finite {what} at step {step}, path {path}")


class NonFiniteCost(NumericOverflow):
    def __init__(self, step, path):
        super().__init__(step, path, what="running cost")


class MissingInteractionRecord(RiskCoupleError, ValueError):
    pass


class AlphaZero(RiskCoupleError, ValueError):
    pass


class EmptyMeasure(RiskCoupleError, ValueError):
    pass


class SearchDiverged(RiskCoupleError, RuntimeError):
    pass


class NotConverged(RiskCoupleError, RuntimeError):
    def __init__(self, message, iterations=None, residual=None):
        self.iterations = iterations
        self.residual = residual
        super().__init__(message)


class NonPositiveEigenfunction(RiskCoupleError, RuntimeError):
    pass


class NonVanishing(RiskCoupleError, ValueError):
    """Risk-parameter schedule that does not satisfy eps^2/alpha -> 0 and alpha -> 0."""
