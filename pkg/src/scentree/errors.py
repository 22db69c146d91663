"""Exception hierarchy shared by all scentree modules."""


class ScenTreeError(Exception):
    """Base class for every error raised by scentree."""


class NonAnticipativityViolation(ScenTreeError):
    """Node values differ inside a predecessor class."""


class ProbabilityError(ScenTreeError):
    """Negative or non-normalized probabilities."""


class LeafHasNoSubtree(ScenTreeError):
    pass


class ShapeMismatch(ScenTreeError):
    pass


class InfeasibleMarginals(ScenTreeError):
    """Supply and demand totals disagree beyond tolerance."""


class DegenerateInput(ScenTreeError):
    pass


class SizeLimitExceeded(ScenTreeError):
    pass


class SingularSubCovariance(ScenTreeError):
    pass


class BetaOutOfRange(ScenTreeError):
    pass


class UnknownLipschitz(ScenTreeError):
    pass


class UnknownConditional(ScenTreeError):
    pass


class QuantizerDiverged(ScenTreeError):
    pass


class EmptySubtree(ScenTreeError):
    pass


class Infeasible(ScenTreeError):
    pass
