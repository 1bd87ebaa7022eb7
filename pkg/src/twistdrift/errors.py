"""Exception hierarchy shared by all modules."""


class DriftError(Exception):
    """Base class for library errors."""


class InvalidParameter(DriftError, ValueError):
    pass


class BallExitsAnnulus(DriftError):
    pass


class DegenerateDerivative(DriftError):
    pass


class EmptyFamily(DriftError):
    pass


class RecertificationFailed(DriftError):
    def __init__(self, residual):
        super().__init__(f"recertification failed, residual={residual:.3e}")
        self.residual = residual


class OutsideDomain(DriftError):
    def __init__(self, step, symbol):
        super().__init__(f"point outside domain of {symbol} at step {step}")
        self.step = step
        self.symbol = symbol


class OutsideRestriction(DriftError):
    def __init__(self, step):
        super().__init__(f"orbit left the restriction annulus at step {step}")
        self.step = step


class BudgetExhausted(DriftError):
    def __init__(self, budget, partial=None):
        super().__init__(f"budget of {budget} exhausted")
        self.budget = budget
        self.partial = partial


class RecurrenceNotFound(DriftError):
    def __init__(self, budget):
        super().__init__(f"no recurrence within {budget} iterates")
        self.budget = budget


class DomainEscapesAnnulus(DriftError):
    pass


class TouchesTop(DriftError):
    pass


class FrontierNotInvariant(DriftError):
    def __init__(self, residual):
        super().__init__(f"frontier not invariant, residual={residual:.3e}")
        self.residual = residual


class NotFound(DriftError):
    def __init__(self, budget, what="witness"):
        super().__init__(f"{what} not found within budget {budget}")
        self.budget = budget


class NoSplittingArc(DriftError):
    pass


class Stalled(DriftError):
    def __init__(self, annulus, circle, reason=""):
        msg = f"stalled in annulus {annulus} at circle rho={circle}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.annulus = annulus
        self.circle = circle
        self.reason = reason


class ConfigError(DriftError):
    pass


class ChainConditionViolated(DriftError):
    def __init__(self, k):
        super().__init__(f"good-chain condition violated at link {k}")
        self.k = k


class LinkMissed(DriftError):
    def __init__(self, k):
        super().__init__(f"link {k} missed the target circle neighbourhood")
        self.k = k


class NotReplayable(DriftError):
    pass


class IoError(DriftError, OSError):
    pass
