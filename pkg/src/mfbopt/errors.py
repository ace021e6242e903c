"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition (shape, range, label)."""


class NumericalFailureError(RuntimeError):
    """A numerical routine could not recover (factorization, line search)."""


class TrainingFailureError(NumericalFailureError):
    """Every restart of a model fit failed numerically."""


class ProposalFailureError(RuntimeError):
    """Every inner acquisition optimization failed."""


class ProtocolError(RuntimeError):
    """Ask-tell call sequence violated (e.g. two suggests without an observe)."""
