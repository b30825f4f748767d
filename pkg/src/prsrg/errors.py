"""Shared exception types.

Every contract violation in the library raises one of these rather than a bare
ValueError, so callers (and the CLI) can map failure classes to exit codes.
"""


class ContractViolation(ValueError):
    """An argument broke a structural precondition (base-point mismatch, off-manifold point)."""


class OutOfBall(ValueError):
    """A tangent vector left the constraint ball of radius D."""


class EmptyBatch(ValueError):
    """A gradient was requested over an empty index batch."""


class ParameterError(ValueError):
    """A solver parameter is out of its documented range."""


class SchemaError(ValueError):
    """A trace segment is missing columns a checker needs."""


class NumericalFailure(RuntimeError):
    """Non-finite values appeared mid-run.

    Carries the iteration index at which the estimator or iterate went bad.
    """

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
