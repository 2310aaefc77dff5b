"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when input data violates a documented invariant.

    The message is path-qualified (e.g. ``"M[3]: must be positive"``) so
    callers can point at the offending field of a case file or array.
    """


class ReductionError(RuntimeError):
    """Raised when a network reduction cannot be carried out."""


class EquilibriumError(RuntimeError):
    """Raised when the equilibrium solver fails to converge.

    Attributes:
        residual: max-norm power mismatch at the last iterate.
    """

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss turns non-finite.

    Attributes:
        episode: episode index at which the loss became non-finite.
        snapshot: parameter name -> array copy at the point of failure.
    """

    def __init__(self, message: str, episode: int, snapshot: dict):
        super().__init__(message)
        self.episode = episode
        self.snapshot = snapshot
