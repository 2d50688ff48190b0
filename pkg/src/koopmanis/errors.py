"""Exception types shared across the package."""


class KoopmanisError(Exception):
    """Base class for all package-specific errors."""


class ModelNotFoundError(KoopmanisError):
    """Requested built-in model name does not exist."""


class InvalidParameterError(KoopmanisError):
    """A model or config parameter is out of its admissible range."""


class ShapeError(KoopmanisError):
    """Array dimensions do not match the declared model dimensions."""


class UnsupportedSchemeError(KoopmanisError):
    """Integration scheme not applicable to the given model."""


class PathBlowupError(KoopmanisError):
    """A simulated path left the finite-state region.

    Carries the step index at which the first non-finite value appeared.
    """

    def __init__(self, step_index, message=None):
        self.step_index = step_index
        super().__init__(message or f"non-finite state at step {step_index}")


class ConfigError(KoopmanisError):
    """Experiment configuration is inconsistent or incomplete."""


class NumericalError(KoopmanisError):
    """An eigensolve or linear solve failed to meet its tolerance."""


class EmptySpectrumError(KoopmanisError):
    """Validation rejected every eigenpair; enlarge the basis or point set."""


class TuningFailedError(KoopmanisError):
    """No multiplier in the sweep grid produced any event hits."""


class DiagnosticError(KoopmanisError):
    """A diagnostic precondition failed (e.g. non-positive value function)."""


class RankDeficiencyWarning(UserWarning):
    """Feature matrix rank fell below the dictionary size."""
