class TrainerError(Exception):
    """Base class for trainer failures."""


class InvalidInput(TrainerError):
    """A parameter violates its documented domain."""


class TrainingFailed(TrainerError):
    """Optimization diverged (non-finite loss)."""
