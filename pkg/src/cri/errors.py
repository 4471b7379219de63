class CRIError(Exception):
    """Base class for package errors."""


class InvalidClassError(CRIError, ValueError):
    pass


class InvalidLatentError(CRIError, ValueError):
    pass


class CorruptSnapshotError(CRIError, ValueError):
    pass


class InvalidSpecError(CRIError, ValueError):
    pass


class ConfigError(CRIError, ValueError):
    pass


class DivergenceError(CRIError, RuntimeError):
    """Raised when a loss becomes non-finite or exceeds the divergence bound.

    The partial trajectory is attached so callers can record what happened.
    """

    def __init__(self, stage, iteration, value, trajectory=None):
        self.stage = stage
        self.iteration = iteration
        self.value = value
        self.trajectory = trajectory if trajectory is not None else []
        super().__init__(f"{stage} diverged at iteration {iteration} (loss={value!r})")
