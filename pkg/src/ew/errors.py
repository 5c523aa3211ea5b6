"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateNormError(ValueError):
    """A vector norm fell below the numeric floor where cosine similarity is undefined."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class StateError(RuntimeError):
    """Operation illegal in the object's current state (e.g. sink append after seal)."""


class ScheduleError(ValueError):
    """Diffusion time index outside the schedule grid."""


class StalenessError(RuntimeError):
    """Fake score model was not refit within its staleness budget."""


class AlignmentError(ValueError):
    """Frame or chunk indices are not aligned to the required boundary."""


class TrainingAbort(RuntimeError):
    """Training stopped because a loss went non-finite; carries a diagnostic dump."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
