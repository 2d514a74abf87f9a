"""Exception types shared across the package.

The CLI maps these onto process exit codes, so keep the hierarchy flat.
"""


class ConfigError(ValueError):
    """Bad run configuration or schedule/dataset mismatch (exit code 2)."""


class ScheduleError(ConfigError):
    """Step index outside the schedule or malformed schedule shorthand."""


class EmptyStepError(ConfigError):
    """A learning step selected no samples (degenerate schedule)."""


class DataError(ValueError):
    """Unreadable or inconsistent dataset / buffer files (exit code 3)."""


class TrainingDivergence(RuntimeError):
    """A loss became non-finite during optimisation (exit code 4)."""


class PlacementSkip(ValueError):
    """An instance cannot be placed at the requested anchor."""
