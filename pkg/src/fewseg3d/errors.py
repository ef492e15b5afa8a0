"""Exception types shared across the package."""


class FewSegError(Exception):
    """Base class for package errors."""


class InvalidSpecError(FewSegError, ValueError):
    """A scene or run specification is malformed (e.g. zero classes)."""


class FormatError(FewSegError, ValueError):
    """A serialized artifact failed to parse; message names the offending field."""


class EpisodeSamplingError(FewSegError, ValueError):
    """An episode could not be drawn; message names the deficient class."""


class TrainingError(FewSegError, RuntimeError):
    """Training diverged; message carries the step index."""


class UndefinedMetricError(FewSegError, ValueError):
    """A metric is undefined for the given inputs (e.g. all-zero confusion)."""
