"""Exception types shared across the package."""


class LTWError(Exception):
    """Base class for package errors."""


class ConfigError(LTWError, ValueError):
    """Invalid parameter or configuration value."""


class IngestionError(LTWError, ValueError):
    """Corpus could not be turned into a model."""


class FormatError(LTWError, ValueError):
    """A serialized model, weight file or record is malformed."""


class UndetectableError(LTWError):
    """No token was selected for scoring, so no z-score exists."""


class ZeroVectorError(LTWError, ValueError):
    """Cosine similarity requested for a zero vector."""


class StaleCacheError(LTWError):
    """A forward cache was used with parameters other than the ones that produced it."""


class TrainingDiverged(LTWError):
    """A loss became non-finite; carries the last parameters that were finite."""

    def __init__(self, message: str, last_good=None, step: int | None = None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step
