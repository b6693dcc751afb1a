"""Exception hierarchy shared by the toolkit."""


class CGMXError(Exception):
    """Base class for every error raised by cgmexplain."""


class FormatError(CGMXError, ValueError):
    pass


class AlignmentError(CGMXError, ValueError):
    pass


class DegenerateRangeError(CGMXError, ValueError):
    pass


class TrainingError(CGMXError, RuntimeError):
    """A trainer diverged or its quality gate was not met.

    ``diagnostics`` carries whatever the trainer measured (losses, accuracy,
    reconstruction error) so callers can report why.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class AbductionError(CGMXError, ValueError):
    pass


class InterventionSpecError(CGMXError, KeyError):
    pass


class ShapeError(CGMXError, ValueError):
    pass


class DistributionError(CGMXError, ValueError):
    pass


class SearchError(CGMXError, RuntimeError):
    pass


class BackgroundError(CGMXError, ValueError):
    pass


class ConfigError(CGMXError, KeyError):
    """A required configuration key is missing or invalid."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key

    def __str__(self):
        return self.args[0]
