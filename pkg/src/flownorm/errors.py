"""Exception types shared by all modules.

Every error carries a short machine-readable ``kind`` string; the CLI maps
kinds to exit codes and emits them verbatim in its error JSON.
"""

INPUT_KINDS = frozenset(
    {
        "missing-file",
        "malformed-line",
        "empty-association",
        "too-small-image",
        "missing-depth",
        "insufficient-overlap",
        "empty-calibration",
        "invalid-config",
        "too-few-poses",
    }
)


class FlowNormError(Exception):
    kind = "internal"

    def __init__(self, message, kind=None):
        super().__init__(message)
        if kind is not None:
            self.kind = kind


class InputError(FlowNormError):
    """Bad or missing user input (files, formats, configuration)."""

    kind = "invalid-config"


class TooSmallImageError(InputError):
    kind = "too-small-image"


class TooFewPointsError(FlowNormError):
    kind = "too-few-points"


class DegenerateSystemError(FlowNormError):
    kind = "degenerate-system"


class InvalidConfigurationError(FlowNormError):
    """A geometric query was made where the result is undefined."""

    kind = "invalid-configuration"


class NoConeError(FlowNormError):
    kind = "no-cone"
