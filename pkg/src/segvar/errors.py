"""Exception types shared across the toolkit."""


class SegvarError(Exception):
    """Base class for all toolkit errors."""


class PnmError(SegvarError):
    """Malformed or unsupported PGM/PPM content."""


class ManifestError(SegvarError):
    """Bad manifest file: duplicate ids, missing keys, or no records."""


class ConfigError(SegvarError):
    """Invalid configuration value or unparsable config file."""


class MissingArtifactError(SegvarError):
    """A pipeline stage's required upstream output does not exist."""

    def __init__(self, path, hint=""):
        self.path = str(path)
        msg = f"missing artifact: {self.path}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)


class DegenerateVarianceError(SegvarError):
    """Paired t-test input whose differences have zero variance."""


class DecompositionError(SegvarError):
    """Internal invariant breach: the per-pixel loss identity failed."""
