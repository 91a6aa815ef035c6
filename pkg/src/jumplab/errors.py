class JumplabError(Exception):
    """Base class for pipeline errors."""


class InputFormatError(JumplabError, ValueError):
    """Malformed input: unsorted or duplicate timestamps, missing columns."""


class DataError(JumplabError, ValueError):
    """Input that parses but violates a data invariant (e.g. non-positive prices)."""


class ConfigError(JumplabError, ValueError):
    """Invalid parameter or configuration value."""


class StageError(JumplabError, RuntimeError):
    """A pipeline stage failed after its inputs were accepted."""
