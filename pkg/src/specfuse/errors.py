"""Shared error taxonomy for the pipeline.

Everything derives from ValueError so callers that don't care about the
distinction can catch one thing; the CLI maps any of these to exit code 1
with a one-line message.
"""


class SpecfuseError(ValueError):
    """Base class for pipeline errors."""


class DimensionError(SpecfuseError):
    """Shape or axis mismatch between operands."""


class ContractError(SpecfuseError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class PreprocessingError(SpecfuseError):
    """Signal too short / malformed for a preprocessing step."""


class IngestionError(SpecfuseError):
    """CSV or manifest content failed validation."""


class ConfigError(SpecfuseError):
    """Bad configuration value, unknown key, or invalid generator spec."""


class DegenerateGraphError(SpecfuseError):
    """Graph operation asked to run on fewer than two nodes."""
