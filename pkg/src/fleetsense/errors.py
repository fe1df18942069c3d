"""Exception types raised across the package."""


class FleetSenseError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FleetSenseError, ValueError):
    """Invalid grid, scenario or run configuration."""


class SchemaError(FleetSenseError, ValueError):
    """Input file header does not match the expected column mapping."""


class ValidationError(FleetSenseError, ValueError):
    """A loaded value violates a documented invariant."""


class EmptyAggregateError(FleetSenseError, ValueError):
    """A requested pollutant has no readings at all."""


class InsufficientDataError(FleetSenseError, ValueError):
    """Too few paired observations for a statistic."""


class DimensionError(FleetSenseError, ValueError):
    """Array shapes do not agree."""


class SelectionError(FleetSenseError, RuntimeError):
    """Logic error while building a selection (e.g. duplicate candidate)."""


class SizeCapError(FleetSenseError, ValueError):
    """Problem too large for the exhaustive solver."""
