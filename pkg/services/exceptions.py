"""
Error hierarchy shared by the estimation services.
"""


class EstimationError(Exception):
    """Base class for every error raised by the estimation pipeline."""


class ConfigurationError(EstimationError, ValueError):
    """A configuration value is missing, malformed or out of range."""


class DataError(EstimationError):
    """An input file or event log is malformed."""


class NoProbesError(EstimationError):
    """Not enough probe vehicles to form a single estimation interval."""


class MeasurementUnavailable(EstimationError):
    """The travel-time measurement vector is undefined for an interval."""


class DegenerateFilter(EstimationError):
    """The Kalman gain is 0/0 (zero prior covariance and zero measurement noise)."""
