"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes (schema 2, positivity 3, estimation 4,
config 5), so estimator code should raise the most specific class that
applies rather than bare ValueError.
"""


class TiltTransportError(Exception):
    """Base class for all package errors."""


class SchemaError(TiltTransportError):
    """Input data violates the declared schema (missing column, unseen level,
    outcome on a target row, non-binary treatment, ...)."""


class PositivityError(TiltTransportError):
    """A shared-covariate level carries target rows but no source rows, so the
    target population cannot be reached from the source sample."""


class OverlapError(TiltTransportError):
    """A covariate stratum with source rows is missing one treatment arm, so
    arm-specific quantities are undefined there."""


class EstimationError(TiltTransportError):
    """An estimator could not produce a result (singular design, too many
    failed bootstrap replicates, unevaluable stratum, ...)."""


class ConvergenceError(EstimationError):
    """An iterative fit failed to converge or diverged (separation)."""


class ConfigError(TiltTransportError):
    """A job configuration is invalid (bad ranges, missing paths, ...)."""
