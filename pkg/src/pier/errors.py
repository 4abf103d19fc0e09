"""Error taxonomy shared across the package.

Every failure raised on purpose derives from PierError and carries a short
machine-readable code, so the CLI can emit one-line parsable errors.
"""


class PierError(Exception):
    code = "error"


class DimensionError(PierError):
    """Shapes incompatible for the requested operation."""

    code = "dimension"


class ContractError(PierError):
    """A documented precondition was violated by the caller."""

    code = "contract"


class FeatureLookupError(PierError):
    """Feature id outside the vocabulary of its field."""

    code = "lookup"


class FormatError(PierError):
    """Malformed serialized artifact (dataset line, checkpoint header)."""

    code = "format"


class IntegrityError(PierError):
    """Structurally valid container whose payload does not add up."""

    code = "integrity"


class UndefinedMetricError(PierError):
    """Metric has no defined value on this input (e.g. single-class AUC)."""

    code = "undefined-metric"


class NumericError(PierError):
    """Non-finite value where a finite one is required."""

    code = "numeric"
