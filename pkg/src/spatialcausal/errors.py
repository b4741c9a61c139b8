"""Exception hierarchy shared by all spatialcausal modules."""


class SpatialCausalError(Exception):
    """Base class for all package errors."""

    code = "error"


class DimensionError(SpatialCausalError):
    """Operand shapes are incompatible with the requested operation."""

    code = "dimension_error"


class NumericError(SpatialCausalError):
    """A computation produced non-finite values or an unstable factorization."""

    code = "numeric_error"


class ContractError(SpatialCausalError):
    """An argument violates a documented precondition."""

    code = "contract_error"


class DataError(SpatialCausalError):
    """A dataset is unusable (missing outcomes, empty selection, bad geometry)."""

    code = "data_error"


class FormatError(SpatialCausalError):
    """A file on disk does not match its binary or textual format."""

    code = "format_error"


class ConfigError(SpatialCausalError):
    """An experiment configuration is malformed or inconsistent."""

    code = "config_error"
