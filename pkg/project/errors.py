class PruneSearchError(Exception):
    """Base class for all errors raised by this package. The exit code is used by the CLI."""

    exit_code = 1


class ConfigError(PruneSearchError):
    exit_code = 2


class SchemaError(PruneSearchError):
    """The IR document does not conform to the schema."""

    exit_code = 2


class ShapeError(PruneSearchError):
    """A dataflow or tensor shape mismatch."""

    exit_code = 2


class CycleError(PruneSearchError):
    """The dataflow edges of an IR document do not form a DAG."""

    exit_code = 2


class PolicyError(PruneSearchError):
    exit_code = 2


class StrategyError(PruneSearchError):
    exit_code = 2


class LowerError(PruneSearchError):
    exit_code = 2


class DimError(PruneSearchError):
    exit_code = 2


class MissingParamsError(PruneSearchError):
    exit_code = 2


class NotScalarError(PruneSearchError):
    exit_code = 2


class SlotMismatchError(PruneSearchError):
    exit_code = 2


class InsufficientBufferError(PruneSearchError):
    exit_code = 2


class EmptySplitError(PruneSearchError):
    exit_code = 2


class OracleError(PruneSearchError):
    """Training or evaluation of a network failed."""

    exit_code = 4


class DivergenceError(OracleError):
    """The training loss became non-finite."""


class SearchFailedError(PruneSearchError):
    """No episode of a search produced a model that satisfies the FLOPs constraint."""

    exit_code = 3
