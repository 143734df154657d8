"""Exception hierarchy shared by every lesionforge module.

The CLI maps :class:`NumericError` to exit code 2 and every other
:class:`LesionForgeError` to exit code 1.
"""


class LesionForgeError(Exception):
    """Base class; ``kind`` is the machine-parsable prefix used by the CLI."""

    kind = "error"


class ContractError(LesionForgeError, ValueError):
    kind = "contract"


class DimensionError(ContractError):
    kind = "dimension"


class DegenerateBatchError(ContractError):
    kind = "degenerate-batch"


class StateError(LesionForgeError, RuntimeError):
    kind = "state"


class ConfigError(ContractError):
    kind = "config"


class SchemaError(ContractError):
    kind = "schema"


class FormatError(ContractError):
    kind = "format"


class SplitError(ContractError):
    kind = "split"


class DataIOError(LesionForgeError, OSError):
    kind = "io"


class NumericError(LesionForgeError, ArithmeticError):
    kind = "numeric"
