"""Exception hierarchy.

Every error raised on purpose by the package derives from ``DigiscError`` and
carries a short machine-readable ``code`` that the CLI prints and maps to an
exit status.
"""


class DigiscError(Exception):
    code = "error"
    exit_status = 1


class ConfigurationError(DigiscError, ValueError):
    code = "configuration"
    exit_status = 2


class SchemaError(ConfigurationError):
    code = "schema"
    exit_status = 3


class MissingFileError(DigiscError, FileNotFoundError):
    code = "missing-file"
    exit_status = 4


class StageMismatchError(ConfigurationError):
    code = "stage-mismatch"
    exit_status = 5


class DegenerateInputError(DigiscError, ValueError):
    code = "degenerate-input"
    exit_status = 6


class FramingError(DigiscError, ValueError):
    code = "framing"
    exit_status = 7


class PowerContractError(DigiscError, ValueError):
    code = "power-contract"
    exit_status = 8


class DivergenceError(DigiscError, RuntimeError):
    code = "divergence"
    exit_status = 9


class IncompleteGridError(DigiscError, ValueError):
    code = "incomplete-grid"
    exit_status = 10


class OrderingViolationError(DigiscError):
    code = "ordering-violation"
    exit_status = 11
