"""Exception hierarchy shared across the package.

Every raisable condition named in an operation contract maps to one of these.
CLI exit codes: usage errors are argparse's 2; ConfigError -> 3; DataError -> 4;
anything else escaping a command -> 5.
"""


class FlexkoptError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(FlexkoptError, ValueError):
    """An argument violates a documented precondition."""


class UnsupportedFormatError(FlexkoptError):
    """Input is recognized but uses an unsupported variant (e.g. non-EUC_2D)."""


class MalformedInputError(FlexkoptError):
    """Input text or JSON does not parse against the documented format."""


class InvalidStateError(FlexkoptError):
    """Operation called on an object in the wrong lifecycle state."""


class InvalidMoveError(FlexkoptError):
    """A k-opt move violates the decode state machine's rules."""


class SizeLimitError(FlexkoptError):
    """Instance exceeds a hard size bound (exact oracles only)."""


class InfeasibleConstructionError(FlexkoptError):
    """No feasible object can be built (e.g. too few depot copies to split)."""


class ConfigError(FlexkoptError):
    """A configuration key or value is invalid."""


class DataError(FlexkoptError):
    """Runtime data inconsistency (e.g. result/reference id mismatch)."""


class TrainingDivergedError(FlexkoptError):
    """A loss or parameter went non-finite during optimization."""
