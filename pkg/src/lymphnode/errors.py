"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to, so the command-line
front end can translate failures without string matching.
"""


class LymphError(Exception):
    exit_code = 1


class UsageError(LymphError):
    """Invalid parameter combination or bad invocation."""

    exit_code = 2


class DataIOError(LymphError):
    """Missing or unreadable input files."""

    exit_code = 3


class FormatError(LymphError):
    """Malformed container, IDX stream, or credential file."""

    exit_code = 4


class NumericalError(LymphError):
    """Divergence or non-finite values during optimization."""

    exit_code = 5


class EvalFailure(LymphError):
    """An evaluation or attack protocol precondition was violated."""

    exit_code = 6


class ShapeError(LymphError, ValueError):
    """Tensor shape mismatch; message names the offending dimension."""

    exit_code = 2
