"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation problems exit 1, I/O and
corrupted payloads exit 2, numerical failures exit 3.
"""


class SDError(Exception):
    exit_code = 1


class ValidationError(SDError, ValueError):
    exit_code = 1


class FormatError(ValidationError):
    """Input does not follow the on-disk layout (bad magic, bad manifest)."""


class ParameterError(ValidationError):
    pass


class FeasibilityError(ValidationError):
    """A coefficient lies outside the permitted power-of-2 set."""


class AssemblyError(ValidationError):
    pass


class UnsupportedShapeError(ValidationError):
    pass


class CorruptionError(SDError):
    exit_code = 2


class NumericalError(SDError, ArithmeticError):
    exit_code = 3


class InvariantError(SDError, AssertionError):
    """A training-time structural invariant broke (e.g. a frozen entry moved)."""

    exit_code = 3
