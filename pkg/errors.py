"""Error hierarchy shared by every module, plus the CLI exit-code mapping."""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class PatchAttackError(Exception):
    """Base class for every error raised by this project."""

    exit_code = EXIT_USAGE


class UsageError(PatchAttackError):
    exit_code = EXIT_USAGE


class ConfigError(PatchAttackError, ValueError):
    exit_code = EXIT_USAGE


class ShapeError(PatchAttackError, ValueError):
    """Operand extents do not agree."""

    exit_code = EXIT_NUMERIC


class TapeError(PatchAttackError, RuntimeError):
    """Misuse of the gradient tape (wrong tape, repeated backward, non-scalar root)."""

    exit_code = EXIT_NUMERIC


class NumericError(PatchAttackError, ArithmeticError):
    """An operation produced NaN or Inf."""

    exit_code = EXIT_NUMERIC


class DataValidationError(PatchAttackError, ValueError):
    exit_code = EXIT_DATA


class LabelError(PatchAttackError, ValueError):
    """A class index outside 0..k-1."""

    exit_code = EXIT_DATA


class CheckpointError(PatchAttackError):
    exit_code = EXIT_DATA


class BelowResolutionError(PatchAttackError, ValueError):
    """The rendered patch would be smaller than one sensor pixel."""

    exit_code = EXIT_DATA


class FootprintError(PatchAttackError, ValueError):
    exit_code = EXIT_DATA


def exit_code_for(exc: BaseException) -> int:
    return getattr(exc, "exit_code", EXIT_USAGE)
