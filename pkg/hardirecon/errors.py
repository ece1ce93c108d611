"""Exceptions raised by hardirecon and the exit code each one maps to."""


class HardiReconError(Exception):
    """Base class of all library errors. Unhandled, it is a runtime failure."""

    exit_code = 2


class ValidationError(HardiReconError, ValueError):
    """Input violates a documented precondition."""

    exit_code = 1


class ShapeError(ValidationError):
    """Tensor or matrix shapes do not fit together."""


class UsageError(HardiReconError):
    """Wrong command line usage or API call order."""

    exit_code = 1


class FormatError(ValidationError):
    """Malformed file content.

    Args:
        message: what is wrong.
        path: file that was read.
        line: 1-based line number, if known.
        column: 1-based column number, if known.
    """

    def __init__(self, message, path=None, line=None, column=None):
        self.path = path
        self.line = line
        self.column = column
        location = []
        if path is not None:
            location.append(str(path))
        if line is not None:
            location.append('line %d' % line)
        if column is not None:
            location.append('column %d' % column)
        if location:
            message = '%s: %s' % (', '.join(location), message)
        super().__init__(message)


class NonFiniteError(HardiReconError):
    """A NaN or Inf appeared in a computation on finite inputs."""


class TrainingError(HardiReconError):
    """Training was aborted."""


class SynthesisError(HardiReconError):
    """Synthetic data could not be generated with the requested settings."""


class SolverError(HardiReconError):
    """A linear system could not be solved."""


class SelftestFailure(HardiReconError):
    """At least one numeric self-check failed."""

    exit_code = 3
