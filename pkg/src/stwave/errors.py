"""Exception hierarchy shared by every stwave module.

Each class carries the process exit code the CLI maps it to.
"""


class StwaveError(Exception):
    exit_code = 1


class ShapeError(StwaveError, ValueError):
    """Operand extents do not agree."""


class NumericalFault(StwaveError, FloatingPointError):
    """NaN or Inf appeared in a tensor, gradient, or loss."""

    exit_code = 2


class ContractError(StwaveError, ValueError):
    """A caller broke an operation precondition (e.g. non-scalar loss)."""


class ConfigError(StwaveError, ValueError):
    """Invalid or inconsistent configuration."""


class DegenerateGraphError(StwaveError, ValueError):
    """Distance matrix or adjacency cannot yield a usable graph."""


class DegenerateDataError(StwaveError, ValueError):
    """Data too short or too constant for the requested processing."""


class ParseError(StwaveError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    exit_code = 1

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class CheckpointError(StwaveError, ValueError):
    """Checkpoint is unreadable or does not match the model it is loaded into."""


class DivergenceError(NumericalFault):
    """Training loss became non-finite."""

    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(message)
