"""Exception hierarchy shared by every stage of the toolkit."""


class MegaError(Exception):
    """Base class for all toolkit errors."""


class ParseError(MegaError, ValueError):
    """Malformed input file."""

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


class NodeRangeError(MegaError, IndexError):
    """A node index falls outside [0, N)."""


class ConfigError(MegaError, ValueError):
    """Inconsistent or infeasible configuration."""


class ParameterError(MegaError, ValueError):
    """Invalid quantization parameter (non-positive scale, bitwidth out of range)."""


class EncodeError(MegaError, ValueError):
    """A value does not fit the bitwidth it is being encoded with."""


class CorruptStreamError(MegaError, ValueError):
    """A package stream cannot be decoded."""


class ScheduleError(MegaError, RuntimeError):
    """Condense-Edge schedule cannot be completed."""


class ShapeError(MegaError, ValueError):
    """Operand dimensions do not agree."""
