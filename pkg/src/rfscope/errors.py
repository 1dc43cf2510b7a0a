"""Exception hierarchy shared by every rfscope module."""


class RFScopeError(Exception):
    """Base class for all errors raised by rfscope."""


class ShapeError(RFScopeError):
    """A tensor shape does not fit the operation it is fed to."""

    def __init__(self, message, node=None):
        self.node = node
        if node is not None:
            message = f"node {node!r}: {message}"
        super().__init__(message)


class SpecError(RFScopeError):
    """Architecture text failed to parse or validate."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        self.raw_message = message
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)


class WeightFormatError(RFScopeError):
    """A weight bundle is malformed or does not match its architecture."""


class FitError(RFScopeError):
    """A Gaussian fit is undefined for the given field."""


class TrainingDivergedError(RFScopeError):
    """The training loss became non-finite."""
