"""Exception hierarchy shared by every gsfocus module."""


class GSFocusError(Exception):
    """Base class for all errors raised by gsfocus."""


class InvalidParameterError(GSFocusError, ValueError):
    """A numeric input is non-finite or outside its admissible range."""


class ContractError(GSFocusError, ValueError):
    """Inputs violate an operation's precondition (shape, pairing, schedule)."""


class InsufficientDataError(GSFocusError, ValueError):
    """Not enough data to perform the requested computation."""


class FormatError(GSFocusError, ValueError):
    """A file does not follow the expected on-disk layout."""

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


class ValidationError(GSFocusError, ValueError):
    """Parsed data is well formed but internally inconsistent."""


class UnsupportedModelError(FormatError):
    """Camera model that the loader does not handle."""


class NumericalAbort(GSFocusError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, iteration=None, snapshot=None):
        self.iteration = iteration
        self.snapshot = snapshot
        super().__init__(message)
