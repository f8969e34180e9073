"""Exception hierarchy shared by every commdiag module."""


class DiagError(Exception):
    """Base class for all commdiag errors."""


class MalformedRecordError(DiagError, ValueError):
    pass


class InvalidConfigurationError(DiagError, ValueError):
    pass


class TraceDesyncError(DiagError):
    """A frame was asked to begin a round other than the one it expects next."""


class InvalidChannelError(DiagError, IndexError):
    pass


class UnsupportedOperationError(DiagError, ValueError):
    pass


class ScenarioSyntaxError(DiagError, ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class InsufficientDataError(DiagError):
    pass


class NoRoundError(DiagError, LookupError):
    pass


class UnknownCommunicatorError(DiagError, LookupError):
    pass


class OrderingError(DiagError, ValueError):
    pass


class NoDataError(DiagError):
    pass


class InvalidBaselineError(DiagError, ValueError):
    pass


class InvalidInvocationError(DiagError, ValueError):
    pass


class InsufficientEvidenceError(DiagError):
    pass


class SchemaMismatchError(DiagError, ValueError):
    pass
