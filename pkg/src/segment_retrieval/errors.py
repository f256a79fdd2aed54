"""Exception hierarchy shared across the package."""


class SegmentRetrievalError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SegmentRetrievalError, ValueError):
    """Raised when arguments violate an operation's preconditions."""


class NumericalFailure(SegmentRetrievalError, ArithmeticError):
    """Raised when an iterative solver produces non-finite values."""


class DegenerateEmbeddingError(SegmentRetrievalError, ArithmeticError):
    """Raised when a projection yields a zero vector that cannot be normalized."""


class TrainingFailure(SegmentRetrievalError, RuntimeError):
    """Raised when training diverges (NaN loss)."""


class IndexingError(SegmentRetrievalError, KeyError):
    """Raised when a segment references a window that is not available."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CaptioningFailure(SegmentRetrievalError, RuntimeError):
    """Raised when the VLM client exhausts its retries.

    The last raw response (or exception) is kept on ``last_response``.
    """

    def __init__(self, message, last_response=None, attempts=0):
        super().__init__(message)
        self.last_response = last_response
        self.attempts = attempts


class IncompleteJudgmentError(SegmentRetrievalError, ValueError):
    """Raised when judge outputs do not cover every (query, rank) cell."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class CaptionValidationError(CaptioningFailure, ValueError):
    """Raised when a captioning response does not satisfy the wire contract."""
