"""Exception hierarchy.

Every error carries a short machine-readable ``code`` used by the service
layer (error JSON) and the CLI (exit codes).
"""

from __future__ import annotations


class MupaxError(Exception):
    """Base class for all errors raised by this package."""

    code = "Internal"
    #: CLI exit code family: 2 usage/IO, 3 budget, 4 mismatch, 5 protocol.
    exit_code = 1

    def __init__(self, message: str, **detail):
        super().__init__(message)
        self.message = message
        self.detail = detail

    def to_json(self) -> dict:
        out = {"error": self.code, "message": self.message}
        if self.detail:
            out["detail"] = {k: v for k, v in sorted(self.detail.items())}
        return out


# --- usage / IO (exit 2) ---------------------------------------------------

class UsageError(MupaxError):
    code = "Usage"
    exit_code = 2


class NotFoundError(UsageError):
    code = "NotFound"


class BadMagicError(UsageError):
    code = "BadMagic"


class ShapeOverflowError(UsageError):
    code = "ShapeOverflow"


class LengthMismatchError(UsageError):
    code = "LengthMismatch"


class NegativeValueError(UsageError):
    code = "NegativeValue"


class RankMismatchError(UsageError):
    code = "RankMismatch"


class ZeroChunkExtentError(UsageError):
    code = "ZeroChunkExtent"


class OutOfBoundsError(UsageError):
    code = "OutOfBounds"


class ShapeMismatchError(UsageError):
    code = "ShapeMismatch"


class DegenerateReferenceError(UsageError):
    code = "DegenerateReference"


class NotAProbabilityError(UsageError):
    code = "NotAProbability"


class EmptyInputError(UsageError):
    code = "EmptyInput"


class EmptyBatchError(UsageError):
    code = "EmptyBatch"


class MixedShapesError(UsageError):
    code = "MixedShapes"


class TooFewChunksError(UsageError):
    code = "TooFewChunks"


class TooManyChunksError(UsageError):
    code = "TooManyChunks"


class LabelMismatchError(UsageError):
    code = "LabelMismatch"


class EmptyAccumulatorError(UsageError):
    code = "EmptyAccumulator"


class ZeroAcceptanceError(UsageError):
    code = "ZeroAcceptance"


# --- budget (exit 3) --------------------------------------------------------

class BudgetExhaustedError(MupaxError):
    """Evaluation cap hit before the requested number of acceptances.

    ``detail`` carries the partial acceptance statistics; callers decide
    whether partial results are usable.
    """

    code = "BudgetExhausted"
    exit_code = 3


# --- mismatch (exit 4) -------------------------------------------------------

class ConfigMismatchError(MupaxError):
    code = "ConfigMismatch"
    exit_code = 4


# --- wire protocol (exit 5) --------------------------------------------------

class ProtocolError(MupaxError):
    code = "Protocol"
    exit_code = 5


class ConnectionLostError(ProtocolError):
    code = "ConnectionLost"


class ServerError(ProtocolError):
    code = "ServerError"


class TimeoutError(ProtocolError):  # noqa: A001 - mirrors the wire contract name
    code = "Timeout"
