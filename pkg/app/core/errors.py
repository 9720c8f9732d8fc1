"""
Error hierarchy for the toolkit.

Every error carries a stable ``code`` so callers (and the CLI) can react to
the kind of failure without parsing messages.
"""

from typing import Any, Optional


class ChainTraceError(Exception):
    """Base class for all toolkit errors."""

    code = "CHAINTRACE_ERROR"

    def __init__(self, message: str, code: Optional[str] = None, **details: Any):
        super().__init__(message)
        if code is not None:
            self.code = code
        self.details = details

    def __str__(self) -> str:
        return f"{self.code}: {super().__str__()}"


class InputError(ChainTraceError, ValueError):
    """Bad input file, bad parameter or bad call. CLI exit code 2."""

    code = "INPUT_ERROR"


class InvariantViolation(ChainTraceError, RuntimeError):
    """Internal consistency check failed. CLI exit code 3."""

    code = "INVARIANT_VIOLATION"


# ----------------------------------------------------------------------------
# ledger-model
# ----------------------------------------------------------------------------

class MalformedRecordError(InputError):
    code = "MALFORMED_RECORD"

    def __init__(self, message: str, line: Optional[int] = None, **details: Any):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, line=line, **details)
        self.line = line


class DuplicateTxidError(MalformedRecordError):
    code = "DUPLICATE_TXID"


class DoubleSpendError(MalformedRecordError):
    code = "DOUBLE_SPEND"


class OutOfOrderError(MalformedRecordError):
    code = "OUT_OF_ORDER"


class UnknownChainError(InputError):
    code = "UNKNOWN_CHAIN"


class NegativePoolError(InvariantViolation):
    code = "NEGATIVE_POOL"


# ----------------------------------------------------------------------------
# cluster-engine
# ----------------------------------------------------------------------------

class TagConflictError(InputError):
    code = "TAG_CONFLICT"


# ----------------------------------------------------------------------------
# xchain-tracer
# ----------------------------------------------------------------------------

class ChainMissingError(InputError):
    code = "CHAIN_MISSING"


class AmbiguousShiftError(ChainTraceError):
    """More than one candidate deposit was confirmed by the oracle."""

    code = "AMBIGUOUS"


class NotApplicableError(InputError):
    code = "NOT_APPLICABLE"


# ----------------------------------------------------------------------------
# matrix-sim
# ----------------------------------------------------------------------------

class LevelRangeError(InputError):
    code = "LEVEL_RANGE"


class AlreadyRegisteredError(InputError):
    code = "ALREADY_REGISTERED"


class BadAmountError(InputError):
    code = "BAD_AMOUNT"


class NotRegisteredError(InputError):
    code = "NOT_REGISTERED"


class NonSequentialLevelError(InputError):
    code = "NON_SEQUENTIAL_LEVEL"


class AlreadyActiveError(InputError):
    code = "ALREADY_ACTIVE"


# ----------------------------------------------------------------------------
# synth-bench
# ----------------------------------------------------------------------------

class InvalidParamsError(InputError):
    code = "INVALID_PARAMS"


# ----------------------------------------------------------------------------
# pipelines
# ----------------------------------------------------------------------------

class UnknownHeuristicError(InputError):
    code = "UNKNOWN_HEURISTIC"
