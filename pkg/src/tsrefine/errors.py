"""Exception types shared across the engine."""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all engine errors."""


# --- dataset / task loading ---------------------------------------------


class MissingFile(EngineError):
    pass


class MalformedRow(EngineError):
    def __init__(self, line_no: int, detail: str = ""):
        self.line_no = line_no
        super().__init__(f"malformed row at line {line_no}: {detail}")


class NonNumericCell(EngineError):
    def __init__(self, line_no: int, column: str, raw: str):
        self.line_no = line_no
        self.column = column
        super().__init__(f"non-numeric cell at line {line_no}, column {column!r}: {raw!r}")


class NaNDetected(EngineError):
    pass


class FrameTooShort(EngineError):
    def __init__(self, t: int, p: int, q: int):
        self.t, self.p, self.q = t, p, q
        super().__init__(f"frame has T={t} rows, needs at least p+q={p + q}")


# --- banks ----------------------------------------------------------------


class SchemaViolation(EngineError):
    def __init__(self, file: str, field: str, detail: str = ""):
        self.file = file
        self.field = field
        super().__init__(f"{file}: field {field!r} invalid: {detail}")


class DanglingReference(EngineError):
    def __init__(self, from_id: str, to_id: str):
        self.from_id = from_id
        self.to_id = to_id
        super().__init__(f"record {from_id!r} references unknown id {to_id!r}")


class DuplicateId(EngineError):
    def __init__(self, record_id: str):
        self.record_id = record_id
        super().__init__(f"duplicate record id {record_id!r}")


class UnknownId(EngineError):
    pass


class EmptyBank(EngineError):
    pass


class NoCandidates(EngineError):
    pass


# --- metrics ---------------------------------------------------------------


class ShapeMismatch(EngineError):
    pass


class EmptyInput(EngineError):
    pass


class MapeDenominatorZero(EngineError):
    pass


class NonPositivePrice(EngineError):
    pass


class TooShort(EngineError):
    pass


class ZeroVolatility(EngineError):
    pass


class DegenerateFeature(EngineError):
    pass


class LagOutOfRange(EngineError):
    pass


class DimensionMismatch(EngineError):
    pass


class EmptySet(EngineError):
    pass


# --- planner / gateway ------------------------------------------------------


class BudgetImpossible(EngineError):
    pass


class NoJsonFound(EngineError):
    pass


class FieldViolation(EngineError):
    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


class ParseExhausted(EngineError):
    def __init__(self, attempts: int, last_error: str):
        self.attempts = attempts
        self.last_error = last_error
        super().__init__(f"failed to parse a valid decision after {attempts} attempts: {last_error}")


class BackendUnavailable(EngineError):
    pass


class ReplayMiss(EngineError):
    def __init__(self, digest: str):
        self.digest = digest
        super().__init__(f"no transcript entry for request digest {digest}")


class TransportExhausted(EngineError):
    pass


class AuthMissing(EngineError):
    pass


# --- audit -------------------------------------------------------------------


class LogClosed(EngineError):
    pass


class IoFailure(EngineError):
    pass


class ChainInvalid(EngineError):
    def __init__(self, first_bad_seq: int):
        self.first_bad_seq = first_bad_seq
        super().__init__(f"audit chain invalid at seq {first_bad_seq}")


# --- search ------------------------------------------------------------------


class AllCandidatesFailed(EngineError):
    pass


class ConfigError(EngineError):
    pass
