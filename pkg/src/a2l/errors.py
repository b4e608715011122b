"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to, so error
classes stay stable across subcommands.
"""

from __future__ import annotations


class A2LError(Exception):
    exit_code = 1


# --- data / persistence -------------------------------------------------


class DataError(A2LError):
    exit_code = 3


class MissingPath(DataError):
    def __init__(self, path):
        super().__init__(f"path does not exist: {path}")
        self.path = path


class MalformedRecord(DataError):
    def __init__(self, line: int, reason: str, source: str = ""):
        where = f"{source}:{line}" if source else f"line {line}"
        super().__init__(f"malformed record at {where}: {reason}")
        self.line = line
        self.reason = reason
        self.source = source


class InvariantViolation(DataError):
    def __init__(self, subject: str, field: str, detail: str = ""):
        msg = f"invariant violated for {subject}: {field}"
        super().__init__(f"{msg} ({detail})" if detail else msg)
        self.subject = subject
        self.field = field


class SerializationFailure(DataError):
    def __init__(self, trajectory_id: str, reason: str):
        super().__init__(f"cannot serialize trajectory {trajectory_id!r}: {reason}")
        self.trajectory_id = trajectory_id


class IoFailure(DataError):
    pass


class UnknownField(DataError):
    def __init__(self, name: str):
        super().__init__(f"unknown field: {name!r}")
        self.name = name


class EmptyInput(DataError):
    exit_code = 7


# --- action codec -------------------------------------------------------


class CodecError(DataError):
    pass


class EmptyChunk(CodecError):
    def __init__(self, msg: str = "action chunk is empty"):
        super().__init__(msg)


class NoListFound(CodecError):
    def __init__(self, msg: str = "no bracketed list found"):
        super().__init__(msg)


class BadArity(CodecError):
    def __init__(self, index: int, got: int | None = None):
        detail = "not a list" if got is None else f"{got} fields, expected 4"
        super().__init__(f"inner list {index}: {detail}")
        self.index = index
        self.got = got


class NonNumeric(CodecError):
    def __init__(self, field: str):
        super().__init__(f"non-numeric field: {field!r}")
        self.field = field


class GripperNotBinary(CodecError):
    def __init__(self, value: float):
        super().__init__(f"gripper value {value!r} is not 0 or 1")
        self.value = value


# --- annotation ---------------------------------------------------------


class AnnotationError(A2LError):
    exit_code = 4


class SchemaViolation(AnnotationError):
    def __init__(self, key: str, step: int | None):
        where = "top level" if step is None else f"step {step}"
        super().__init__(f"schema violation at {where}: {key}")
        self.key = key
        self.step = step


class ActionParseError(AnnotationError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


class CountMismatch(AnnotationError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"action count mismatch: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class ValueMismatch(AnnotationError):
    def __init__(self, flat_index: int, axis: int, delta: float):
        super().__init__(
            f"action {flat_index} axis {axis} differs from the raw log by {delta:+.6f}"
        )
        self.flat_index = flat_index
        self.axis = axis
        self.delta = delta


class AnnotationExhausted(AnnotationError):
    def __init__(self, trajectory_id: str, last_failure: Exception | None):
        super().__init__(
            f"annotation of {trajectory_id!r} failed after all attempts: {last_failure}"
        )
        self.trajectory_id = trajectory_id
        self.last_failure = last_failure


class TooFewSteps(AnnotationError):
    pass


class WrongStage(A2LError):
    exit_code = 3


# --- backend ------------------------------------------------------------


class BackendError(A2LError):
    exit_code = 5
    transient = False


class Timeout(BackendError):
    transient = True


class RateLimited(BackendError):
    transient = True


class ServerError(BackendError):
    transient = True


class Unauthorized(BackendError):
    pass


class CapabilityMissing(BackendError):
    pass


class ProtocolError(BackendError):
    def __init__(self, excerpt: str):
        super().__init__(f"unexpected backend reply: {excerpt[:200]}")
        self.excerpt = excerpt[:200]


class ScriptExhausted(BackendError):
    pass


# --- rollout / eval -----------------------------------------------------


class RolloutError(A2LError):
    exit_code = 6


class ParseFailure(RolloutError):
    pass


class EmptyPlan(ParseFailure):
    pass


class EpisodeAborted(RolloutError):
    def __init__(self, reason: str, log=None):
        super().__init__(f"episode aborted: {reason}")
        self.reason = reason
        self.log = log


class UnknownEntity(A2LError):
    exit_code = 3

    def __init__(self, name: str):
        super().__init__(f"unknown object or region: {name!r}")
        self.name = name
