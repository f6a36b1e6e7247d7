class SuperIndexError(Exception):
    """
    Base error. `code` is the machine-readable name returned to HTTP clients,
    `status` the HTTP status it maps to.
    """
    code = "internal_error"
    status = 500

    def __init__(self, message: str = "", code: str | None = None):
        super().__init__(message or self.__class__.__name__)
        if code is not None:
            self.code = code

    def to_dict(self) -> dict:
        return {"error": self.code, "message": str(self)}


# --- record validation ---

class ValidationError(SuperIndexError):
    code = "invalid_record"
    status = 400


class MissingField(ValidationError):
    code = "MissingField"

    def __init__(self, field: str):
        super().__init__(f"Missing required field: {field}")
        self.field = field


class UnknownRecordType(ValidationError):
    code = "UnknownRecordType"


class BadFieldName(ValidationError):
    code = "BadFieldName"


class EmptyValueList(ValidationError):
    code = "EmptyValueList"


class BadFieldValue(ValidationError):
    code = "BadFieldValue"


# --- queries ---

class QueryError(SuperIndexError):
    status = 400

    def __init__(self, code: str, message: str):
        super().__init__(message, code=code)


# --- index / cluster ---

class OpOrderError(SuperIndexError):
    code = "op_order"
    status = 409


class CorruptFrame(SuperIndexError):
    code = "corrupt_frame"


class ReplicaUnavailable(SuperIndexError):
    code = "replica_unavailable"
    status = 503


class ShardUnavailable(SuperIndexError):
    code = "shard_unavailable"
    status = 503


class IncompleteCoverage(SuperIndexError):
    code = "incomplete_coverage"
    status = 503


class LogTruncated(SuperIndexError):
    code = "log_truncated"
    status = 409


class InvalidReplicaState(SuperIndexError):
    code = "invalid_replica_state"
    status = 409


# --- harvesting ---

class SourceUnreachable(SuperIndexError):
    code = "source_unreachable"
    status = 502


class PageOrderViolation(SuperIndexError):
    code = "page_order_violation"
    status = 502


class SourceFlagged(SuperIndexError):
    code = "source_flagged"
    status = 409


class UnknownSource(SuperIndexError):
    code = "unknown_source"
    status = 404


# --- simulator ---

class ScriptTargetMissing(SuperIndexError):
    code = "ScriptTargetMissing"
    status = 400


class ScriptOrderError(SuperIndexError):
    code = "ScriptOrderError"
    status = 400


class ScriptTargetExists(SuperIndexError):
    code = "ScriptTargetExists"
    status = 400


# --- configuration ---

class ConfigError(SuperIndexError):
    status = 500

    def __init__(self, code: str, message: str):
        super().__init__(message, code=code)
