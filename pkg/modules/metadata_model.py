import json
import re
import unicodedata
from dataclasses import dataclass, field
from enum import Enum

from modules.errors import (
    BadFieldName,
    BadFieldValue,
    EmptyValueList,
    MissingField,
    UnknownRecordType,
)
from utils.fnv import fnv1a_64
from utils.timefmt import iso_to_ms, ms_to_iso

FIELD_NAME_RE = re.compile(r"[a-z][a-z0-9_]*")

UNIT_SEP = b"\x1f"
RECORD_SEP = b"\x1e"

# keys of the document form that are never field names
RESERVED_KEYS = frozenset({
    "type", "record_type", "id", "version", "source_node",
    "_timestamp", "timestamp_ms", "fields",
})


class RecordType(str, Enum):
    DATASET = "Dataset"
    FILE = "File"
    AGGREGATION = "Aggregation"

    @classmethod
    def parse(cls, value) -> "RecordType":
        if isinstance(value, RecordType):
            return value
        try:
            return cls(value)
        except ValueError:
            raise UnknownRecordType(f"Unknown record type: {value!r}") from None


@dataclass(frozen=True)
class MetadataRecord:
    record_type: RecordType
    id: str
    version: int
    source_node: str
    timestamp_ms: int
    fields: dict = field(default_factory=dict)

    @property
    def key(self) -> tuple:
        return (self.record_type.value, self.id)

    def values(self, name: str) -> tuple:
        return self.fields.get(name, ())


def is_newer(a: MetadataRecord, b: MetadataRecord) -> bool:
    """True when `a` wins over `b`: higher (version, timestamp_ms)."""
    return (a.version, a.timestamp_ms) > (b.version, b.timestamp_ms)


def _has_control_chars(text: str) -> bool:
    return any(unicodedata.category(ch) == "Cc" for ch in text)


def _encodable(text: str) -> bool:
    try:
        text.encode("utf-8")
    except UnicodeEncodeError:
        return False
    return True


def _parse_int(raw, name: str) -> int:
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise BadFieldValue(f"{name} must be an integer, got {raw!r}")
    return raw


def _parse_values(name: str, values) -> tuple:
    if not FIELD_NAME_RE.fullmatch(name) or name in RESERVED_KEYS:
        raise BadFieldName(f"Bad field name: {name!r}")
    if not isinstance(values, list):
        raise BadFieldValue(f"Field {name!r} must map to a list of strings")
    if not values:
        raise EmptyValueList(f"Field {name!r} has no values")
    for v in values:
        if not isinstance(v, str):
            raise BadFieldValue(f"Field {name!r} has a non-string value: {v!r}")
        # the canonical form uses 0x1E/0x1F as separators
        if "\x1e" in v or "\x1f" in v:
            raise BadFieldValue(f"Field {name!r} has a value containing a separator byte: {v!r}")
        if not _encodable(v):
            raise BadFieldValue(f"Field {name!r} has a value that is not valid UTF-8 text: {v!r}")
    return tuple(values)


def validate(raw: dict) -> MetadataRecord:
    """
    Turn a parsed document into a MetadataRecord.

    Accepts the external JSON form (`_timestamp` as ISO-8601, one key per
    field) as well as `timestamp_ms` and a nested `fields` object.
    """
    if not isinstance(raw, dict):
        raise BadFieldValue("Record document must be an object")

    type_raw = raw.get("type", raw.get("record_type"))
    if type_raw is None:
        raise MissingField("type")
    record_type = RecordType.parse(type_raw)

    if "id" not in raw:
        raise MissingField("id")
    record_id = raw["id"]
    if (not isinstance(record_id, str) or not record_id or _has_control_chars(record_id)
            or not _encodable(record_id)):
        raise BadFieldValue(f"Bad id: {record_id!r}")

    version = _parse_int(raw.get("version", 0), "version")
    if version < 0:
        raise BadFieldValue("version must be >= 0")

    source_node = raw.get("source_node", "")
    if not isinstance(source_node, str) or _has_control_chars(source_node) or not _encodable(source_node):
        raise BadFieldValue(f"Bad source_node: {source_node!r}")

    if "_timestamp" in raw:
        try:
            timestamp_ms = iso_to_ms(raw["_timestamp"])
        except (TypeError, ValueError):
            raise BadFieldValue(f"Unparseable _timestamp: {raw['_timestamp']!r}") from None
    elif "timestamp_ms" in raw:
        timestamp_ms = _parse_int(raw["timestamp_ms"], "timestamp_ms")
    else:
        raise MissingField("timestamp")
    if timestamp_ms <= 0:
        raise BadFieldValue("timestamp must be after the epoch")

    fields = {}
    nested = raw.get("fields")
    if nested is not None:
        if not isinstance(nested, dict):
            raise BadFieldValue("fields must be an object")
        for name, values in nested.items():
            fields[name] = _parse_values(name, values)
    for name, values in raw.items():
        if name in RESERVED_KEYS:
            continue
        fields[name] = _parse_values(name, values)

    return MetadataRecord(
        record_type=record_type,
        id=record_id,
        version=version,
        source_node=source_node,
        timestamp_ms=timestamp_ms,
        fields=fields,
    )


def to_document(r: MetadataRecord) -> dict:
    """External JSON form of a record."""
    doc = {
        "type": r.record_type.value,
        "id": r.id,
        "version": r.version,
        "source_node": r.source_node,
        "_timestamp": ms_to_iso(r.timestamp_ms),
    }
    for name in sorted(r.fields):
        doc[name] = list(r.fields[name])
    return doc


def to_json(r: MetadataRecord) -> str:
    return json.dumps(to_document(r), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def from_json(text: str) -> MetadataRecord:
    return validate(json.loads(text))


def canonicalize(r: MetadataRecord) -> bytes:
    header = UNIT_SEP.join([
        r.record_type.value.encode("utf-8"),
        r.id.encode("utf-8"),
        str(r.version).encode("ascii"),
        r.source_node.encode("utf-8"),
        str(r.timestamp_ms).encode("ascii"),
    ])
    parts = [header, RECORD_SEP]
    for name in sorted(r.fields):
        entry = [name.encode("utf-8")] + [v.encode("utf-8") for v in r.fields[name]]
        parts.append(UNIT_SEP.join(entry))
        parts.append(RECORD_SEP)
    return b"".join(parts)


def digest(r: MetadataRecord) -> int:
    return fnv1a_64(canonicalize(r))


def digest_hex(r: MetadataRecord) -> str:
    return f"{digest(r):016x}"
