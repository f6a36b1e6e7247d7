"""
Single-shard faceted inverted index.

Writes go to a working state; `commit()` publishes an immutable Snapshot that
readers search without locking. With a data_dir every operation is appended
to an op log and the committed state is periodically written as a snapshot
file; reopening loads the snapshot and replays the log tail.
"""

import json
import logging
import re
import threading
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType

from modules.errors import LogTruncated, OpOrderError, QueryError
from modules.metadata_model import MetadataRecord, RecordType, to_document, validate
from utils.jsonio import write_atomic
from utils.oplog import OpLog

logger = logging.getLogger(__name__)

MAX_WINDOW = 1_000_000
TOKEN_SPLIT_RE = re.compile(r"[\s/.,:;=]+")

SNAPSHOT_FILE = "snapshot.json"
OPLOG_FILE = "ops.log"

_EMPTY = frozenset()


def tokenize(text: str) -> list[str]:
    return [t for t in TOKEN_SPLIT_RE.split(text.lower()) if t]


def sort_key(r: MetadataRecord) -> tuple:
    return (-r.timestamp_ms, r.id)


@dataclass(frozen=True)
class QuerySpec:
    query_text: str = ""
    filters: tuple = ()
    record_type: RecordType = RecordType.DATASET
    facet_fields: tuple = ()
    from_ms: int | None = None
    to_ms: int | None = None
    offset: int = 0
    limit: int = 10

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple((str(n), str(v)) for n, v in self.filters))
        object.__setattr__(self, "facet_fields", tuple(dict.fromkeys(self.facet_fields)))
        object.__setattr__(self, "record_type", RecordType.parse(self.record_type))
        for name in ("offset", "limit"):
            value = getattr(self, name)
            code = "BadOffset" if name == "offset" else "BadLimit"
            if isinstance(value, bool) or not isinstance(value, int):
                raise QueryError(code, f"{name} must be an integer")
            if value < 0:
                raise QueryError(code, f"{name} must be >= 0")
        if self.offset + self.limit > MAX_WINDOW:
            raise QueryError("WindowTooLarge", f"offset + limit must not exceed {MAX_WINDOW}")

    def widened(self) -> "QuerySpec":
        """The per-shard query a coordinator sends: offset 0, limit offset+limit."""
        return replace(self, offset=0, limit=self.offset + self.limit)

    def to_dict(self) -> dict:
        return {
            "query_text": self.query_text,
            "filters": [list(f) for f in self.filters],
            "record_type": self.record_type.value,
            "facet_fields": list(self.facet_fields),
            "from_ms": self.from_ms,
            "to_ms": self.to_ms,
            "offset": self.offset,
            "limit": self.limit,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QuerySpec":
        return cls(
            query_text=data.get("query_text", ""),
            filters=tuple(tuple(f) for f in data.get("filters", ())),
            record_type=data.get("record_type", RecordType.DATASET.value),
            facet_fields=tuple(data.get("facet_fields", ())),
            from_ms=data.get("from_ms"),
            to_ms=data.get("to_ms"),
            offset=data.get("offset", 0),
            limit=data.get("limit", 10),
        )


@dataclass
class SearchResult:
    num_found: int = 0
    docs: list = field(default_factory=list)
    facet_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "numFound": self.num_found,
            "docs": [to_document(d) for d in self.docs],
            "facet_counts": self.facet_counts,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SearchResult":
        return cls(
            num_found=data["numFound"],
            docs=[validate(d) for d in data["docs"]],
            facet_counts={f: dict(c) for f, c in data.get("facet_counts", {}).items()},
        )


@dataclass(frozen=True)
class CommitPoint:
    seq: int
    op_seq: int
    doc_count: int


def record_terms(r: MetadataRecord) -> set:
    """Every posting term a record is indexed under."""
    terms = {("type", r.record_type.value)}
    for name, values in r.fields.items():
        for v in values:
            terms.add(("f", name, v))
            for tok in tokenize(v):
                terms.add(("t", tok))
    return terms


def query_terms(q: QuerySpec) -> list:
    terms = [("type", q.record_type.value)]
    terms.extend(("t", tok) for tok in tokenize(q.query_text))
    terms.extend(("f", name, value) for name, value in q.filters)
    return terms


def in_window(r: MetadataRecord, q: QuerySpec) -> bool:
    if q.from_ms is not None and r.timestamp_ms < q.from_ms:
        return False
    if q.to_ms is not None and r.timestamp_ms >= q.to_ms:
        return False
    return True


def count_facets(records, facet_fields) -> dict:
    counts = {}
    for name in facet_fields:
        counter = Counter()
        for r in records:
            counter.update(set(r.fields.get(name, ())))
        counts[name] = dict(counter)
    return counts


class Snapshot:
    """Frozen committed view of an index."""

    def __init__(self, seq: int, op_seq: int, docs: dict, postings: dict):
        self.seq = seq
        self.op_seq = op_seq
        self._docs = MappingProxyType(docs)
        self._postings = MappingProxyType(postings)

    @property
    def doc_count(self) -> int:
        return len(self._docs)

    def get(self, record_type, record_id: str) -> MetadataRecord | None:
        return self._docs.get((RecordType.parse(record_type).value, record_id))

    def records(self, source_node: str | None = None) -> list[MetadataRecord]:
        out = [r for _, r in sorted(self._docs.items())]
        if source_node is not None:
            out = [r for r in out if r.source_node == source_node]
        return out

    def search(self, q: QuerySpec) -> SearchResult:
        sets = sorted((self._postings.get(t, _EMPTY) for t in query_terms(q)), key=len)
        keys = set(sets[0])
        for s in sets[1:]:
            if not keys:
                break
            keys &= s
        matching = [r for r in (self._docs[k] for k in keys) if in_window(r, q)]
        matching.sort(key=sort_key)
        return SearchResult(
            num_found=len(matching),
            docs=matching[q.offset:q.offset + q.limit],
            facet_counts=count_facets(matching, q.facet_fields),
        )


def upsert_entry(seq: int, r: MetadataRecord) -> dict:
    return {"seq": seq, "op": "upsert", "doc": to_document(r)}


def delete_entry(seq: int, record_type, record_id: str) -> dict:
    return {"seq": seq, "op": "delete", "key": {"type": RecordType.parse(record_type).value, "id": record_id}}


class Index:
    """
    One shard replica's index. Single writer, any number of readers.
    """

    def __init__(self, data_dir: Path | str | None = None, snapshot_every: int = 0,
                 history: int = 10_000, fsync: bool = False):
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.snapshot_every = snapshot_every
        self._lock = threading.RLock()
        self._docs = {}
        self._postings = {}
        self._dirty = set()
        self._last_seq = 0
        self._commit_seq = 0
        self._history = deque(maxlen=history)
        self._snapshot = Snapshot(0, 0, {}, {})
        self._log = None
        if self.data_dir is not None:
            self._open(fsync)

    # --- persistence ---

    def _open(self, fsync: bool) -> None:
        self.data_dir.mkdir(parents=True, exist_ok=True)
        snap_path = self.data_dir / SNAPSHOT_FILE
        if snap_path.exists():
            with open(snap_path, encoding="utf-8") as f:
                header = json.loads(f.readline())
                docs = json.loads(f.readline() or "[]")
            for d in docs:
                self._put(validate(d))
            self._last_seq = header["seq"]
        self._log = OpLog(self.data_dir / OPLOG_FILE, fsync=fsync)
        replayed = 0
        for entry in self._log.read_all():
            if entry["seq"] <= self._last_seq:
                continue
            self._apply_entry(entry, log=False)
            replayed += 1
        self._publish()
        logger.info("Opened index at %s: %d docs, seq %d (%d ops replayed)",
                    self.data_dir, len(self._docs), self._last_seq, replayed)

    def _write_snapshot(self) -> None:
        snap = self._snapshot
        header = json.dumps({"seq": snap.op_seq})
        body = json.dumps([to_document(r) for r in snap.records()], sort_keys=True,
                          separators=(",", ":"), ensure_ascii=False)
        write_atomic(self.data_dir / SNAPSHOT_FILE, header + "\n" + body + "\n")
        self._log.reset()

    def save_snapshot(self) -> None:
        """Commit, write the committed state to disk and drop the op log it covers."""
        if self._log is None:
            return
        with self._lock:
            self._commit_seq += 1
            self._publish()
            self._write_snapshot()

    def close(self) -> None:
        if self._log is not None:
            self.save_snapshot()
            self._log.close()

    def discard(self) -> None:
        """Close the log without writing a snapshot."""
        if self._log is not None:
            self._log.close()

    # --- working state ---

    def _put(self, r: MetadataRecord) -> None:
        old = self._docs.get(r.key)
        if old is not None:
            self._unindex(old)
        self._docs[r.key] = r
        for term in record_terms(r):
            self._postings.setdefault(term, set()).add(r.key)
            self._dirty.add(term)

    def _unindex(self, r: MetadataRecord) -> None:
        for term in record_terms(r):
            keys = self._postings.get(term)
            if keys is not None:
                keys.discard(r.key)
                if not keys:
                    del self._postings[term]
            self._dirty.add(term)

    def _remove(self, key: tuple) -> None:
        old = self._docs.pop(key, None)
        if old is not None:
            self._unindex(old)

    def _next_seq(self, seq: int | None) -> int:
        if seq is None:
            return self._last_seq + 1
        if seq != self._last_seq + 1:
            raise OpOrderError(f"Expected seq {self._last_seq + 1}, got {seq}")
        return seq

    def _record(self, entry: dict, log: bool) -> None:
        self._last_seq = entry["seq"]
        self._history.append(entry)
        if log and self._log is not None:
            self._log.append(entry)

    def _apply_entry(self, entry: dict, log: bool = True) -> int:
        seq = self._next_seq(entry["seq"])
        if entry["op"] == "upsert":
            self._put(validate(entry["doc"]))
        elif entry["op"] == "delete":
            key = entry["key"]
            self._remove((RecordType.parse(key["type"]).value, key["id"]))
        else:
            raise OpOrderError(f"Unknown op {entry['op']!r}")
        self._record(entry, log)
        return seq

    # --- write API ---

    @property
    def last_seq(self) -> int:
        """Highest applied operation seq (the replica watermark)."""
        return self._last_seq

    def upsert(self, r: MetadataRecord, seq: int | None = None) -> int:
        with self._lock:
            seq = self._next_seq(seq)
            self._put(r)
            self._record(upsert_entry(seq, r), log=True)
            return seq

    def delete(self, record_type, record_id: str, seq: int | None = None) -> int:
        with self._lock:
            seq = self._next_seq(seq)
            self._remove((RecordType.parse(record_type).value, record_id))
            self._record(delete_entry(seq, record_type, record_id), log=True)
            return seq

    def apply(self, entry: dict) -> bool:
        """
        Apply a replicated op entry. Entries at or below the watermark were
        already applied and are ignored (returns False).
        """
        with self._lock:
            if entry["seq"] <= self._last_seq:
                return False
            self._apply_entry(entry)
            return True

    def _publish(self) -> None:
        postings = dict(self._snapshot._postings)
        for term in self._dirty:
            keys = self._postings.get(term)
            if keys:
                postings[term] = frozenset(keys)
            else:
                postings.pop(term, None)
        self._dirty.clear()
        self._snapshot = Snapshot(self._commit_seq, self._last_seq, dict(self._docs), postings)

    def commit(self) -> CommitPoint:
        with self._lock:
            self._commit_seq += 1
            self._publish()
            if self.snapshot_every and self._log is not None and self._commit_seq % self.snapshot_every == 0:
                self._write_snapshot()
            return CommitPoint(seq=self._commit_seq, op_seq=self._last_seq, doc_count=len(self._docs))

    def install_snapshot(self, op_seq: int, docs: list) -> None:
        """Replace the whole state with a transferred snapshot."""
        with self._lock:
            self._docs = {}
            self._postings = {}
            self._dirty = set()
            self._snapshot = Snapshot(self._snapshot.seq, 0, {}, {})
            for d in docs:
                self._put(d if isinstance(d, MetadataRecord) else validate(d))
            self._last_seq = op_seq
            self._history.clear()
            self._commit_seq += 1
            self._publish()
            if self._log is not None:
                self.save_snapshot()

    # --- read API ---

    def snapshot(self) -> Snapshot:
        return self._snapshot

    def search(self, q: QuerySpec) -> SearchResult:
        return self._snapshot.search(q)

    def get(self, record_type, record_id: str) -> MetadataRecord | None:
        return self._snapshot.get(record_type, record_id)

    def dump(self) -> tuple[int, list[dict]]:
        snap = self._snapshot
        return snap.op_seq, [to_document(r) for r in snap.records()]

    def ops_since(self, from_seq: int, limit: int | None = None) -> list[dict]:
        """Retained op entries with seq > from_seq, oldest first."""
        with self._lock:
            if from_seq >= self._last_seq:
                return []
            first = self._history[0]["seq"] if self._history else self._last_seq + 1
            if from_seq + 1 < first:
                raise LogTruncated(f"History starts at seq {first}, asked for {from_seq + 1}")
            out = [e for e in self._history if e["seq"] > from_seq]
        return out if limit is None else out[:limit]
