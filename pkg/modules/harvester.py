"""
Harvesting from source index nodes.

full_harvest pages through a source from time 0; incremental_sync re-reads
everything stamped at or after (cursor - skew window) and keeps only records
newer than what the index holds; reconcile diffs the source inventory by
digest to find deletions and silent rewrites.
"""

import json
import logging
import re
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import requests

from modules.errors import (
    ConfigError,
    PageOrderViolation,
    SourceFlagged,
    SourceUnreachable,
    UnknownSource,
    ValidationError,
)
from modules.metadata_model import MetadataRecord, RecordType, digest_hex, is_newer, validate
from modules.shard_cluster import WriteOp
from utils.jsonio import write_atomic
from utils.timefmt import ms_to_iso

logger = logging.getLogger(__name__)

# 9999-12-31T23:59:59.999Z, the open upper bound of a harvest window
FAR_FUTURE_MS = 253_402_300_799_999


@dataclass(frozen=True)
class SourceNodeConfig:
    source_id: str
    base_url: str
    page_size: int = 100
    poll_interval_ms: int = 60_000
    skew_epsilon_ms: int = 60_000

    def __post_init__(self):
        if not self.source_id or not isinstance(self.source_id, str):
            raise ConfigError("E_SOURCE", "source_id is required")
        if not isinstance(self.base_url, str) or not self.base_url:
            raise ConfigError("E_SOURCE", f"{self.source_id}: base_url is required")
        if not isinstance(self.page_size, int) or self.page_size < 1:
            raise ConfigError("E_PAGE_SIZE", f"{self.source_id}: page_size must be >= 1")
        if not isinstance(self.skew_epsilon_ms, int) or self.skew_epsilon_ms < 0:
            raise ConfigError("E_SKEW", f"{self.source_id}: skew_epsilon_ms must be >= 0")
        if not isinstance(self.poll_interval_ms, int) or self.poll_interval_ms < 1:
            raise ConfigError("E_POLL_INTERVAL", f"{self.source_id}: poll_interval_ms must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SourceNodeConfig":
        if not isinstance(d, dict) or "source_id" not in d or "base_url" not in d:
            raise ConfigError("E_SOURCE", f"Source entry needs source_id and base_url: {d!r}")
        known = {"source_id", "base_url", "page_size", "poll_interval_ms", "skew_epsilon_ms"}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class HarvestCursor:
    source_id: str
    last_sync_ms: int = 0
    # offset of the next page of an unfinished full harvest
    resume_offset: int | None = None
    harvested: bool = False
    flagged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HarvestCursor":
        return cls(
            source_id=d["source_id"],
            last_sync_ms=int(d.get("last_sync_ms", 0)),
            resume_offset=d.get("resume_offset"),
            harvested=bool(d.get("harvested", True)),
            flagged=bool(d.get("flagged", False)),
        )


@dataclass
class HarvestStats:
    fetched: int = 0
    upserted: int = 0
    skipped: int = 0
    deleted: int = 0
    repaired: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def clean_identifier(source_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", source_id)


class CursorStore:
    """One small JSON file per source, replaced atomically on every save."""

    def __init__(self, directory: Path | str):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, source_id: str) -> Path:
        return self.directory / f"{clean_identifier(source_id)}.json"

    def load(self, source_id: str) -> HarvestCursor | None:
        path = self._path(source_id)
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as f:
            return HarvestCursor.from_dict(json.load(f))

    def save(self, cursor: HarvestCursor) -> HarvestCursor:
        with self._lock:
            existing = self.load(cursor.source_id)
            if existing is not None and existing.last_sync_ms > cursor.last_sync_ms:
                cursor.last_sync_ms = existing.last_sync_ms
            write_atomic(self._path(cursor.source_id), json.dumps(cursor.to_dict(), sort_keys=True))
            return cursor

    def all(self) -> dict:
        out = {}
        for path in sorted(self.directory.glob("*.json")):
            with open(path, encoding="utf-8") as f:
                cursor = HarvestCursor.from_dict(json.load(f))
            out[cursor.source_id] = cursor
        return out


class HttpSourceClient:
    """Client for the source harvest protocol over HTTP."""

    def __init__(self, base_url: str, timeout: float = 30.0, session=None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def _get(self, path: str, params: dict, allow_404: bool = False) -> dict | None:
        url = f"{self.base_url}{path}"
        try:
            resp = self.session.request("GET", url, params=params, timeout=self.timeout)
        except requests.RequestException as e:
            raise SourceUnreachable(f"{url}: {e}") from None
        if allow_404 and resp.status_code == 404:
            return None
        if resp.status_code != 200:
            raise SourceUnreachable(f"{url} returned {resp.status_code}")
        try:
            return resp.json()
        except ValueError:
            raise SourceUnreachable(f"{url} returned a non-JSON body") from None

    def search_page(self, from_ms: int, to_ms: int, offset: int, limit: int) -> dict:
        return self._get("/search", {
            "format": "json",
            "from": ms_to_iso(from_ms),
            "to": ms_to_iso(to_ms),
            "offset": offset,
            "limit": limit,
        })

    def inventory_page(self, offset: int, limit: int) -> dict:
        return self._get("/inventory", {"offset": offset, "limit": limit})

    def fetch_record(self, record_type, record_id: str) -> dict | None:
        return self._get("/record", {"type": RecordType.parse(record_type).value, "id": record_id},
                         allow_404=True)


def check_page_order(records: list, previous: tuple | None) -> tuple | None:
    """Raise PageOrderViolation unless (timestamp, id) never decreases."""
    last = previous
    for r in records:
        key = (r.timestamp_ms, r.id)
        if last is not None and key < last:
            raise PageOrderViolation(f"{r.id} at {r.timestamp_ms} arrived after {last}")
        last = key
    return last


class Harvester:
    def __init__(self, cluster, cursors: CursorStore, sources: list, clients: dict,
                 retries: int = 3, backoff_ms: int = 500, sleep=None):
        self.cluster = cluster
        self.cursors = cursors
        self.sources = {s.source_id: s for s in sources}
        self.clients = clients
        self.retries = retries
        self.backoff_ms = backoff_ms
        self.sleep = sleep or (lambda ms: time.sleep(ms / 1000))
        self._locks = {sid: threading.RLock() for sid in self.sources}
        # lookup-then-write on the index is one step across all sources
        self._write_lock = threading.Lock()

    def _source(self, source_id: str) -> SourceNodeConfig:
        try:
            return self.sources[source_id]
        except KeyError:
            raise UnknownSource(f"Unknown source {source_id!r}") from None

    def _retry(self, source_id: str, fn, *args):
        attempt = 0
        while True:
            try:
                return fn(*args)
            except SourceUnreachable as e:
                if attempt >= self.retries:
                    raise
                wait = self.backoff_ms * (2 ** attempt)
                logger.warning("%s: %s. Retrying in %d ms", source_id, e, wait)
                self.sleep(wait)
                attempt += 1

    def _flag(self, cursor: HarvestCursor, error: PageOrderViolation) -> None:
        cursor.flagged = True
        self.cursors.save(cursor)
        logger.error("Source %s flagged: %s", cursor.source_id, error)

    def _pages(self, src: SourceNodeConfig, cursor: HarvestCursor, from_ms: int, offset: int):
        """Yield (offset after page, records) until the source runs out."""
        client = self.clients[src.source_id]
        previous = None
        while True:
            page = self._retry(src.source_id, client.search_page, from_ms, FAR_FUTURE_MS, offset, src.page_size)
            docs = page.get("docs", [])
            try:
                records = [validate(d) for d in docs]
            except ValidationError as e:
                raise SourceUnreachable(f"{src.source_id} served an invalid record: {e}") from None
            try:
                previous = check_page_order(records, previous)
            except PageOrderViolation as e:
                self._flag(cursor, e)
                raise
            if not records:
                return
            offset += len(records)
            yield offset, records
            if len(records) < src.page_size or offset >= page.get("numFound", 0):
                return

    def _decide(self, incoming: MetadataRecord, local: MetadataRecord | None) -> bool:
        if local is None:
            return True
        if local.source_node != incoming.source_node and (local.version, local.timestamp_ms) != (
                incoming.version, incoming.timestamp_ms):
            winner = incoming if is_newer(incoming, local) else local
            logger.warning("Federation anomaly: %s/%s claimed by %s and %s; keeping %s",
                           incoming.record_type.value, incoming.id, local.source_node,
                           incoming.source_node, winner.source_node)
        return is_newer(incoming, local)

    def _ingest(self, records: list, stats: HarvestStats) -> int:
        ops = []
        with self._write_lock:
            local = self.cluster.get_many([r.key for r in records])
            for r in records:
                if self._decide(r, local.get(r.key)):
                    ops.append(WriteOp.upsert(r))
                else:
                    stats.skipped += 1
            if ops:
                self.cluster.apply_writes(ops)
                self.cluster.commit()
        stats.fetched += len(records)
        stats.upserted += len(ops)
        return max(r.timestamp_ms for r in records)

    def cursor(self, source_id: str) -> HarvestCursor | None:
        return self.cursors.load(source_id)

    def full_harvest(self, source_id: str, reset: bool = False) -> HarvestStats:
        src = self._source(source_id)
        with self._locks[source_id]:
            cursor = self.cursors.load(source_id)
            if cursor is None:
                cursor = HarvestCursor(source_id, resume_offset=0)
            elif reset or cursor.resume_offset is None:
                cursor.resume_offset = 0
            cursor.flagged = False
            stats = HarvestStats()
            start = cursor.resume_offset
            if start:
                logger.info("Resuming full harvest of %s at offset %d", source_id, start)
            for next_offset, records in self._pages(src, cursor, 0, start):
                newest = self._ingest(records, stats)
                cursor.last_sync_ms = max(cursor.last_sync_ms, newest)
                cursor.resume_offset = next_offset
                self.cursors.save(cursor)
            cursor.resume_offset = None
            cursor.harvested = True
            self.cursors.save(cursor)
            logger.info("Full harvest of %s: fetched %d, upserted %d, cursor %d",
                        source_id, stats.fetched, stats.upserted, cursor.last_sync_ms)
            return stats

    def incremental_sync(self, source_id: str) -> HarvestStats:
        src = self._source(source_id)
        with self._locks[source_id]:
            cursor = self.cursors.load(source_id)
            if cursor is None or not cursor.harvested:
                logger.info("No completed harvest for %s, running a full harvest", source_id)
                return self.full_harvest(source_id)
            if cursor.flagged:
                raise SourceFlagged(f"{source_id} is flagged; run a full harvest to clear it")
            stats = HarvestStats()
            from_ms = max(0, cursor.last_sync_ms - src.skew_epsilon_ms)
            newest = cursor.last_sync_ms
            for _, records in self._pages(src, cursor, from_ms, 0):
                newest = max(newest, self._ingest(records, stats))
            cursor.last_sync_ms = newest
            self.cursors.save(cursor)
            logger.info("Sync of %s: fetched %d, upserted %d, skipped %d, cursor %d",
                        source_id, stats.fetched, stats.upserted, stats.skipped, cursor.last_sync_ms)
            return stats

    def _inventory(self, src: SourceNodeConfig) -> dict:
        client = self.clients[src.source_id]
        out = {}
        offset = 0
        while True:
            page = self._retry(src.source_id, client.inventory_page, offset, src.page_size)
            items = page.get("items", [])
            for item in items:
                out[(RecordType.parse(item["type"]).value, item["id"])] = item["digest"]
            offset += len(items)
            if not items or offset >= page.get("numFound", 0):
                return out

    def reconcile(self, source_id: str) -> HarvestStats:
        src = self._source(source_id)
        with self._locks[source_id]:
            cursor = self.cursors.load(source_id)
            if cursor is not None and cursor.flagged:
                raise SourceFlagged(f"{source_id} is flagged; run a full harvest to clear it")
            client = self.clients[source_id]
            inventory = self._inventory(src)
            local = {r.key: r for r in self.cluster.records_for_source(source_id)}

            stale = [k for k, d in inventory.items() if k not in local or digest_hex(local[k]) != d]
            fetched = []
            for key in stale:
                doc = self._retry(source_id, client.fetch_record, key[0], key[1])
                if doc is not None:
                    fetched.append(validate(doc))

            # every source read is done; only now touch the index, against its current state
            with self._write_lock:
                current = {r.key for r in self.cluster.records_for_source(source_id)}
                gone = sorted(k for k in current if k not in inventory)
                held = self.cluster.get_many([r.key for r in fetched])
                repairs = []
                for r in fetched:
                    other = held.get(r.key)
                    if other is not None and other.source_node != source_id and not is_newer(r, other):
                        self._decide(r, other)
                        continue
                    repairs.append(r)
                ops = [WriteOp.delete(k[0], k[1]) for k in gone] + [WriteOp.upsert(r) for r in repairs]
                if ops:
                    self.cluster.apply_writes(ops)
                    self.cluster.commit()
            stats = HarvestStats(fetched=len(inventory), deleted=len(gone), repaired=len(repairs))
            logger.info("Reconcile of %s: %d in inventory, deleted %d, repaired %d",
                        source_id, len(inventory), stats.deleted, stats.repaired)
            return stats

    def harvest(self, source_id: str, full: bool = False) -> HarvestStats:
        if full:
            return self.full_harvest(source_id, reset=True)
        return self.incremental_sync(source_id)

    def status(self) -> dict:
        cursors = self.cursors.all()
        return {
            sid: (cursors[sid].to_dict() if sid in cursors else None)
            for sid in sorted(self.sources)
        }
