"""
Sharded, replicated index cluster.

The coordinator owns one op log per shard and assigns every write the
shard's next seq, then pushes it to every Live replica. Reads fan out to
one Live replica per shard and are merged here.
"""

import heapq
import itertools
import logging
import shutil
import threading
from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import requests

from modules.errors import (
    IncompleteCoverage,
    InvalidReplicaState,
    LogTruncated,
    ReplicaUnavailable,
    ShardUnavailable,
    SuperIndexError,
)
from modules.index_core import (
    Index,
    QuerySpec,
    SearchResult,
    delete_entry,
    sort_key,
    upsert_entry,
)
from modules.metadata_model import MetadataRecord, RecordType, to_document, validate
from utils.fnv import fnv1a_64

logger = logging.getLogger(__name__)

APPLY_CHUNK = 500


class ReplicaState(str, Enum):
    LIVE = "Live"
    DOWN = "Down"
    CATCHING_UP = "CatchingUp"


def route(record_type, record_id: str, num_shards: int) -> int:
    name = RecordType.parse(record_type).value
    return fnv1a_64(f"{name}/{record_id}".encode("utf-8")) % num_shards


@dataclass(frozen=True)
class WriteOp:
    op: str
    record: MetadataRecord | None = None
    record_type: RecordType | None = None
    record_id: str | None = None

    @classmethod
    def upsert(cls, r: MetadataRecord) -> "WriteOp":
        return cls("upsert", record=r, record_type=r.record_type, record_id=r.id)

    @classmethod
    def delete(cls, record_type, record_id: str) -> "WriteOp":
        return cls("delete", record_type=RecordType.parse(record_type), record_id=record_id)

    def entry(self, seq: int) -> dict:
        if self.op == "upsert":
            return upsert_entry(seq, self.record)
        return delete_entry(seq, self.record_type, self.record_id)


@dataclass(frozen=True)
class WriteAck:
    shard: int
    seq: int
    applied: tuple


@dataclass
class ClusterState:
    num_shards: int
    replication_factor: int
    assignments: dict = field(default_factory=dict)
    health: dict = field(default_factory=dict)
    watermarks: dict = field(default_factory=dict)
    heads: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        shards = []
        for s in range(self.num_shards):
            shards.append({
                "shard": s,
                "head_seq": self.heads.get(s, 0),
                "replicas": [
                    {
                        "endpoint": ep,
                        "state": self.health[ep].value,
                        "watermark": self.watermarks.get((s, ep), 0),
                    }
                    for ep in self.assignments[s]
                ],
            })
        return {
            "num_shards": self.num_shards,
            "replication_factor": self.replication_factor,
            "shards": shards,
        }


# --- replica handles ---

class LocalReplica:
    """A replica whose index lives in this process."""

    def __init__(self, endpoint: str, index: Index):
        self.endpoint = endpoint
        self.index = index
        self.alive = True

    def _check(self) -> None:
        if not self.alive:
            raise ReplicaUnavailable(f"{self.endpoint} is down")

    def kill(self, wipe: bool = False) -> None:
        """Simulate the replica process dying; `wipe` also loses its disk."""
        self.alive = False
        if wipe:
            data_dir = self.index.data_dir
            self.index.discard()
            if data_dir is not None:
                shutil.rmtree(data_dir, ignore_errors=True)
            self.index = Index(data_dir=data_dir, snapshot_every=self.index.snapshot_every)

    def revive(self) -> None:
        self.alive = True

    def apply(self, entries: list) -> int:
        self._check()
        for e in entries:
            self.index.apply(e)
        return self.index.last_seq

    def commit(self) -> dict:
        self._check()
        cp = self.index.commit()
        return {"seq": cp.seq, "op_seq": cp.op_seq, "doc_count": cp.doc_count}

    def search(self, q: QuerySpec) -> SearchResult:
        self._check()
        return self.index.search(q)

    def health(self) -> dict:
        self._check()
        return {"state": ReplicaState.LIVE.value, "watermark": self.index.last_seq}

    def ops_since(self, from_seq: int, limit: int | None = None) -> list:
        self._check()
        return self.index.ops_since(from_seq, limit)

    def dump(self, source_node: str | None = None) -> tuple[int, list]:
        self._check()
        snap = self.index.snapshot()
        return snap.op_seq, snap.records(source_node)

    def install_snapshot(self, op_seq: int, docs: list) -> None:
        self._check()
        self.index.install_snapshot(op_seq, docs)

    def get_many(self, keys) -> dict:
        self._check()
        snap = self.index.snapshot()
        out = {}
        for rt, rid in keys:
            r = snap.get(rt, rid)
            if r is not None:
                out[r.key] = r
        return out

    def close(self) -> None:
        self.index.close()


class HttpReplica:
    """A replica running as its own process behind the replica RPC."""

    def __init__(self, endpoint: str, timeout: float = 10.0, session=None):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def _call(self, method: str, path: str, **kwargs) -> dict:
        try:
            resp = self.session.request(method, f"{self.endpoint}{path}", timeout=self.timeout, **kwargs)
        except requests.RequestException as e:
            raise ReplicaUnavailable(f"{self.endpoint}: {e}") from None
        if resp.status_code == LogTruncated.status:
            body = resp.json()
            if body.get("error") == LogTruncated.code:
                raise LogTruncated(body.get("message", ""))
        if resp.status_code >= 500:
            raise ReplicaUnavailable(f"{self.endpoint}{path} returned {resp.status_code}")
        if resp.status_code >= 400:
            raise SuperIndexError(f"{self.endpoint}{path} returned {resp.status_code}: {resp.text}")
        return resp.json()

    def apply(self, entries: list) -> int:
        return self._call("POST", "/replica/apply", json={"entries": entries})["watermark"]

    def commit(self) -> dict:
        return self._call("POST", "/replica/commit")

    def search(self, q: QuerySpec) -> SearchResult:
        return SearchResult.from_dict(self._call("GET", "/replica/search", json=q.to_dict()))

    def health(self) -> dict:
        return self._call("GET", "/replica/health")

    def ops_since(self, from_seq: int, limit: int | None = None) -> list:
        params = {"from_seq": from_seq}
        if limit is not None:
            params["limit"] = limit
        return self._call("GET", "/replica/log", params=params)["entries"]

    def dump(self, source_node: str | None = None) -> tuple[int, list]:
        params = {"source_node": source_node} if source_node is not None else None
        body = self._call("GET", "/replica/snapshot", params=params)
        return body["seq"], [validate(d) for d in body["docs"]]

    def install_snapshot(self, op_seq: int, docs: list) -> None:
        payload = [to_document(d) if isinstance(d, MetadataRecord) else d for d in docs]
        self._call("POST", "/replica/snapshot", json={"seq": op_seq, "docs": payload})

    def get_many(self, keys) -> dict:
        body = self._call("POST", "/replica/docs", json={"keys": [list(k) for k in keys]})
        records = [validate(d) for d in body["docs"]]
        return {r.key: r for r in records}

    def close(self) -> None:
        self.session.close()


# --- cluster ---

class Shard:
    def __init__(self, index: int, replicas: list, log_retention: int):
        self.index = index
        self.replicas = replicas
        self.states = {r.endpoint: ReplicaState.DOWN for r in replicas}
        self.watermarks = {r.endpoint: 0 for r in replicas}
        self.head = 0
        self.log = deque(maxlen=log_retention)
        self.lock = threading.RLock()
        self._rr = itertools.count()

    def live(self) -> list:
        return [r for r in self.replicas if self.states[r.endpoint] is ReplicaState.LIVE]

    def read_order(self) -> list:
        """Live replicas, rotated so reads spread across them."""
        live = self.live()
        if not live:
            return []
        start = next(self._rr) % len(live)
        return live[start:] + live[:start]

    def entries_after(self, watermark: int) -> list:
        if watermark >= self.head:
            return []
        first = self.log[0]["seq"] if self.log else self.head + 1
        if watermark + 1 < first:
            raise LogTruncated(f"Shard {self.index} log starts at {first}, replica is at {watermark}")
        return [e for e in self.log if e["seq"] > watermark]


def merge_results(results: list, q: QuerySpec) -> SearchResult:
    merged = heapq.merge(*(r.docs for r in results), key=sort_key)
    docs = list(itertools.islice(merged, q.offset, q.offset + q.limit))
    facets = {}
    for name in q.facet_fields:
        total = Counter()
        for r in results:
            total.update(r.facet_counts.get(name, {}))
        facets[name] = dict(total)
    return SearchResult(
        num_found=sum(r.num_found for r in results),
        docs=docs,
        facet_counts=facets,
    )


class Cluster:
    def __init__(self, replicas: list, replication_factor: int | None = None,
                 log_retention: int = 100_000, max_workers: int | None = None):
        if not replicas:
            raise ValueError("A cluster needs at least one shard")
        self.num_shards = len(replicas)
        self.replication_factor = replication_factor or len(replicas[0])
        for s, group in enumerate(replicas):
            if len(group) != self.replication_factor:
                raise ValueError(
                    f"Shard {s} has {len(group)} replicas, expected {self.replication_factor}"
                )
        self.shards = [Shard(s, group, log_retention) for s, group in enumerate(replicas)]
        self._pool = ThreadPoolExecutor(max_workers=max_workers or max(4, self.num_shards * 2))
        self._start()

    @classmethod
    def local(cls, num_shards: int = 3, replication_factor: int = 3, data_dir: Path | str | None = None,
              snapshot_every: int = 0, **kwargs) -> "Cluster":
        groups = []
        for s in range(num_shards):
            group = []
            for r in range(replication_factor):
                replica_dir = Path(data_dir) / f"shard-{s}" / f"replica-{r}" if data_dir is not None else None
                group.append(LocalReplica(f"local:{s}/{r}", Index(replica_dir, snapshot_every=snapshot_every)))
            groups.append(group)
        return cls(groups, replication_factor, **kwargs)

    def _start(self) -> None:
        """Read every replica's state to pick shard heads, then bring laggards up."""
        for shard in self.shards:
            reachable = {}
            for r in shard.replicas:
                try:
                    reachable[r.endpoint] = r.health()["watermark"]
                except ReplicaUnavailable:
                    logger.warning("Replica %s unreachable at startup", r.endpoint)
            shard.head = max(reachable.values(), default=0)
            for r in shard.replicas:
                if r.endpoint not in reachable:
                    continue
                shard.watermarks[r.endpoint] = reachable[r.endpoint]
                if reachable[r.endpoint] == shard.head:
                    shard.states[r.endpoint] = ReplicaState.LIVE
            for r in shard.replicas:
                if r.endpoint in reachable and shard.states[r.endpoint] is not ReplicaState.LIVE:
                    try:
                        self.recover(shard.index, shard.replicas.index(r))
                    except SuperIndexError as e:
                        logger.warning("Replica %s could not recover at startup: %s", r.endpoint, e)

    # --- routing / writes ---

    def route(self, record_type, record_id: str) -> int:
        return route(record_type, record_id, self.num_shards)

    def _mark_down(self, shard: Shard, replica) -> None:
        if shard.states[replica.endpoint] is not ReplicaState.DOWN:
            logger.warning("Replica %s of shard %d marked Down", replica.endpoint, shard.index)
        shard.states[replica.endpoint] = ReplicaState.DOWN

    def _push(self, shard: Shard, entries: list) -> list:
        applied = []
        for r in shard.live():
            try:
                for i in range(0, len(entries), APPLY_CHUNK):
                    shard.watermarks[r.endpoint] = r.apply(entries[i:i + APPLY_CHUNK])
                applied.append(r.endpoint)
            except ReplicaUnavailable:
                self._mark_down(shard, r)
        return applied

    def apply_write(self, op: WriteOp) -> WriteAck:
        return self.apply_writes([op])[0]

    def apply_writes(self, ops: list) -> list:
        """
        Apply a batch of writes. Each shard's share is sequenced under that
        shard's lock and pushed to its Live replicas in one go.
        """
        by_shard = {}
        for op in ops:
            by_shard.setdefault(self.route(op.record_type, op.record_id), []).append(op)
        for s in by_shard:
            if not self.shards[s].live():
                raise ShardUnavailable(f"Shard {s} has no Live replica")

        acks = []
        for s, shard_ops in sorted(by_shard.items()):
            shard = self.shards[s]
            with shard.lock:
                if not shard.live():
                    raise ShardUnavailable(f"Shard {s} has no Live replica")
                entries = []
                for op in shard_ops:
                    shard.head += 1
                    entry = op.entry(shard.head)
                    shard.log.append(entry)
                    entries.append(entry)
                applied = tuple(self._push(shard, entries))
                if not applied:
                    # a rejected write must not come back through catch-up
                    for _ in entries:
                        shard.log.pop()
                    shard.head -= len(entries)
                    raise ShardUnavailable(f"Shard {s}: no replica acknowledged the write")
                acks.extend(WriteAck(s, e["seq"], applied) for e in entries)
        return acks

    def upsert(self, r: MetadataRecord) -> WriteAck:
        return self.apply_write(WriteOp.upsert(r))

    def delete(self, record_type, record_id: str) -> WriteAck:
        return self.apply_write(WriteOp.delete(record_type, record_id))

    def commit(self) -> None:
        for shard in self.shards:
            with shard.lock:
                for r in shard.live():
                    try:
                        r.commit()
                    except ReplicaUnavailable:
                        self._mark_down(shard, r)

    # --- recovery ---

    def _replay(self, shard: Shard, replica, entries: list) -> None:
        for i in range(0, len(entries), APPLY_CHUNK):
            replica.apply(entries[i:i + APPLY_CHUNK])
        replica.commit()

    def catch_up(self, shard_idx: int, slot: int) -> int:
        """
        Replay the shard log after the replica's watermark and mark it Live.
        Raises LogTruncated when the log no longer reaches back that far.
        """
        shard = self.shards[shard_idx]
        replica = shard.replicas[slot]
        with shard.lock:
            state = shard.states[replica.endpoint]
            if state is ReplicaState.LIVE:
                return shard.watermarks[replica.endpoint]
            if state is not ReplicaState.CATCHING_UP:
                raise InvalidReplicaState(f"{replica.endpoint} is {state.value}, not CatchingUp")
            try:
                watermark = replica.health()["watermark"]
                if watermark > shard.head:
                    raise LogTruncated(f"{replica.endpoint} is ahead of the shard head ({watermark} > {shard.head})")
                entries = shard.entries_after(watermark)
                self._replay(shard, replica, entries)
            except ReplicaUnavailable:
                self._mark_down(shard, replica)
                raise
            shard.watermarks[replica.endpoint] = shard.head
            shard.states[replica.endpoint] = ReplicaState.LIVE
            logger.info("Replica %s of shard %d Live at seq %d (%d ops replayed)",
                        replica.endpoint, shard_idx, shard.head, len(entries))
            return shard.head

    def recover(self, shard_idx: int, slot: int) -> int:
        """
        Bring a reachable replica back: shard log first, then a Live peer's
        op history, then a full snapshot transfer from that peer.
        """
        shard = self.shards[shard_idx]
        replica = shard.replicas[slot]
        with shard.lock:
            if shard.states[replica.endpoint] is ReplicaState.LIVE:
                return shard.watermarks[replica.endpoint]
            shard.states[replica.endpoint] = ReplicaState.CATCHING_UP
            if not shard.live():
                # first replica back after a full shard outage defines the head
                try:
                    watermark = replica.health()["watermark"]
                except ReplicaUnavailable:
                    self._mark_down(shard, replica)
                    raise
                if watermark > shard.head:
                    logger.warning("Shard %d head moves %d -> %d from %s",
                                   shard_idx, shard.head, watermark, replica.endpoint)
                    shard.head = watermark
                    shard.log.clear()
            try:
                return self.catch_up(shard_idx, slot)
            except LogTruncated as e:
                logger.info("Replica %s needs more than the shard log: %s", replica.endpoint, e)
            peers = [r for r in shard.live() if r is not replica]
            if not peers:
                shard.states[replica.endpoint] = ReplicaState.DOWN
                raise ShardUnavailable(f"Shard {shard_idx} has no Live peer to recover {replica.endpoint} from")
            peer = peers[0]
            try:
                watermark = replica.health()["watermark"]
                try:
                    if watermark > shard.head:
                        raise LogTruncated("replica ahead of head")
                    self._replay(shard, replica, peer.ops_since(watermark))
                except LogTruncated:
                    peer.commit()
                    op_seq, docs = peer.dump()
                    replica.install_snapshot(op_seq, docs)
                    logger.info("Replica %s bootstrapped from %s snapshot at seq %d",
                                replica.endpoint, peer.endpoint, op_seq)
            except ReplicaUnavailable:
                self._mark_down(shard, replica)
                raise
            return self.catch_up(shard_idx, slot)

    def check_health(self) -> ClusterState:
        """Demote unreachable replicas and recover the ones that came back."""
        for shard in self.shards:
            for slot, r in enumerate(shard.replicas):
                with shard.lock:
                    try:
                        watermark = r.health()["watermark"]
                    except ReplicaUnavailable:
                        self._mark_down(shard, r)
                        continue
                    if shard.states[r.endpoint] is ReplicaState.LIVE:
                        if watermark == shard.head:
                            shard.watermarks[r.endpoint] = watermark
                            continue
                        # restarted behind our back
                        logger.warning("Live replica %s is at seq %d, shard head is %d",
                                       r.endpoint, watermark, shard.head)
                        shard.states[r.endpoint] = ReplicaState.CATCHING_UP
                    try:
                        self.recover(shard.index, slot)
                    except SuperIndexError as e:
                        logger.warning("Recovery of %s failed: %s", r.endpoint, e)
        return self.state()

    # --- reads ---

    def _ask_shard(self, shard: Shard, call):
        for r in shard.read_order():
            try:
                return call(r)
            except ReplicaUnavailable:
                with shard.lock:
                    self._mark_down(shard, r)
        raise IncompleteCoverage(f"Shard {shard.index} has no Live replica")

    def _fan_out(self, call_for_shard) -> list:
        missing = [s.index for s in self.shards if not s.live()]
        if missing:
            raise IncompleteCoverage(f"No Live replica for shard(s) {missing}")
        futures = [self._pool.submit(call_for_shard, shard) for shard in self.shards]
        return [f.result() for f in futures]

    def scatter_gather(self, q: QuerySpec) -> SearchResult:
        sub = q.widened()
        results = self._fan_out(lambda shard: self._ask_shard(shard, lambda r: r.search(sub)))
        return merge_results(results, q)

    def get_many(self, keys) -> dict:
        by_shard = {}
        for rt, rid in keys:
            by_shard.setdefault(self.route(rt, rid), []).append((RecordType.parse(rt).value, rid))
        out = {}
        for s, shard_keys in by_shard.items():
            out.update(self._ask_shard(self.shards[s], lambda r: r.get_many(shard_keys)))
        return out

    def get(self, record_type, record_id: str) -> MetadataRecord | None:
        return self.get_many([(record_type, record_id)]).get((RecordType.parse(record_type).value, record_id))

    def records_for_source(self, source_id: str) -> list:
        parts = self._fan_out(lambda shard: self._ask_shard(shard, lambda r: r.dump(source_id)[1]))
        return [r for part in parts for r in part]

    def doc_counts(self) -> dict:
        return {
            rt.value: self.scatter_gather(QuerySpec(record_type=rt, limit=0)).num_found
            for rt in RecordType
        }

    def replica_dumps(self) -> dict:
        """Committed state of every reachable replica, keyed by (shard, endpoint)."""
        out = {}
        for shard in self.shards:
            for r in shard.replicas:
                try:
                    r.commit()
                    out[(shard.index, r.endpoint)] = r.dump()
                except ReplicaUnavailable:
                    continue
        return out

    def state(self) -> ClusterState:
        st = ClusterState(self.num_shards, self.replication_factor)
        for shard in self.shards:
            st.assignments[shard.index] = [r.endpoint for r in shard.replicas]
            st.heads[shard.index] = shard.head
            for r in shard.replicas:
                st.health[r.endpoint] = shard.states[r.endpoint]
                st.watermarks[(shard.index, r.endpoint)] = shard.watermarks[r.endpoint]
        return st

    def close(self) -> None:
        self._pool.shutdown(wait=True)
        for shard in self.shards:
            for r in shard.replicas:
                try:
                    r.close()
                except Exception as e:
                    logger.warning("Closing %s failed: %s", r.endpoint, e)
