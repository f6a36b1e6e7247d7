"""
Deterministic mock federation.

Simulated source index nodes holding seeded corpora, scripted mutation
timelines, and the pure serve_* functions behind the source harvest
protocol. Nothing here reads the wall clock; time is the node's sim clock.
"""

import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from modules.errors import (
    ScriptOrderError,
    ScriptTargetExists,
    ScriptTargetMissing,
    SourceUnreachable,
    UnknownSource,
)
from modules.metadata_model import MetadataRecord, RecordType, digest_hex, to_document

logger = logging.getLogger(__name__)

PROJECTS = ("CMIP5", "CMIP6", "obs4MIPs")
VARIABLES = (
    "tas", "pr", "psl", "uas", "vas", "huss", "rsds", "rlds", "tasmax", "tasmin",
    "clt", "evspsbl", "hfls", "hfss", "prc", "prsn", "ps", "sfcWind", "ts", "zg",
)
INSTITUTES = (
    "NCAR", "NASA-GISS", "NOAA-GFDL", "IPSL", "MOHC",
    "MPI-M", "CNRM-CERFACS", "MIROC", "CCCma", "BCC",
)
FREQUENCIES = ("mon", "day", "6hr")
RECORD_TYPES = (RecordType.DATASET, RecordType.FILE, RecordType.AGGREGATION)
RECORD_TYPE_WEIGHTS = (5, 4, 1)

# 2018-01-01T00:00:00.000Z
YEAR_START_MS = 1_514_764_800_000
YEAR_MS = 365 * 86_400_000
YEAR_END_MS = YEAR_START_MS + YEAR_MS


class FaultMode(str, Enum):
    NONE = "none"
    UNREACHABLE = "unreachable"
    SLOW = "slow"
    PAGE_ORDER = "page_order"


def _random_fields(rng: random.Random, source_id: str, k: int) -> dict:
    project = rng.choice(PROJECTS)
    institute = rng.choice(INSTITUTES)
    variables = [rng.choice(VARIABLES)]
    if rng.random() < 0.1:
        extra = rng.choice(VARIABLES)
        if extra != variables[0]:
            variables.append(extra)
    frequency = rng.choice(FREQUENCIES)
    return {
        "project": (project,),
        "institute": (institute,),
        "variable": tuple(variables),
        "frequency": (frequency,),
        "title": (f"{project} {institute} {' '.join(variables)} {frequency} output",),
        "url": (f"http://{source_id}.example.org/thredds/{project}/{institute}/{variables[0]}/{k}.nc",),
    }


def generate_corpus(seed: int, n: int, source_id: str) -> list[MetadataRecord]:
    """
    `n` records for one source, ids `{source_id}-{k}`, timestamps spread over
    the simulated year. Same (seed, n, source_id) gives the same list.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = random.Random(f"{seed}:{source_id}")
    out = []
    for k in range(n):
        record_type = rng.choices(RECORD_TYPES, weights=RECORD_TYPE_WEIGHTS)[0]
        out.append(MetadataRecord(
            record_type=record_type,
            id=f"{source_id}-{k}",
            version=0,
            source_node=source_id,
            timestamp_ms=YEAR_START_MS + rng.randrange(YEAR_MS),
            fields=_random_fields(rng, source_id, k),
        ))
    return out


# --- mutation scripts ---

@dataclass(frozen=True)
class ScriptStep:
    at_ms: int
    op: str
    record_type: RecordType
    record_id: str
    fields: dict | None = None
    backdate_ms: int = 0

    def to_dict(self) -> dict:
        d = {"at_ms": self.at_ms, "op": self.op, "type": self.record_type.value, "id": self.record_id}
        if self.fields is not None:
            d["fields"] = {k: list(v) for k, v in sorted(self.fields.items())}
        if self.backdate_ms:
            d["backdate_ms"] = self.backdate_ms
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptStep":
        if d.get("op") not in ("add", "update", "delete"):
            raise ScriptOrderError(f"Unknown script op: {d.get('op')!r}")
        fields = d.get("fields")
        return cls(
            at_ms=int(d["at_ms"]),
            op=d["op"],
            record_type=RecordType.parse(d["type"]),
            record_id=d["id"],
            fields={k: tuple(v) for k, v in fields.items()} if fields is not None else None,
            backdate_ms=int(d.get("backdate_ms", 0)),
        )


@dataclass
class MutationScript:
    steps: list = field(default_factory=list)

    def __post_init__(self):
        last = None
        for step in self.steps:
            if last is not None and step.at_ms < last:
                raise ScriptOrderError(f"Step at {step.at_ms} comes after a step at {last}")
            last = step.at_ms

    @property
    def end_ms(self) -> int:
        return self.steps[-1].at_ms if self.steps else 0

    def to_list(self) -> list:
        return [s.to_dict() for s in self.steps]

    @classmethod
    def from_list(cls, items: list) -> "MutationScript":
        return cls([ScriptStep.from_dict(d) for d in items])


def generate_script(seed: int, source_id: str, initial: list, steps: int, start_ms: int = YEAR_END_MS,
                    step_ms: int = 1_000, delete_ratio: float = 0.15, backdate_ratio: float = 0.08,
                    add_ratio: float = 0.25, skew_ms: int = 60_000) -> MutationScript:
    """
    Random but valid timeline over `initial`: every update/delete hits a key
    that exists at that point. Back-dated updates stamp the record up to
    `skew_ms - 1` before the step time.
    """
    rng = random.Random(f"{seed}:{source_id}:script")
    live = sorted(r.key for r in initial)
    next_k = len(initial)
    out = []
    for i in range(steps):
        at_ms = start_ms + (i + 1) * step_ms
        roll = rng.random()
        if not live or roll < add_ratio:
            record_type = rng.choices(RECORD_TYPES, weights=RECORD_TYPE_WEIGHTS)[0]
            record_id = f"{source_id}-{next_k}"
            out.append(ScriptStep(at_ms, "add", record_type, record_id, _random_fields(rng, source_id, next_k)))
            live.append((record_type.value, record_id))
            next_k += 1
        elif roll < add_ratio + delete_ratio:
            key = live.pop(rng.randrange(len(live)))
            out.append(ScriptStep(at_ms, "delete", RecordType(key[0]), key[1]))
        else:
            key = live[rng.randrange(len(live))]
            k = int(key[1].rsplit("-", 1)[1])
            backdate = 0
            if rng.random() < backdate_ratio / (1 - add_ratio - delete_ratio):
                backdate = rng.randint(1, max(1, skew_ms - 1))
            out.append(ScriptStep(at_ms, "update", RecordType(key[0]), key[1],
                                  _random_fields(rng, source_id, k), backdate))
    return MutationScript(out)


# --- nodes ---

@dataclass
class SimNode:
    source_id: str
    store: dict = field(default_factory=dict)
    sim_clock_ms: int = 0
    fault: FaultMode = FaultMode.NONE
    latency_ms: int = 0
    script_pos: int = 0
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    @classmethod
    def with_corpus(cls, source_id: str, records: list) -> "SimNode":
        node = cls(source_id)
        for r in records:
            node.store[r.key] = r
        node.sim_clock_ms = max((r.timestamp_ms for r in records), default=0)
        return node

    def set_fault(self, mode, latency_ms: int = 0) -> None:
        self.fault = FaultMode(mode)
        self.latency_ms = latency_ms
        logger.info("Sim node %s fault mode: %s", self.source_id, self.fault.value)


def _apply_step(node: SimNode, step: ScriptStep) -> None:
    key = (step.record_type.value, step.record_id)
    prior = node.store.get(key)
    if step.op == "delete":
        if prior is None:
            raise ScriptTargetMissing(f"{node.source_id}: delete of missing {key}")
        del node.store[key]
        return
    if step.op == "update" and prior is None:
        raise ScriptTargetMissing(f"{node.source_id}: update of missing {key}")
    if step.op == "add" and prior is not None:
        raise ScriptTargetExists(f"{node.source_id}: add of existing {key}")
    timestamp_ms = step.at_ms - step.backdate_ms
    if timestamp_ms <= 0:
        raise ScriptOrderError(f"Step for {key} would stamp a non-positive timestamp")
    node.store[key] = MetadataRecord(
        record_type=step.record_type,
        id=step.record_id,
        version=0 if prior is None else prior.version + 1,
        source_node=node.source_id,
        timestamp_ms=timestamp_ms,
        fields=dict(step.fields if step.fields is not None else prior.fields),
    )


def apply_script(node: SimNode, script: MutationScript, up_to_ms: int) -> int:
    """Run every not-yet-applied step with at_ms <= up_to_ms. Returns how many ran."""
    applied = 0
    with node.lock:
        while node.script_pos < len(script.steps):
            step = script.steps[node.script_pos]
            if step.at_ms > up_to_ms:
                break
            _apply_step(node, step)
            node.script_pos += 1
            applied += 1
        node.sim_clock_ms = max(node.sim_clock_ms, up_to_ms)
    return applied


def serve_search_page(node: SimNode, from_ms: int, to_ms: int, offset: int, limit: int) -> dict:
    with node.lock:
        in_range = [r for r in node.store.values() if from_ms <= r.timestamp_ms < to_ms]
    in_range.sort(key=lambda r: (r.timestamp_ms, r.id))
    return {
        "numFound": len(in_range),
        "offset": offset,
        "docs": [to_document(r) for r in in_range[offset:offset + limit]],
    }


def serve_inventory(node: SimNode, offset: int, limit: int) -> dict:
    with node.lock:
        records = [node.store[k] for k in sorted(node.store)]
    return {
        "numFound": len(records),
        "offset": offset,
        "items": [
            {"type": r.record_type.value, "id": r.id, "digest": digest_hex(r)}
            for r in records[offset:offset + limit]
        ],
    }


def serve_record(node: SimNode, record_type, record_id: str) -> dict | None:
    with node.lock:
        r = node.store.get((RecordType.parse(record_type).value, record_id))
    return to_document(r) if r is not None else None


def apply_fault(node: SimNode, page: dict) -> dict:
    """Shape a response according to the node's fault mode."""
    if node.fault is FaultMode.UNREACHABLE:
        raise SourceUnreachable(f"{node.source_id} is unreachable")
    if node.fault is FaultMode.SLOW and node.latency_ms:
        time.sleep(node.latency_ms / 1000)
    if node.fault is FaultMode.PAGE_ORDER and "docs" in page:
        page = dict(page, docs=list(reversed(page["docs"])))
    return page


class SimSourceClient:
    """In-process stand-in for HttpSourceClient talking to a SimNode."""

    def __init__(self, node: SimNode):
        self.node = node

    def search_page(self, from_ms: int, to_ms: int, offset: int, limit: int) -> dict:
        return apply_fault(self.node, serve_search_page(self.node, from_ms, to_ms, offset, limit))

    def inventory_page(self, offset: int, limit: int) -> dict:
        return apply_fault(self.node, serve_inventory(self.node, offset, limit))

    def fetch_record(self, record_type, record_id: str) -> dict | None:
        apply_fault(self.node, {})
        return serve_record(self.node, record_type, record_id)


# --- scenarios ---

@dataclass
class Federation:
    seed: int
    nodes: dict = field(default_factory=dict)
    scripts: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def node(self, source_id: str) -> SimNode:
        try:
            return self.nodes[source_id]
        except KeyError:
            raise UnknownSource(f"No simulated node {source_id!r}") from None

    @property
    def end_ms(self) -> int:
        return max((s.end_ms for s in self.scripts.values()), default=0)

    def advance(self, to_ms: int) -> int:
        return sum(apply_script(self.nodes[sid], self.scripts[sid], to_ms) for sid in sorted(self.nodes))

    def union(self) -> dict:
        out = {}
        for sid in sorted(self.nodes):
            with self.nodes[sid].lock:
                out.update(self.nodes[sid].store)
        return out

    def clients(self) -> dict:
        return {sid: SimSourceClient(node) for sid, node in self.nodes.items()}


def load_scenario(source) -> Federation:
    """
    Build a Federation from a scenario file path or an already parsed dict:
    {"seed": ..., "nodes": [{"source_id": ..., "initial_n": ..., "script": [...]}]}.
    A node's "script" may also be {"generate": {"steps": ..., ...}}.
    """
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as f:
            scenario = json.load(f)
    else:
        scenario = source
    seed = int(scenario.get("seed", 0))
    fed = Federation(seed=seed, settings={k: v for k, v in scenario.items() if k not in ("seed", "nodes")})
    for entry in scenario.get("nodes", []):
        source_id = entry["source_id"]
        corpus = generate_corpus(seed, int(entry.get("initial_n", 0)), source_id)
        script_def = entry.get("script", [])
        if isinstance(script_def, dict):
            gen = dict(script_def.get("generate", {}))
            steps = int(gen.pop("steps", 0))
            script = generate_script(seed, source_id, corpus, steps, **gen)
        else:
            script = MutationScript.from_list(script_def)
        fed.nodes[source_id] = SimNode.with_corpus(source_id, corpus)
        fed.scripts[source_id] = script
    return fed
