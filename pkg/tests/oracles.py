"""
Slow, obviously-correct references the tests compare the real code against.
"""

import re
from collections import Counter

from modules.federation_sim import PROJECTS, VARIABLES, YEAR_MS, YEAR_START_MS
from modules.index_core import QuerySpec
from modules.metadata_model import RecordType


def _tokens(text):
    return {t for t in re.split(r"[\s/.,:;=]+", text.lower()) if t}


def linear_search(records, q):
    """Scan every record; returns (num_found, ordered page, facet counts)."""
    want_tokens = _tokens(q.query_text)
    matches = []
    for r in records:
        if r.record_type is not RecordType.parse(q.record_type):
            continue
        if any(value not in r.fields.get(name, ()) for name, value in q.filters):
            continue
        have = set()
        for values in r.fields.values():
            for v in values:
                have |= _tokens(v)
        if not want_tokens <= have:
            continue
        if q.from_ms is not None and r.timestamp_ms < q.from_ms:
            continue
        if q.to_ms is not None and r.timestamp_ms >= q.to_ms:
            continue
        matches.append(r)
    matches.sort(key=lambda r: (-r.timestamp_ms, r.id))
    facets = {}
    for name in q.facet_fields:
        c = Counter()
        for r in matches:
            c.update(set(r.fields.get(name, ())))
        facets[name] = dict(c)
    return len(matches), matches[q.offset:q.offset + q.limit], facets


def replay(entries):
    """Apply op entries to a plain dict keyed by (type, id)."""
    state = {}
    for e in entries:
        if e["op"] == "upsert":
            doc = e["doc"]
            state[(doc["type"], doc["id"])] = doc
        else:
            state.pop((e["key"]["type"], e["key"]["id"]), None)
    return state


def random_queries(rng, n):
    """`n` QuerySpecs over the generator's vocabularies."""
    for _ in range(n):
        filters = []
        if rng.random() < 0.5:
            filters.append(("project", rng.choice(PROJECTS)))
        text = rng.choice(["", "", rng.choice(VARIABLES).lower(), "output"])
        from_ms = YEAR_START_MS + rng.randrange(YEAR_MS) if rng.random() < 0.3 else None
        yield QuerySpec(
            query_text=text,
            filters=tuple(filters),
            record_type=rng.choice(list(RecordType)),
            facet_fields=("project", "variable") if rng.random() < 0.5 else (),
            from_ms=from_ms,
            offset=rng.randrange(0, 30),
            limit=rng.randrange(0, 25),
        )
