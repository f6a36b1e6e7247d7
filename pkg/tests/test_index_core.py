import random
from dataclasses import replace

import pytest

from modules.errors import CorruptFrame, LogTruncated, OpOrderError, QueryError
from modules.federation_sim import generate_corpus
from modules.index_core import OPLOG_FILE, Index, QuerySpec
from modules.metadata_model import MetadataRecord, RecordType, to_document
from tests.oracles import linear_search, random_queries, replay


def record(rid, project="CMIP6", ts=1_000, version=0, record_type=RecordType.DATASET, **fields):
    fields = {k: tuple(v) for k, v in fields.items()}
    fields.setdefault("project", (project,))
    return MetadataRecord(record_type, rid, version, "n1", ts, fields)


def test_empty_index_match_all():
    result = Index().search(QuerySpec(facet_fields=("project",)))
    assert result.num_found == 0
    assert result.docs == []
    assert result.facet_counts == {"project": {}}


def test_upsert_commit_search():
    idx = Index()
    idx.upsert(record("d1"))
    assert idx.search(QuerySpec()).num_found == 0
    idx.commit()
    assert idx.search(QuerySpec()).num_found == 1


def test_upsert_replaces_same_key():
    idx = Index()
    idx.upsert(record("d1"))
    idx.upsert(record("d1", version=1, project="CMIP5"))
    idx.commit()
    assert idx.search(QuerySpec()).num_found == 1
    assert idx.get("Dataset", "d1").version == 1
    assert idx.search(QuerySpec(filters=(("project", "CMIP6"),))).num_found == 0


def test_upsert_many_generated(corpus):
    idx = Index()
    for r in corpus:
        idx.upsert(r)
    idx.commit()
    total = sum(idx.search(QuerySpec(record_type=t, limit=0)).num_found for t in RecordType)
    assert total == len(corpus)


def test_delete_existing_and_absent():
    idx = Index()
    idx.upsert(record("d1"))
    idx.upsert(record("d2"))
    idx.commit()
    idx.delete(RecordType.DATASET, "d1")
    idx.commit()
    assert idx.search(QuerySpec()).num_found == 1
    seq = idx.delete(RecordType.DATASET, "nope")
    idx.commit()
    assert seq == 4
    assert idx.search(QuerySpec()).num_found == 1


def test_interleaved_script_matches_replay():
    rng = random.Random(5)
    corpus = generate_corpus(3, 40, "n1")
    idx = Index()
    entries = []
    for _ in range(200):
        if rng.random() < 0.6:
            r = rng.choice(corpus)
            seq = idx.upsert(r)
            entries.append({"seq": seq, "op": "upsert", "doc": to_document(r)})
        else:
            r = rng.choice(corpus)
            seq = idx.delete(r.record_type, r.id)
            entries.append({"seq": seq, "op": "delete", "key": {"type": r.record_type.value, "id": r.id}})
    idx.commit()
    _, docs = idx.dump()
    assert {(d["type"], d["id"]): d for d in docs} == replay(entries)


def test_commit_points():
    idx = Index()
    idx.upsert(record("d1"))
    first = idx.commit()
    second = idx.commit()
    assert second.seq > first.seq
    assert second.doc_count == first.doc_count == 1
    assert second.op_seq == first.op_seq == 1


def test_snapshot_isolation():
    idx = Index()
    idx.upsert(record("d1"))
    idx.commit()
    snap = idx.snapshot()
    idx.upsert(record("d2"))
    idx.commit()
    assert snap.search(QuerySpec()).num_found == 1
    assert idx.search(QuerySpec()).num_found == 2


def test_facet_counts():
    idx = Index()
    idx.upsert(record("a", "CMIP6"))
    idx.upsert(record("b", "CMIP6"))
    idx.upsert(record("c", "CMIP5"))
    idx.commit()
    result = idx.search(QuerySpec(facet_fields=("project",), limit=1))
    assert result.facet_counts == {"project": {"CMIP6": 2, "CMIP5": 1}}
    assert len(result.docs) == 1


def test_ordering_is_timestamp_desc_then_id():
    idx = Index()
    idx.upsert(record("b", ts=5))
    idx.upsert(record("a", ts=5))
    idx.upsert(record("c", ts=9))
    idx.commit()
    assert [r.id for r in idx.search(QuerySpec()).docs] == ["c", "a", "b"]


def test_free_text_and_window():
    idx = Index()
    idx.upsert(record("a", ts=10, title=["Surface air temperature"]))
    idx.upsert(record("b", ts=20, title=["Precipitation flux"]))
    idx.commit()
    assert [r.id for r in idx.search(QuerySpec(query_text="Temperature")).docs] == ["a"]
    assert [r.id for r in idx.search(QuerySpec(from_ms=15)).docs] == ["b"]
    assert [r.id for r in idx.search(QuerySpec(to_ms=15)).docs] == ["a"]


def test_search_matches_linear_scan_oracle():
    corpus = generate_corpus(42, 500, "n1")
    idx = Index()
    for r in corpus:
        idx.upsert(r)
    idx.commit()
    rng = random.Random(99)
    for q in random_queries(rng, 50):
        num_found, docs, facets = linear_search(corpus, q)
        result = idx.search(q)
        assert result.num_found == num_found
        assert [r.id for r in result.docs] == [r.id for r in docs]
        assert result.facet_counts == facets


@pytest.mark.parametrize("kwargs, code", [
    ({"offset": -1}, "BadOffset"),
    ({"limit": -5}, "BadLimit"),
    ({"offset": 999_999, "limit": 2}, "WindowTooLarge"),
])
def test_query_spec_bounds(kwargs, code):
    with pytest.raises(QueryError) as exc:
        QuerySpec(**kwargs)
    assert exc.value.code == code


def test_explicit_seq_must_be_next():
    idx = Index()
    idx.upsert(record("d1"), seq=1)
    with pytest.raises(OpOrderError):
        idx.upsert(record("d2"), seq=3)


def test_apply_ignores_already_applied_entries():
    idx = Index()
    entry = {"seq": 1, "op": "upsert", "doc": to_document(record("d1"))}
    assert idx.apply(entry) is True
    assert idx.apply(entry) is False
    assert idx.last_seq == 1


def test_ops_since_and_truncation():
    idx = Index(history=5)
    for i in range(10):
        idx.upsert(record(f"d{i}"))
    assert [e["seq"] for e in idx.ops_since(7)] == [8, 9, 10]
    assert idx.ops_since(10) == []
    with pytest.raises(LogTruncated):
        idx.ops_since(2)


def test_reopen_replays_log_and_snapshot(tmp_path, corpus):
    idx = Index(tmp_path / "r0", snapshot_every=2)
    for r in corpus[:30]:
        idx.upsert(r)
    idx.commit()
    idx.commit()  # writes a snapshot
    for r in corpus[30:40]:
        idx.upsert(r)
    idx.delete(corpus[0].record_type, corpus[0].id)
    idx.commit()
    expected = idx.dump()
    idx.discard()

    reopened = Index(tmp_path / "r0")
    assert reopened.last_seq == 41
    assert reopened.dump() == expected
    reopened.close()


def test_reopen_rejects_corrupt_frame(tmp_path):
    idx = Index(tmp_path / "r0")
    idx.upsert(record("d1"))
    idx.upsert(record("d2"))
    idx.discard()
    path = tmp_path / "r0" / OPLOG_FILE
    data = bytearray(path.read_bytes())
    data[10] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptFrame):
        Index(tmp_path / "r0")


def test_install_snapshot_replaces_state(corpus):
    idx = Index()
    idx.upsert(record("old"))
    idx.install_snapshot(50, corpus[:10])
    assert idx.last_seq == 50
    assert idx.get("Dataset", "old") is None
    assert idx.snapshot().doc_count == 10


def test_pages_partition_the_match_list():
    idx = Index()
    for r in generate_corpus(17, 300, "n1"):
        idx.upsert(r)
    idx.commit()
    for q in (QuerySpec(), QuerySpec(filters=(("project", "CMIP6"),)), QuerySpec(record_type="File")):
        full = idx.search(replace(q, limit=1_000)).docs
        paged = []
        k = 0
        while True:
            page = idx.search(replace(q, offset=k * 7, limit=7))
            if not page.docs:
                break
            paged.extend(page.docs)
            k += 1
        assert [r.key for r in paged] == [r.key for r in full]
        assert len({r.key for r in paged}) == len(paged)


def test_single_valued_facet_sums_to_num_found():
    idx = Index()
    for r in generate_corpus(19, 400, "n1"):
        idx.upsert(r)
    idx.commit()
    # every generated record carries exactly one project, institute and frequency
    for q in random_queries(random.Random(4), 40):
        result = idx.search(replace(q, facet_fields=("project", "institute", "frequency"), limit=0))
        for name in ("project", "institute", "frequency"):
            assert sum(result.facet_counts[name].values()) == result.num_found


def test_repeated_upsert_is_idempotent(corpus):
    once, twice = Index(), Index()
    for r in corpus[:80]:
        once.upsert(r)
        twice.upsert(r)
        twice.upsert(r)
    once.commit()
    twice.commit()
    assert once.snapshot().records() == twice.snapshot().records()
    assert once.search(QuerySpec(facet_fields=("project",))) == twice.search(QuerySpec(facet_fields=("project",)))
