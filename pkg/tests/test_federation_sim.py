import random
from collections import Counter

import pytest

from modules.errors import ScriptOrderError, ScriptTargetExists, ScriptTargetMissing, SourceUnreachable
from modules.federation_sim import (
    YEAR_END_MS,
    MutationScript,
    SimNode,
    SimSourceClient,
    apply_script,
    generate_corpus,
    generate_script,
    load_scenario,
    serve_inventory,
    serve_record,
    serve_search_page,
)
from modules.harvester import FAR_FUTURE_MS
from modules.metadata_model import digest_hex, validate


def test_generate_corpus_edges():
    assert generate_corpus(1, 0, "n") == []
    assert generate_corpus(1, 50, "n") == generate_corpus(1, 50, "n")
    assert generate_corpus(1, 50, "n") != generate_corpus(2, 50, "n")
    with pytest.raises(ValueError):
        generate_corpus(1, -1, "n")


def test_generate_corpus_project_tally_reproducible():
    first = Counter(r.fields["project"][0] for r in generate_corpus(42, 1000, "n"))
    second = Counter(r.fields["project"][0] for r in generate_corpus(42, 1000, "n"))
    assert first == second
    assert sum(first.values()) == 1000


def test_apply_script_before_first_step():
    node = SimNode.with_corpus("n", generate_corpus(1, 10, "n"))
    script = generate_script(1, "n", generate_corpus(1, 10, "n"), 20)
    assert apply_script(node, script, script.steps[0].at_ms - 1) == 0


def test_add_then_delete_is_a_net_noop():
    corpus = generate_corpus(1, 5, "n")
    node = SimNode.with_corpus("n", corpus)
    before = dict(node.store)
    script = MutationScript.from_list([
        {"at_ms": YEAR_END_MS + 1, "op": "add", "type": "File", "id": "f-new", "fields": {"project": ["CMIP6"]}},
        {"at_ms": YEAR_END_MS + 2, "op": "delete", "type": "File", "id": "f-new"},
    ])
    assert apply_script(node, script, YEAR_END_MS + 10) == 2
    assert node.store == before


def test_script_errors():
    node = SimNode("n")
    with pytest.raises(ScriptTargetMissing):
        apply_script(node, MutationScript.from_list([{"at_ms": 5, "op": "delete", "type": "Dataset", "id": "x"}]), 10)
    node = SimNode.with_corpus("n", generate_corpus(1, 1, "n"))
    r = next(iter(node.store.values()))
    with pytest.raises(ScriptTargetExists):
        apply_script(node, MutationScript.from_list(
            [{"at_ms": 5, "op": "add", "type": r.record_type.value, "id": r.id, "fields": {"a": ["b"]}}]), 10)
    with pytest.raises(ScriptOrderError):
        MutationScript.from_list([
            {"at_ms": 9, "op": "delete", "type": "Dataset", "id": "x"},
            {"at_ms": 5, "op": "delete", "type": "Dataset", "id": "y"},
        ])


def test_random_script_matches_map_replay():
    corpus = generate_corpus(4, 100, "n")
    script = generate_script(4, "n", corpus, 500)
    node = SimNode.with_corpus("n", corpus)
    apply_script(node, script, script.end_ms)

    oracle = {r.key: r.version for r in corpus}
    for step in script.steps:
        key = (step.record_type.value, step.record_id)
        if step.op == "delete":
            del oracle[key]
        elif step.op == "add":
            oracle[key] = 0
        else:
            oracle[key] += 1
    assert {k: r.version for k, r in node.store.items()} == oracle


def test_serve_search_page_empty_and_paging():
    assert serve_search_page(SimNode("n"), 0, FAR_FUTURE_MS, 0, 10)["numFound"] == 0
    node = SimNode.with_corpus("n", generate_corpus(2, 250, "n"))
    sizes = [len(serve_search_page(node, 0, FAR_FUTURE_MS, off, 100)["docs"]) for off in (0, 100, 200)]
    assert sizes == [100, 100, 50]


def test_serve_search_page_matches_scan():
    corpus = generate_corpus(6, 300, "n")
    node = SimNode.with_corpus("n", corpus)
    rng = random.Random(3)
    for _ in range(20):
        lo = rng.choice(corpus).timestamp_ms
        hi = lo + rng.randrange(1, 10 ** 10)
        offset, limit = rng.randrange(0, 50), rng.randrange(1, 50)
        page = serve_search_page(node, lo, hi, offset, limit)
        expected = sorted((r for r in corpus if lo <= r.timestamp_ms < hi), key=lambda r: (r.timestamp_ms, r.id))
        assert page["numFound"] == len(expected)
        assert [validate(d) for d in page["docs"]] == expected[offset:offset + limit]


def test_inventory_and_record():
    corpus = generate_corpus(2, 30, "n")
    node = SimNode.with_corpus("n", corpus)
    inv = serve_inventory(node, 0, 100)
    assert inv["numFound"] == 30
    assert {(i["type"], i["id"]): i["digest"] for i in inv["items"]} == {r.key: digest_hex(r) for r in corpus}
    r = corpus[0]
    assert validate(serve_record(node, r.record_type, r.id)) == r
    assert serve_record(node, "Dataset", "missing") is None


def test_fault_modes():
    node = SimNode.with_corpus("n", generate_corpus(2, 10, "n"))
    client = SimSourceClient(node)
    normal = client.search_page(0, FAR_FUTURE_MS, 0, 10)["docs"]
    node.set_fault("page_order")
    assert client.search_page(0, FAR_FUTURE_MS, 0, 10)["docs"] == list(reversed(normal))
    node.set_fault("unreachable")
    with pytest.raises(SourceUnreachable):
        client.inventory_page(0, 10)


def test_load_scenario_is_deterministic(federation):
    again = load_scenario({
        "seed": 11,
        "nodes": [
            {"source_id": "node-a", "initial_n": 120, "script": {"generate": {"steps": 60}}},
            {"source_id": "node-b", "initial_n": 80, "script": {"generate": {"steps": 40}}},
            {"source_id": "node-c", "initial_n": 50, "script": []},
        ],
    })
    assert federation.scripts["node-a"].to_list() == again.scripts["node-a"].to_list()
    assert federation.union() == again.union()
    assert federation.settings["page_size"] == 25
    federation.advance(federation.end_ms)
    again.advance(again.end_ms)
    assert federation.union() == again.union()
