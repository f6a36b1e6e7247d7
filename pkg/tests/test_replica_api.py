import pytest

from main import create_replica_app
from modules.errors import LogTruncated
from modules.index_core import Index, QuerySpec
from modules.metadata_model import to_document, to_json
from modules.shard_cluster import Cluster, HttpReplica, LocalReplica, ReplicaState, WriteOp
from tests.conftest import FlaskSession


def http_group(n, history=10_000):
    """`n` HTTP replicas, each backed by its own in-process replica app."""
    backends, handles = [], []
    for i in range(n):
        backend = LocalReplica(f"backend-{i}", Index(history=history))
        backends.append(backend)
        handles.append(HttpReplica(f"http://replica-{i}", session=FlaskSession(create_replica_app(backend))))
    return backends, handles


def test_rpc_round_trip(corpus):
    backends, handles = http_group(1)
    replica = handles[0]
    entries = [{"seq": i + 1, "op": "upsert", "doc": to_document(r)} for i, r in enumerate(corpus[:20])]
    assert replica.apply(entries) == 20
    assert replica.commit()["op_seq"] == 20
    assert replica.health() == {"state": "Live", "watermark": 20}
    assert [e["seq"] for e in replica.ops_since(15)] == [16, 17, 18, 19, 20]

    r = corpus[3]
    assert replica.get_many([r.key]) == {r.key: r}
    op_seq, docs = replica.dump(r.source_node)
    assert op_seq == 20 and len(docs) == 20

    result = replica.search(QuerySpec(record_type=r.record_type, limit=100))
    assert result.num_found == backends[0].search(QuerySpec(record_type=r.record_type)).num_found


def test_single_entry_apply_and_query_params(corpus):
    backends, handles = http_group(1)
    client = handles[0].session.client
    resp = client.post("/replica/apply", json={"seq": 1, "op": "upsert", "doc": to_document(corpus[0])})
    assert resp.get_json() == {"watermark": 1}
    client.post("/replica/commit")
    resp = client.get(f"/replica/search?type={corpus[0].record_type.value}")
    assert resp.get_json()["numFound"] == 1


def test_truncated_history_maps_to_log_truncated(corpus):
    _, handles = http_group(1, history=3)
    replica = handles[0]
    replica.apply([{"seq": i + 1, "op": "upsert", "doc": to_document(r)} for i, r in enumerate(corpus[:10])])
    with pytest.raises(LogTruncated):
        replica.ops_since(0)


def test_cluster_over_http_recovers_wiped_replica(corpus):
    backends, handles = http_group(3, history=5)
    cluster = Cluster([handles], log_retention=5)
    cluster.apply_writes([WriteOp.upsert(r) for r in corpus[:30]])
    backends[1].kill(wipe=True)
    cluster.apply_writes([WriteOp.upsert(r) for r in corpus[30:80]])
    cluster.commit()
    assert cluster.shards[0].states[handles[1].endpoint] is ReplicaState.DOWN

    backends[1].revive()
    cluster.check_health()
    assert cluster.shards[0].states[handles[1].endpoint] is ReplicaState.LIVE
    dumps = {}
    for b in backends:
        b.commit()
        op_seq, records = b.dump()
        dumps[b.endpoint] = (op_seq, [to_json(r) for r in records])
    assert len(set(map(repr, dumps.values()))) == 1
    assert cluster.scatter_gather(QuerySpec(limit=0)).num_found == \
        backends[0].search(QuerySpec(limit=0)).num_found
