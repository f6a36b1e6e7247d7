import json
import os
import sys
from urllib.parse import urlsplit

import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from modules.federation_sim import generate_corpus, load_scenario
from modules.harvester import CursorStore, Harvester, SourceNodeConfig
from modules.shard_cluster import Cluster


class FlaskResponse:
    """The slice of requests.Response the HTTP clients read."""

    def __init__(self, resp):
        self.status_code = resp.status_code
        self.text = resp.get_data(as_text=True)

    @property
    def ok(self) -> bool:
        return self.status_code < 400

    def json(self):
        return json.loads(self.text)


class FlaskSession:
    """
    Stands in for requests.Session: sends each request to a Flask app through
    its test client, ignoring scheme and host.
    """

    def __init__(self, app):
        self.client = app.test_client()
        self.calls = []

    def request(self, method, url, params=None, json=None, timeout=None):
        path = urlsplit(url).path
        self.calls.append((method, path))
        return FlaskResponse(self.client.open(path, method=method, query_string=params, json=json))

    def close(self):
        pass


SMALL_SCENARIO = {
    "seed": 11,
    "page_size": 25,
    "skew_epsilon_ms": 60_000,
    "sync_cycles": 3,
    "nodes": [
        {"source_id": "node-a", "initial_n": 120, "script": {"generate": {"steps": 60}}},
        {"source_id": "node-b", "initial_n": 80, "script": {"generate": {"steps": 40}}},
        {"source_id": "node-c", "initial_n": 50, "script": []},
    ],
}


@pytest.fixture
def corpus():
    return generate_corpus(7, 200, "node-a")


@pytest.fixture
def cluster():
    c = Cluster.local(3, 3)
    yield c
    c.close()


@pytest.fixture
def federation():
    return load_scenario(SMALL_SCENARIO)


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(SMALL_SCENARIO))
    return path


def make_sources(federation, page_size=25, skew_epsilon_ms=60_000):
    return [
        SourceNodeConfig(sid, f"sim://{sid}", page_size=page_size, skew_epsilon_ms=skew_epsilon_ms)
        for sid in sorted(federation.nodes)
    ]


@pytest.fixture
def harvester(cluster, federation, tmp_path):
    return Harvester(cluster, CursorStore(tmp_path / "cursors"), make_sources(federation),
                     federation.clients(), sleep=lambda ms: None)
