import json
import os
import sys
import tempfile
from pathlib import Path

# Add parent directory to path to import the app modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from main import create_app
from modules.federation_sim import load_scenario
from modules.harvester import CursorStore, Harvester, SourceNodeConfig
from modules.metadata_model import RecordType
from modules.shard_cluster import Cluster, route

ROOT = Path(__file__).resolve().parent.parent
SCENARIO = ROOT / "scenarios" / "golden.json"
WIRE_SCENARIO = ROOT / "scenarios" / "wire.json"
GOLDEN_DIR = ROOT / "tests" / "golden"

QUERIES = [
    "",
    "?facets=project,institute",
    "?type=Aggregation&facets=variable",
    "?type=File",
    "?q=temperature&limit=1",
    "?variable=tas&offset=1&limit=1",
    "?from=2018-07-01T00:00:00Z&fields=project",
    "?project=CMIP5&facets=institute&q=monthly",
]

ROUTE_SOURCES = ("llnl", "dkrz", "ceda")


def build_responses(workdir, scenario=WIRE_SCENARIO, queries=QUERIES) -> dict:
    """
    Harvest a scenario step by step, syncing every source after each script
    step, reconcile, and record the raw /search response bodies.
    """
    federation = load_scenario(scenario)
    settings = federation.settings
    sources = [SourceNodeConfig(sid, f"sim://{sid}", page_size=settings.get("page_size", 100),
                                skew_epsilon_ms=settings.get("skew_epsilon_ms", 60_000))
               for sid in sorted(federation.nodes)]
    cluster = Cluster.local(3, 3)
    try:
        harvester = Harvester(cluster, CursorStore(Path(workdir) / "cursors"), sources,
                              federation.clients(), sleep=lambda ms: None)
        for src in sources:
            harvester.full_harvest(src.source_id)
        for at_ms in sorted({s.at_ms for script in federation.scripts.values() for s in script.steps}):
            federation.advance(at_ms)
            for src in sources:
                harvester.incremental_sync(src.source_id)
        for src in sources:
            harvester.reconcile(src.source_id)
        client = create_app(cluster, harvester).test_client()
        return {qs: client.get(f"/search{qs}").get_data(as_text=True) for qs in queries}
    finally:
        cluster.close()


def route_ids() -> list:
    types = list(RecordType)
    return [(types[k % 3].value, f"{ROUTE_SOURCES[(k // 3) % 3]}-{k}") for k in range(1000)]


def route_table() -> dict:
    return {f"{t}/{i}": route(t, i, 3) for t, i in route_ids()}


def main():
    GOLDEN_DIR.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as workdir:
        responses = build_responses(workdir)
    (GOLDEN_DIR / "search_responses.json").write_text(json.dumps(responses, indent=1, sort_keys=True) + "\n")
    (GOLDEN_DIR / "route_table.json").write_text(json.dumps(route_table(), indent=1, sort_keys=True) + "\n")
    print(f"Wrote {len(responses)} responses to {GOLDEN_DIR}")


if __name__ == "__main__":
    main()
