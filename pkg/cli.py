"""
Operator entry point. One program, several roles:

    serve     coordinator with its local replicas, harvester and health checks
    replica   a single replica behind the replica RPC
    harvest   ask a running coordinator to harvest one source
    status    print a running coordinator's status
    simulate  serve a scenario's simulated source nodes over HTTP
    check     end-to-end convergence check against a scenario, in process

Exit codes: 0 success, 1 operational error, 2 usage error.
"""

import argparse
import json
import logging
import sys
import tempfile
import threading
from pathlib import Path
from urllib.parse import urlsplit

import requests
import waitress

from config import LOCAL_ENDPOINT, init_data_dir, load_config
from main import build_cluster, build_harvester, create_app, create_replica_app, create_sim_app, replica_dir
from modules.errors import SuperIndexError
from modules.federation_sim import load_scenario
from modules.harvester import CursorStore, Harvester, SourceNodeConfig
from modules.index_core import Index
from modules.metadata_model import is_newer, to_json
from modules.scheduler import Scheduler
from modules.shard_cluster import Cluster, LocalReplica, route
from utils.clock import SystemClock
from utils.logs import configure_logging

logger = logging.getLogger(__name__)

DEFAULT_URL = "http://127.0.0.1:8080"


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="superindex", description="Federated metadata super-index")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default: $LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("serve", help="Run the coordinator")
    p.add_argument("--config", help="Config file (overridden by $SUPERINDEX_CONFIG)")

    p = sub.add_parser("replica", help="Run one shard replica")
    p.add_argument("--config")
    p.add_argument("--shard", type=int, required=True)
    p.add_argument("--slot", type=int, required=True)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)

    p = sub.add_parser("harvest", help="Trigger a harvest on a running coordinator")
    p.add_argument("--source", required=True)
    p.add_argument("--full", action="store_true")
    p.add_argument("--url", default=None)
    p.add_argument("--config")

    p = sub.add_parser("status", help="Print a running coordinator's status")
    p.add_argument("--url", default=None)
    p.add_argument("--config")

    p = sub.add_parser("simulate", help="Serve simulated source nodes")
    p.add_argument("--scenario", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=9000)

    p = sub.add_parser("check", help="Harvest a scenario in process and verify convergence")
    p.add_argument("--scenario", required=True)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--shards", type=int, default=3)
    p.add_argument("--replicas", type=int, default=3)
    return parser


# --- serve / replica / simulate ---

def _health_loop(cluster: Cluster, interval_ms: int, stop_event: threading.Event) -> None:
    while not stop_event.wait(interval_ms / 1000):
        try:
            cluster.check_health()
        except Exception:
            logger.exception("Health check failed")


def cmd_serve(args) -> int:
    config = load_config(args.config)
    cluster = build_cluster(config)
    harvester = build_harvester(config, cluster) if config.sources else None
    scheduler = None
    stop_event = threading.Event()
    threads = [threading.Thread(target=_health_loop, name="health",
                                args=(cluster, config.cluster.health_interval_ms, stop_event), daemon=True)]
    if harvester is not None:
        scheduler = Scheduler(harvester, list(config.sources), SystemClock(), config.reconcile_every_n_cycles)
        threads.append(threading.Thread(target=scheduler.run, name="scheduler", args=(stop_event,), daemon=True))
    app = create_app(cluster, harvester, scheduler, config)
    for t in threads:
        t.start()
    logger.info("Serving %d shards x %d replicas on %s:%d",
                config.cluster.num_shards, config.cluster.replication_factor, config.http.host, config.http.port)
    try:
        waitress.serve(app, host=config.http.host, port=config.http.port)
    finally:
        stop_event.set()
        for t in threads:
            t.join(timeout=5)
        if scheduler is not None:
            scheduler.close()
        cluster.close()
    return 0


def cmd_replica(args) -> int:
    config = load_config(args.config)
    c = config.cluster
    if not (0 <= args.shard < c.num_shards and 0 <= args.slot < c.replication_factor):
        raise UsageError(f"--shard must be < {c.num_shards} and --slot < {c.replication_factor}")
    endpoint = c.endpoint(args.shard, args.slot)
    host, port = args.host, args.port
    if endpoint != LOCAL_ENDPOINT:
        parts = urlsplit(endpoint)
        host = host or parts.hostname
        port = port or parts.port
    host = host or "127.0.0.1"
    if port is None:
        raise UsageError("--port is required for a replica without an http endpoint")
    index = Index(replica_dir(config.data_dir, args.shard, args.slot),
                  snapshot_every=config.snapshot_every_n_commits)
    replica = LocalReplica(endpoint, index)
    logger.info("Replica %d/%d serving on %s:%d", args.shard, args.slot, host, port)
    try:
        waitress.serve(create_replica_app(replica), host=host, port=port)
    finally:
        replica.close()
    return 0


def cmd_simulate(args) -> int:
    federation = load_scenario(args.scenario)
    logger.info("Simulating %d source nodes on %s:%d", len(federation.nodes), args.host, args.port)
    waitress.serve(create_sim_app(federation), host=args.host, port=args.port)
    return 0


# --- harvest / status (HTTP clients of a running coordinator) ---

def _coordinator_url(args) -> str:
    if args.url:
        return args.url.rstrip("/")
    if args.config:
        http = load_config(args.config, check_data_dir=False).http
        return f"http://{http.host}:{http.port}"
    return DEFAULT_URL


def _print_response(resp: requests.Response) -> int:
    try:
        print(json.dumps(resp.json(), indent=2, sort_keys=True))
    except ValueError:
        print(resp.text)
    return 0 if resp.ok else 1


def cmd_harvest(args) -> int:
    url = _coordinator_url(args)
    resp = requests.post(f"{url}/admin/harvest", json={"source_id": args.source, "full": args.full}, timeout=3600)
    return _print_response(resp)


def cmd_status(args) -> int:
    resp = requests.get(f"{_coordinator_url(args)}/status", timeout=30)
    return _print_response(resp)


# --- check ---

def expected_partitions(federation, num_shards: int) -> dict:
    """Union of every node's records under the newest-wins rule, split by shard."""
    union = {}
    for sid in sorted(federation.nodes):
        for key, r in federation.nodes[sid].store.items():
            if key not in union or is_newer(r, union[key]):
                union[key] = r
    parts = {s: {} for s in range(num_shards)}
    for key, r in union.items():
        parts[route(key[0], key[1], num_shards)][key] = to_json(r)
    return parts


def compare_replicas(cluster: Cluster, expected: dict) -> list:
    """Every divergence between a replica's committed state and its shard's expected records."""
    problems = []
    dumps = cluster.replica_dumps()
    for shard in cluster.shards:
        want = expected[shard.index]
        for r in shard.replicas:
            if (shard.index, r.endpoint) not in dumps:
                problems.append(f"shard {shard.index} replica {r.endpoint}: unreachable")
                continue
            _, records = dumps[(shard.index, r.endpoint)]
            have = {rec.key: to_json(rec) for rec in records}
            missing = sorted(set(want) - set(have))
            extra = sorted(set(have) - set(want))
            differ = sorted(k for k in set(want) & set(have) if want[k] != have[k])
            for label, keys in (("missing", missing), ("unexpected", extra), ("differs", differ)):
                if keys:
                    problems.append(f"shard {shard.index} replica {r.endpoint}: {len(keys)} {label}, "
                                    f"first {keys[0][0]}/{keys[0][1]}")
    return problems


def run_check(scenario, data_dir=None, num_shards: int = 3, replication_factor: int = 3) -> list:
    """
    Full harvest of every simulated node, then walk the scenario timeline in
    `sync_cycles` steps syncing after each, reconcile, and compare every
    replica against the union of the sources. Returns the divergences.
    """
    federation = load_scenario(scenario)
    settings = federation.settings
    cycles = max(1, int(settings.get("sync_cycles", 4)))
    sources = [
        SourceNodeConfig(
            source_id=sid,
            base_url=f"sim://{sid}",
            page_size=int(settings.get("page_size", 100)),
            skew_epsilon_ms=int(settings.get("skew_epsilon_ms", 60_000)),
        )
        for sid in sorted(federation.nodes)
    ]

    with tempfile.TemporaryDirectory(prefix="superindex-check-") as scratch:
        root = init_data_dir(data_dir) if data_dir is not None else Path(scratch)
        cluster = Cluster.local(num_shards, replication_factor, data_dir=root)
        try:
            harvester = Harvester(cluster, CursorStore(root / "cursors"), sources, federation.clients(),
                                  sleep=lambda ms: None)
            for src in sources:
                harvester.full_harvest(src.source_id, reset=True)

            start_ms = max((n.sim_clock_ms for n in federation.nodes.values()), default=0)
            end_ms = max(start_ms, federation.end_ms)
            for i in range(1, cycles + 1):
                federation.advance(start_ms + (end_ms - start_ms) * i // cycles)
                for src in sources:
                    harvester.incremental_sync(src.source_id)
            for src in sources:
                harvester.reconcile(src.source_id)

            problems = compare_replicas(cluster, expected_partitions(federation, num_shards))
        finally:
            cluster.close()
    return problems


def cmd_check(args) -> int:
    if args.shards < 1 or args.replicas < 1:
        raise UsageError("--shards and --replicas must be >= 1")
    problems = run_check(args.scenario, args.data_dir, args.shards, args.replicas)
    for p in problems:
        print(p)
    if problems:
        print(f"FAIL: {len(problems)} divergences", file=sys.stderr)
        return 1
    print("OK: every replica matches the union of the sources")
    return 0


COMMANDS = {
    "serve": cmd_serve,
    "replica": cmd_replica,
    "harvest": cmd_harvest,
    "status": cmd_status,
    "simulate": cmd_simulate,
    "check": cmd_check,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SuperIndexError as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
        return 1
    except (OSError, requests.RequestException) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(cli_main())
