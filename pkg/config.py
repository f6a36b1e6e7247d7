import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from dotenv import load_dotenv

from modules.errors import ConfigError
from modules.harvester import SourceNodeConfig

load_dotenv()  # Load .env variables

CONFIG_ENV = "SUPERINDEX_CONFIG"
LOCAL_ENDPOINT = "local"


@dataclass(frozen=True)
class ClusterConfig:
    num_shards: int = 3
    replication_factor: int = 3
    endpoints: tuple = ()
    log_retention: int = 100_000
    health_interval_ms: int = 5_000

    def endpoint(self, shard: int, slot: int) -> str:
        return self.endpoints[shard * self.replication_factor + slot]


@dataclass(frozen=True)
class HttpConfig:
    host: str = "127.0.0.1"
    port: int = 8080


@dataclass(frozen=True)
class ServiceConfig:
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    sources: tuple = ()
    http: HttpConfig = field(default_factory=HttpConfig)
    data_dir: Path = Path("data")
    reconcile_every_n_cycles: int = 10
    snapshot_every_n_commits: int = 50

    def source(self, source_id: str) -> SourceNodeConfig | None:
        return next((s for s in self.sources if s.source_id == source_id), None)


def _positive_int(value, code: str, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(code, f"{name} must be an integer >= {minimum}, got {value!r}")
    return value


def init_data_dir(path) -> Path:
    """Create data_dir if needed and prove it is writable."""
    data_dir = Path(path)
    try:
        data_dir.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=data_dir, prefix=".writable-"):
            pass
    except OSError as e:
        raise ConfigError("E_DATA_DIR", f"data_dir {data_dir} is not writable: {e}") from None
    return data_dir


def parse_config(data, check_data_dir: bool = True) -> ServiceConfig:
    if not isinstance(data, dict):
        raise ConfigError("E_CONFIG_JSON", "Config must be a JSON object")

    c = data.get("cluster", {})
    if not isinstance(c, dict):
        raise ConfigError("E_CONFIG_JSON", "cluster must be an object")
    num_shards = _positive_int(c.get("num_shards", 3), "E_SHARDS", "num_shards")
    replication = _positive_int(c.get("replication_factor", 3), "E_REPLICATION", "replication_factor")
    endpoints = c.get("endpoints")
    if endpoints is None:
        endpoints = [LOCAL_ENDPOINT] * (num_shards * replication)
    if not isinstance(endpoints, list) or len(endpoints) != num_shards * replication:
        count = len(endpoints) if isinstance(endpoints, list) else endpoints
        raise ConfigError(
            "E_ENDPOINT_COUNT",
            f"Need num_shards x replication_factor = {num_shards * replication} endpoints, got {count}",
        )
    for ep in endpoints:
        if ep != LOCAL_ENDPOINT and not (isinstance(ep, str) and ep.startswith(("http://", "https://"))):
            raise ConfigError("E_ENDPOINT", f"Endpoint must be 'local' or an http(s) URL: {ep!r}")
    cluster = ClusterConfig(
        num_shards=num_shards,
        replication_factor=replication,
        endpoints=tuple(endpoints),
        log_retention=_positive_int(c.get("log_retention", 100_000), "E_CLUSTER", "log_retention"),
        health_interval_ms=_positive_int(c.get("health_interval_ms", 5_000), "E_CLUSTER", "health_interval_ms"),
    )

    raw_sources = data.get("sources", [])
    if not isinstance(raw_sources, list):
        raise ConfigError("E_SOURCE", "sources must be a list")
    sources = tuple(SourceNodeConfig.from_dict(s) for s in raw_sources)
    seen = set()
    for s in sources:
        if s.source_id in seen:
            raise ConfigError("E_SOURCE_DUPLICATE", f"Duplicate source_id {s.source_id!r}")
        seen.add(s.source_id)

    h = data.get("http", {})
    if not isinstance(h, dict):
        raise ConfigError("E_HTTP", "http must be an object")
    port = h.get("port", 8080)
    if isinstance(port, bool) or not isinstance(port, int) or not 0 <= port <= 65535:
        raise ConfigError("E_HTTP", f"port must be in 0..65535, got {port!r}")
    http = HttpConfig(host=str(h.get("host", "127.0.0.1")), port=port)

    reconcile_every = _positive_int(data.get("reconcile_every_n_cycles", 10),
                                    "E_RECONCILE_EVERY", "reconcile_every_n_cycles")
    snapshot_every = _positive_int(data.get("snapshot_every_n_commits", 50),
                                   "E_SNAPSHOT_EVERY", "snapshot_every_n_commits", minimum=0)

    data_dir = Path(data.get("data_dir", "data"))
    if check_data_dir:
        data_dir = init_data_dir(data_dir)

    return ServiceConfig(
        cluster=cluster,
        sources=sources,
        http=http,
        data_dir=data_dir,
        reconcile_every_n_cycles=reconcile_every,
        snapshot_every_n_commits=snapshot_every,
    )


def config_path(cli_path: str | None = None) -> str:
    """SUPERINDEX_CONFIG wins over --config."""
    path = os.getenv(CONFIG_ENV) or cli_path
    if not path:
        raise ConfigError("E_CONFIG_MISSING", f"No config given (--config or {CONFIG_ENV})")
    return path


def load_config(cli_path: str | None = None, check_data_dir: bool = True) -> ServiceConfig:
    path = config_path(cli_path)
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError("E_CONFIG_MISSING", f"Config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("E_CONFIG_JSON", f"{path} is not valid JSON: {e}") from None
    return parse_config(data, check_data_dir=check_data_dir)
