import logging
import os
from pathlib import Path

from flask import Flask, jsonify
from werkzeug.exceptions import HTTPException

from config import LOCAL_ENDPOINT, ServiceConfig, load_config
from extensions import superindex
from modules.errors import SuperIndexError
from modules.harvester import CursorStore, Harvester, HttpSourceClient
from modules.index_core import Index
from modules.shard_cluster import Cluster, HttpReplica, LocalReplica
from routes.replica import replica_bp
from routes.search import search_bp
from routes.sim import sim_bp
from utils.logs import configure_logging

logger = logging.getLogger(__name__)


def replica_dir(data_dir: Path, shard: int, slot: int) -> Path:
    return Path(data_dir) / f"shard-{shard}" / f"replica-{slot}"


def build_cluster(config: ServiceConfig) -> Cluster:
    """Local endpoints get an in-process Index; URLs get an RPC client."""
    c = config.cluster
    groups = []
    for s in range(c.num_shards):
        group = []
        for r in range(c.replication_factor):
            endpoint = c.endpoint(s, r)
            if endpoint == LOCAL_ENDPOINT:
                index = Index(replica_dir(config.data_dir, s, r), snapshot_every=config.snapshot_every_n_commits)
                group.append(LocalReplica(f"local:{s}/{r}", index))
            else:
                group.append(HttpReplica(endpoint))
        groups.append(group)
    return Cluster(groups, c.replication_factor, log_retention=c.log_retention)


def build_harvester(config: ServiceConfig, cluster: Cluster, clients: dict | None = None) -> Harvester:
    if clients is None:
        clients = {s.source_id: HttpSourceClient(s.base_url) for s in config.sources}
    cursors = CursorStore(Path(config.data_dir) / "cursors")
    return Harvester(cluster, cursors, list(config.sources), clients)


def register_error_handlers(app: Flask) -> None:
    @app.errorhandler(SuperIndexError)
    def superindex_error(e):
        if e.status >= 500:
            logger.error("%s: %s", e.code, e)
        return jsonify(e.to_dict()), e.status

    @app.errorhandler(404)
    def not_found(e):
        return jsonify({"error": "not_found"}), 404

    @app.errorhandler(HTTPException)
    def http_error(e):
        return jsonify({"error": e.name.lower().replace(" ", "_"), "message": e.description}), e.code

    @app.after_request
    def add_header(response):
        """Search results move with every commit, so nothing is cacheable."""
        if "Cache-Control" not in response.headers:
            response.headers["Cache-Control"] = "no-store"
        return response


def create_app(cluster: Cluster, harvester: Harvester | None = None, scheduler=None,
               config: ServiceConfig | None = None) -> Flask:
    """Coordinator app: the public search endpoint plus status and admin."""
    app = Flask(__name__)
    superindex.init_app(app, config=config, cluster=cluster, harvester=harvester, scheduler=scheduler)
    app.register_blueprint(search_bp)
    register_error_handlers(app)
    return app


def create_replica_app(replica: LocalReplica) -> Flask:
    app = Flask(__name__)
    superindex.init_app(app, replica=replica)
    app.register_blueprint(replica_bp, url_prefix="/replica")
    register_error_handlers(app)
    return app


def create_sim_app(federation) -> Flask:
    app = Flask(__name__)
    superindex.init_app(app, federation=federation)
    app.register_blueprint(sim_bp)
    register_error_handlers(app)
    return app


if __name__ == "__main__":
    configure_logging()
    config = load_config(os.getenv("SUPERINDEX_CONFIG"))
    cluster = build_cluster(config)
    app = create_app(cluster, build_harvester(config, cluster) if config.sources else None, config=config)
    app.run(host=config.http.host, port=config.http.port)
