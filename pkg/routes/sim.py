import logging

from flask import Blueprint, jsonify, request

from extensions import superindex
from modules.errors import QueryError, SourceUnreachable
from modules.federation_sim import FaultMode, apply_fault, serve_inventory, serve_record, serve_search_page
from modules.harvester import FAR_FUTURE_MS
from utils.timefmt import iso_to_ms

logger = logging.getLogger(__name__)

sim_bp = Blueprint("sim", __name__)


def _int_arg(name: str, default: int) -> int:
    raw = request.args.get(name)
    if raw is None:
        return default
    try:
        value = int(raw)
    except ValueError:
        raise QueryError("BadParam", f"{name} must be an integer") from None
    if value < 0:
        raise QueryError("BadParam", f"{name} must be >= 0")
    return value


def _time_arg(name: str, default: int) -> int:
    raw = request.args.get(name)
    if not raw:
        return default
    try:
        return iso_to_ms(raw)
    except ValueError:
        raise QueryError("BadTimestamp", f"{name} is not an ISO-8601 timestamp") from None


def _serve(node, page: dict):
    try:
        return jsonify(apply_fault(node, page))
    except SourceUnreachable as e:
        return jsonify({"error": "unreachable", "message": str(e)}), 503


@sim_bp.route("/<source_id>/search", methods=["GET"])
def node_search(source_id):
    node = superindex.federation.node(source_id)
    if request.args.get("format", "json") != "json":
        raise QueryError("BadFormat", "Only format=json is supported")
    page = serve_search_page(
        node,
        _time_arg("from", 0),
        _time_arg("to", FAR_FUTURE_MS),
        _int_arg("offset", 0),
        _int_arg("limit", 100),
    )
    return _serve(node, page)


@sim_bp.route("/<source_id>/inventory", methods=["GET"])
def node_inventory(source_id):
    node = superindex.federation.node(source_id)
    return _serve(node, serve_inventory(node, _int_arg("offset", 0), _int_arg("limit", 1000)))


@sim_bp.route("/<source_id>/record", methods=["GET"])
def node_record(source_id):
    node = superindex.federation.node(source_id)
    try:
        apply_fault(node, {})
    except SourceUnreachable as e:
        return jsonify({"error": "unreachable", "message": str(e)}), 503
    doc = serve_record(node, request.args.get("type", ""), request.args.get("id", ""))
    if doc is None:
        return jsonify({"error": "not_found"}), 404
    return jsonify(doc)


@sim_bp.route("/sim/advance", methods=["POST"])
def advance():
    federation = superindex.federation
    body = request.get_json(silent=True) or {}
    to_ms = body.get("to_ms", federation.end_ms)
    if isinstance(to_ms, bool) or not isinstance(to_ms, int):
        raise QueryError("BadParam", "to_ms must be an integer")
    applied = federation.advance(to_ms)
    logger.info("Advanced federation to %d (%d steps applied)", to_ms, applied)
    return jsonify({"to_ms": to_ms, "applied": applied})


@sim_bp.route("/sim/fault", methods=["POST"])
def fault():
    body = request.get_json(silent=True) or {}
    node = superindex.federation.node(body.get("source_id", ""))
    try:
        mode = FaultMode(body.get("mode", "none"))
    except ValueError:
        raise QueryError("BadParam", f"Unknown fault mode {body.get('mode')!r}") from None
    node.set_fault(mode, int(body.get("latency_ms", 0)))
    return jsonify({"source_id": node.source_id, "mode": mode.value, "latency_ms": node.latency_ms})


@sim_bp.route("/sim/nodes", methods=["GET"])
def nodes():
    federation = superindex.federation
    out = []
    for sid in sorted(federation.nodes):
        node = federation.nodes[sid]
        with node.lock:
            out.append({
                "source_id": sid,
                "docs": len(node.store),
                "sim_clock_ms": node.sim_clock_ms,
                "fault": node.fault.value,
                "script_pos": node.script_pos,
                "script_len": len(federation.scripts[sid].steps),
            })
    return jsonify({"seed": federation.seed, "nodes": out})
