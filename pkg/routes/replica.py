from flask import Blueprint, jsonify, request

from extensions import superindex
from modules.errors import QueryError
from modules.index_core import QuerySpec
from modules.metadata_model import to_document
from routes.search import parse_search_request

replica_bp = Blueprint("replica", __name__)


def _body() -> dict:
    body = request.get_json(silent=True)
    return body if isinstance(body, dict) else {}


@replica_bp.route("/apply", methods=["POST"])
def apply():
    body = _body()
    # a bare {"seq", "op", ...} entry is accepted as a batch of one
    entries = body["entries"] if "entries" in body else [body]
    if not all(isinstance(e, dict) and "seq" in e and "op" in e for e in entries):
        raise QueryError("BadParam", "Entries need seq and op")
    return jsonify({"watermark": superindex.replica.apply(entries)})


@replica_bp.route("/commit", methods=["POST"])
def commit():
    return jsonify(superindex.replica.commit())


@replica_bp.route("/search", methods=["GET", "POST"])
def search():
    body = request.get_json(silent=True)
    q = QuerySpec.from_dict(body) if isinstance(body, dict) else parse_search_request(request.args)
    return jsonify(superindex.replica.search(q).to_dict())


@replica_bp.route("/health", methods=["GET"])
def health():
    return jsonify(superindex.replica.health())


@replica_bp.route("/log", methods=["GET"])
def log():
    try:
        from_seq = int(request.args.get("from_seq", 0))
        limit = request.args.get("limit")
        limit = int(limit) if limit is not None else None
    except ValueError:
        raise QueryError("BadParam", "from_seq and limit must be integers") from None
    return jsonify({"entries": superindex.replica.ops_since(from_seq, limit)})


@replica_bp.route("/snapshot", methods=["GET"])
def get_snapshot():
    op_seq, records = superindex.replica.dump(request.args.get("source_node"))
    return jsonify({"seq": op_seq, "docs": [to_document(r) for r in records]})


@replica_bp.route("/snapshot", methods=["POST"])
def install_snapshot():
    body = _body()
    if not isinstance(body.get("seq"), int) or not isinstance(body.get("docs"), list):
        raise QueryError("BadParam", "Snapshot needs an integer seq and a docs list")
    superindex.replica.install_snapshot(body["seq"], body["docs"])
    return jsonify({"watermark": body["seq"]})


@replica_bp.route("/docs", methods=["POST"])
def docs():
    keys = [tuple(k) for k in _body().get("keys", [])]
    found = superindex.replica.get_many(keys)
    return jsonify({"docs": [to_document(found[k]) for k in sorted(found)]})
