import logging

from flask import Blueprint, Response, jsonify, request

from extensions import superindex
from modules.errors import QueryError, SuperIndexError, UnknownRecordType
from modules.index_core import QuerySpec
from modules.metadata_model import RecordType, to_document
from utils.jsonio import dumps_stable
from utils.timefmt import iso_to_ms

logger = logging.getLogger(__name__)

search_bp = Blueprint("search", __name__)

RESERVED_PARAMS = frozenset({"q", "type", "facets", "fields", "offset", "limit", "from", "to", "format"})
HEADER_KEYS = ("type", "id", "version", "source_node", "_timestamp")


def _getlist(params, name: str) -> list:
    if hasattr(params, "getlist"):
        return params.getlist(name)
    value = params.get(name)
    if value is None:
        return []
    return list(value) if isinstance(value, (list, tuple)) else [value]


def _first(params, name: str):
    values = _getlist(params, name)
    return values[0] if values else None


def _int_param(params, name: str, default: int, code: str) -> int:
    raw = _first(params, name)
    if raw is None or raw == "":
        return default
    if isinstance(raw, bool):
        raise QueryError(code, f"{name} must be an integer")
    try:
        value = int(raw)
    except (TypeError, ValueError):
        raise QueryError(code, f"{name} must be an integer, got {raw!r}") from None
    if value < 0:
        raise QueryError(code, f"{name} must be >= 0")
    return value


def _time_param(params, name: str) -> int | None:
    raw = _first(params, name)
    if raw is None or raw == "":
        return None
    try:
        return iso_to_ms(str(raw))
    except ValueError:
        raise QueryError("BadTimestamp", f"{name} is not an ISO-8601 timestamp: {raw!r}") from None


def _csv(params, name: str) -> tuple:
    out = []
    for raw in _getlist(params, name):
        out.extend(part.strip() for part in str(raw).split(",") if part.strip())
    return tuple(out)


def parse_search_request(params) -> QuerySpec:
    """
    Map query parameters (a werkzeug MultiDict or a plain dict from a JSON
    body) onto a QuerySpec. Any non-reserved parameter is a field filter and
    may repeat.
    """
    fmt = _first(params, "format")
    if fmt is not None and fmt != "json":
        raise QueryError("BadFormat", f"Only format=json is supported, got {fmt!r}")

    raw_type = _first(params, "type")
    try:
        record_type = RecordType.parse(raw_type) if raw_type else RecordType.DATASET
    except UnknownRecordType:
        raise QueryError("BadType", f"Unknown record type {raw_type!r}") from None

    filters = []
    for name in params.keys():
        if name in RESERVED_PARAMS:
            continue
        filters.extend((name, str(v)) for v in _getlist(params, name))

    return QuerySpec(
        query_text=str(_first(params, "q") or ""),
        filters=tuple(filters),
        record_type=record_type,
        facet_fields=_csv(params, "facets"),
        from_ms=_time_param(params, "from"),
        to_ms=_time_param(params, "to"),
        offset=_int_param(params, "offset", 0, "BadOffset"),
        limit=_int_param(params, "limit", 10, "BadLimit"),
    )


def project(doc: dict, fields: tuple) -> dict:
    """Keep the record header plus only the named fields."""
    if not fields:
        return doc
    return {k: v for k, v in doc.items() if k in HEADER_KEYS or k in fields}


def stable_json(payload: dict, status: int = 200) -> Response:
    return Response(dumps_stable(payload), status=status, mimetype="application/json")


def handle_search(params) -> Response:
    q = parse_search_request(params)
    fields = _csv(params, "fields")
    result = superindex.cluster.scatter_gather(q)
    return stable_json({
        "numFound": result.num_found,
        "offset": q.offset,
        "docs": [project(to_document(d), fields) for d in result.docs],
        "facet_counts": result.facet_counts,
    })


@search_bp.route("/search", methods=["GET", "POST"])
def search():
    if request.method == "POST" and request.is_json:
        body = request.get_json(silent=True)
        if not isinstance(body, dict):
            raise QueryError("BadParam", "Search body must be a JSON object")
        return handle_search(body)
    if request.method == "POST":
        return handle_search(request.form)
    return handle_search(request.args)


def status_payload() -> dict:
    cluster = superindex.cluster
    harvester = superindex.harvester
    try:
        doc_counts = cluster.doc_counts()
    except SuperIndexError as e:
        doc_counts = {"error": e.code}
    payload = {
        "cluster": cluster.state().to_dict(),
        "doc_counts": doc_counts,
        "sources": {},
        "flagged_sources": [],
    }
    if harvester is not None:
        payload["sources"] = harvester.status()
        payload["flagged_sources"] = [
            sid for sid, cursor in payload["sources"].items() if cursor and cursor["flagged"]
        ]
    if superindex.scheduler is not None:
        payload["scheduler"] = superindex.scheduler.status()
    return payload


@search_bp.route("/status", methods=["GET"])
def handle_status():
    return stable_json(status_payload())


def _source_id_from_body() -> str:
    body = request.get_json(silent=True) or {}
    source_id = body.get("source_id")
    if not isinstance(source_id, str) or not source_id:
        raise QueryError("BadParam", "source_id is required")
    return source_id


@search_bp.route("/admin/harvest", methods=["POST"])
def admin_harvest():
    body = request.get_json(silent=True) or {}
    source_id = _source_id_from_body()
    full = bool(body.get("full", False))
    if superindex.harvester is None:
        raise QueryError("BadParam", "No sources are configured")
    logger.info("Harvest of %s requested (full=%s)", source_id, full)
    stats = superindex.harvester.harvest(source_id, full=full)
    return jsonify({"source_id": source_id, "full": full, "stats": stats.to_dict()})


@search_bp.route("/admin/reconcile", methods=["POST"])
def admin_reconcile():
    source_id = _source_id_from_body()
    if superindex.harvester is None:
        raise QueryError("BadParam", "No sources are configured")
    logger.info("Reconcile of %s requested", source_id)
    stats = superindex.harvester.reconcile(source_id)
    return jsonify({"source_id": source_id, "stats": stats.to_dict()})


@search_bp.route("/healthz", methods=["GET"])
def healthz():
    return Response("ok", mimetype="text/plain")
