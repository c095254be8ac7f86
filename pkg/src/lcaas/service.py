"""HTTP API: the six ledger functions plus /flush, /stats and /health.

Every response body is ``{"status": "success", ...}`` or
``{"status": "failed", "error": {"code": ..., "message": ...}}``.
"""

from __future__ import annotations

import json
import logging
from typing import Any, Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from .core import Block, LogMeta, NotTerminal, is_hex_digest
from .ledger import DEFAULT_NAMESPACE, Ledger
from .storage import is_namespace
from .verify import MalformedQuery, SearchQuery

log = logging.getLogger(__name__)

NAMESPACE_HEADER = "X-LCaaS-Namespace"


class ApiError(Exception):
    def __init__(self, http_status: int, code: str, message: str):
        super().__init__(message)
        self.http_status = http_status
        self.code = code
        self.message = message


def success(**fields: Any) -> JSONResponse:
    return JSONResponse({"status": "success", **fields})


def failure(http_status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse({"status": "failed", "error": {"code": code, "message": message}},
                        status_code=http_status)


def _int_param(name: str, value: Any) -> Optional[int]:
    if value is None or value == "":
        return None
    if isinstance(value, bool):
        raise ApiError(400, "invalid_meta", f"{name} must be an integer")
    if isinstance(value, int):
        return value
    try:
        return int(str(value), 10)
    except ValueError:
        raise ApiError(400, "invalid_meta", f"{name} must be an integer") from None


def parse_meta(params: dict) -> Optional[LogMeta]:
    file_name = params.get("file_name")
    if file_name is not None and not isinstance(file_name, str):
        raise ApiError(400, "invalid_meta", "file_name must be a string")
    ts_from = _int_param("ts_from", params.get("ts_from"))
    ts_to = _int_param("ts_to", params.get("ts_to"))
    if ts_from is not None and ts_to is not None and ts_from > ts_to:
        raise ApiError(400, "invalid_meta", "ts_from must not exceed ts_to")
    meta = LogMeta(file_name or None, ts_from, ts_to)
    return None if meta.is_empty() else meta


def _namespace(request: Request, body: Optional[dict] = None) -> str:
    ns = None
    if body is not None:
        ns = body.get("namespace")
    ns = ns or request.query_params.get("namespace") or request.headers.get(NAMESPACE_HEADER)
    ns = ns or DEFAULT_NAMESPACE
    if not is_namespace(ns):
        raise ApiError(400, "bad_namespace", "namespace must match [A-Za-z0-9_-]{1,64}")
    return ns


async def _json_body(request: Request) -> dict:
    raw = await request.body()
    if not raw:
        raise ApiError(400, "empty_body", "request body is empty")
    try:
        body = json.loads(raw)
    except ValueError:
        raise ApiError(400, "bad_request", "request body is not valid JSON") from None
    if not isinstance(body, dict):
        raise ApiError(400, "bad_request", "request body must be a JSON object")
    return body


def _digest(body: dict) -> str:
    digest = body.get("digest")
    if not is_hex_digest(digest):
        raise ApiError(400, "malformed_digest", "digest must be 64 lowercase hex characters")
    return digest


async def _raw_content(request: Request) -> tuple[bytes, dict]:
    """Log content and parameters from a raw body or a multipart 'file' upload."""
    params = dict(request.query_params)
    if request.headers.get("content-type", "").startswith("multipart/form-data"):
        form = await request.form()
        upload = form.get("file")
        content = await upload.read() if upload is not None and hasattr(upload, "read") else b""
        params.update({k: v for k, v in form.items() if k != "file" and isinstance(v, str)})
    else:
        content = await request.body()
    if not content:
        raise ApiError(400, "empty_body", "log content is empty")
    return content, params


def create_app(ledger: Ledger) -> FastAPI:
    app = FastAPI(title="LCaaS", docs_url=None, redoc_url=None)
    app.state.ledger = ledger

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return failure(exc.http_status, exc.code, exc.message)

    @app.exception_handler(Exception)
    async def _internal(request: Request, exc: Exception):
        log.exception("request failed")
        return failure(500, "internal", f"{type(exc).__name__}: {exc}")

    @app.post("/submit_raw")
    async def submit_raw(request: Request):
        content, params = await _raw_content(request)
        meta = parse_meta(params)
        ns = params.get("namespace") or request.headers.get(NAMESPACE_HEADER) or DEFAULT_NAMESPACE
        if not is_namespace(ns):
            raise ApiError(400, "bad_namespace", "namespace must match [A-Za-z0-9_-]{1,64}")
        receipt = await run_in_threadpool(ledger.submit_raw, content, meta, ns)
        return success(timestamp=receipt.timestamp, block_index=receipt.block_index,
                       digest=receipt.digest)

    @app.post("/submit_digest")
    async def submit_digest(request: Request):
        body = await _json_body(request)
        digest = _digest(body)
        meta = parse_meta(body)
        ns = _namespace(request, body)
        receipt = await run_in_threadpool(ledger.submit_digest, digest, meta, ns)
        return success(timestamp=receipt.timestamp, block_index=receipt.block_index,
                       digest=receipt.digest)

    @app.post("/verify_raw")
    async def verify_raw(request: Request):
        content, params = await _raw_content(request)
        ns = params.get("namespace") or request.headers.get(NAMESPACE_HEADER) or DEFAULT_NAMESPACE
        if not is_namespace(ns):
            raise ApiError(400, "bad_namespace", "namespace must match [A-Za-z0-9_-]{1,64}")
        locations = ledger.verify_raw(content, ns)
        return success(count=len(locations), locations=[loc.to_json() for loc in locations])

    @app.post("/verify_digest")
    async def verify_digest(request: Request):
        body = await _json_body(request)
        digest = _digest(body)
        locations = ledger.verify_digest(digest, _namespace(request, body))
        return success(count=len(locations), locations=[loc.to_json() for loc in locations])

    @app.post("/verify_tb")
    async def verify_tb(request: Request):
        body = await _json_body(request)
        ns = _namespace(request, body)
        fields = {k: v for k, v in body.items() if k != "namespace"}
        if fields.get("kind") != "terminal":
            raise ApiError(400, "not_terminal", "body must be a terminal block (kind = terminal)")
        try:
            tb = Block.from_json(fields)
            report = ledger.verify_tb(tb, ns)
        except (ValueError, NotTerminal) as exc:
            raise ApiError(400, "not_terminal", str(exc)) from None
        return success(count=int(report.found), **report.to_json())

    @app.post("/search")
    async def search(request: Request):
        body = await _json_body(request)
        ns = _namespace(request, body)
        try:
            query = SearchQuery.from_json({k: v for k, v in body.items() if k != "namespace"})
        except MalformedQuery as exc:
            raise ApiError(400, "bad_query", str(exc)) from None
        hits = ledger.search(query, ns)
        return success(count=len(hits), results=[h.to_json() for h in hits])

    @app.post("/flush")
    async def flush(request: Request):
        raw = await request.body()
        body = json.loads(raw) if raw else {}
        if not isinstance(body, dict):
            raise ApiError(400, "bad_request", "request body must be a JSON object")
        sealed = await run_in_threadpool(ledger.flush, _namespace(request, body))
        return success(sealed=sealed)

    @app.get("/stats")
    async def stats():
        return success(namespaces=ledger.stats(), ledger_valid=ledger.load_valid,
                       forensic=ledger.forensic)

    @app.get("/health")
    async def health():
        failures = sum(len(r.failures) for r in ledger.load_reports.values())
        return success(alive=True, ledger_valid=ledger.load_valid, load_failures=failures)

    return app
