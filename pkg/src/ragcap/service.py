"""HTTP retrieval service over immutable memory snapshots.

Readers take one reference to the current snapshot per request and never see
anything else; ``/v1/expand`` builds a complete new snapshot off to the side
and publishes it with a single attribute assignment. At most one expansion
runs at a time; a concurrent one is refused with 409.
"""
from __future__ import annotations

import json
import logging
import re
import threading
from collections import Counter
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import memory as memlib
from .errors import (
    DimensionMismatch,
    EmptyMemory,
    InvalidRecord,
    NonFiniteValue,
    RagcapError,
    ZeroKey,
    ZeroVector,
)
from .memory import MemoryRecord, VisualNameMemory
from .retrieval import retrieve_names

log = logging.getLogger(__name__)

N_QUERY_ROWS = 32
MAX_BODY = 64 * 1024 * 1024


class BadRequest(Exception):
    def __init__(self, reason: str, detail: str, status: int = 400):
        super().__init__(detail)
        self.reason = reason
        self.detail = detail
        self.status = status


def _reason(exc: Exception) -> str:
    return re.sub(r"(?<!^)(?=[A-Z])", "_", type(exc).__name__).lower()


class ServiceState:
    def __init__(self, mem: VisualNameMemory, k: int = 10):
        mem.fingerprint  # computed before the snapshot becomes visible
        self._snapshot = mem
        self.k = k
        self._expand_lock = threading.Lock()
        self._count_lock = threading.Lock()
        self.counters: Counter = Counter()

    @property
    def snapshot(self) -> VisualNameMemory:
        return self._snapshot

    def bump(self, name: str) -> None:
        with self._count_lock:
            self.counters[name] += 1

    def expand(self, records) -> VisualNameMemory:
        if not self._expand_lock.acquire(blocking=False):
            raise BadRequest("expansion_in_progress", "another expansion is running", 409)
        try:
            new = memlib.expand(self._snapshot, records)
            new.fingerprint
            self._snapshot = new
            return new
        finally:
            self._expand_lock.release()


def parse_retrieve(body: dict, mem: VisualNameMemory, default_k: int):
    """Validate a /v1/retrieve body; returns (query block, k)."""
    if not isinstance(body, dict):
        raise BadRequest("invalid_body", "request body must be a JSON object")
    has_f, has_k = "features" in body, "key" in body
    if has_f == has_k:
        raise BadRequest("invalid_query", "provide exactly one of 'features' or 'key'")
    k = body.get("k", default_k)
    if isinstance(k, bool) or not isinstance(k, int) or k < 0:
        raise BadRequest("invalid_k", "'k' must be a non-negative integer")
    try:
        q = np.asarray(body["features"] if has_f else [body["key"]], dtype=np.float64)
    except (TypeError, ValueError):
        raise BadRequest("invalid_vector", "vectors must be arrays of numbers") from None
    if q.ndim != 2:
        raise BadRequest("shape_mismatch", f"query must be a list of equal-width rows, got shape {q.shape}")
    if has_f and q.shape[0] != N_QUERY_ROWS:
        raise BadRequest("shape_mismatch", f"'features' must have {N_QUERY_ROWS} rows, got {q.shape[0]}")
    if q.shape[1] != mem.dim:
        raise BadRequest("dimension_mismatch", f"row width {q.shape[1]} != memory dim {mem.dim}")
    if not np.all(np.isfinite(q)):
        raise BadRequest("non_finite", "query contains NaN or Inf")
    return q, k


class Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "ragcap/0.1"
    # headers and body go out as separate writes; without this, delayed ACKs add ~40 ms per reply
    disable_nagle_algorithm = True

    @property
    def state(self) -> ServiceState:
        return self.server.state

    def log_message(self, fmt, *args):
        log.debug("%s - " + fmt, self.address_string(), *args)

    def _send(self, status: int, payload, mem: VisualNameMemory | None = None):
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        if mem is not None:
            self.send_header("X-Snapshot-Fingerprint", mem.fingerprint)
            self.send_header("X-Snapshot-Count", str(len(mem)))
        self.end_headers()
        self.wfile.write(data)

    def _error(self, err: BadRequest):
        self._send(err.status, {"error": err.reason, "detail": err.detail})

    def _body(self):
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY:
            raise BadRequest("body_too_large", f"body exceeds {MAX_BODY} bytes", 413)
        raw = self.rfile.read(length)
        try:
            return json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise BadRequest("invalid_json", str(exc)) from None

    def do_GET(self):
        if self.path != "/v1/stats":
            return self._error(BadRequest("not_found", f"no route for GET {self.path}", 404))
        mem = self.state.snapshot
        self.state.bump("stats")
        out = mem.stats().as_dict()
        out["fingerprint"] = mem.fingerprint
        self._send(200, out, mem)

    def do_POST(self):
        try:
            if self.path == "/v1/retrieve":
                body = self._body()
                mem = self.state.snapshot
                q, k = parse_retrieve(body, mem, self.state.k)
                try:
                    result = retrieve_names(q, mem, k)
                except ZeroVector as exc:
                    raise BadRequest("zero_vector", str(exc)) from None
                except EmptyMemory as exc:
                    raise BadRequest("empty_memory", str(exc), 409) from None
                self.state.bump("retrieve")
                self._send(200, result.as_json(), mem)
            elif self.path == "/v1/expand":
                body = self._body()
                if not isinstance(body, list):
                    raise BadRequest("invalid_body", "expand body must be a JSON array of records")
                try:
                    records = [MemoryRecord.from_json(r) for r in body]
                    new = self.state.expand(records)
                except (InvalidRecord, DimensionMismatch, NonFiniteValue, ZeroKey) as exc:
                    raise BadRequest(_reason(exc), str(exc)) from None
                self.state.bump("expand")
                self._send(200, {"count": len(new), "added": len(records), "fingerprint": new.fingerprint}, new)
            else:
                raise BadRequest("not_found", f"no route for POST {self.path}", 404)
        except BadRequest as err:
            self._error(err)
        except RagcapError as exc:
            self._error(BadRequest(_reason(exc), str(exc)))


def make_server(state: ServiceState, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), Handler)
    server.daemon_threads = True
    server.state = state
    return server


def serve(mem: VisualNameMemory, port: int, host: str = "127.0.0.1", k: int = 10) -> None:
    server = make_server(ServiceState(mem, k), host, port)
    log.info("serving %d entries on %s:%d", len(mem), *server.server_address[:2])
    try:
        server.serve_forever()
    finally:
        server.server_close()
