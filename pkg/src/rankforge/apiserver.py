"""HTTP API over the live loop: state snapshots, gate actions, controls, and
a server-push event stream (text/event-stream with a long-poll fallback).

Handlers only read published snapshots and enqueue control messages; they
never touch loop state directly.  Loopback clients need no auth; setting
RANKFORGE_API_TOKEN enforces bearer auth for non-loopback clients.
"""

from __future__ import annotations

import ipaddress
import json
import os
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .memstore import MemoryStore
from .orchestrator import LoopControl

DEFAULT_PORT = 7340
TOKEN_ENV = "RANKFORGE_API_TOKEN"

_GATE_RE = re.compile(r"^/api/gate/([^/]+)/(approve|reject)$")


class ApiContext:
    def __init__(self, control: LoopControl, store: MemoryStore,
                 static_dir: str | None = None):
        self.control = control
        self.store = store
        self.static_dir = static_dir


def _is_loopback(addr: str) -> bool:
    try:
        return ipaddress.ip_address(addr).is_loopback
    except ValueError:
        return False


class _Handler(BaseHTTPRequestHandler):
    ctx: ApiContext = None  # set by make_server
    protocol_version = "HTTP/1.1"

    # -- plumbing ----------------------------------------------------------

    def log_message(self, *args):
        pass

    def _json(self, status: int, payload):
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, message: str, field: str | None = None):
        payload = {"error": message}
        if field:
            payload["field"] = field
        self._json(status, payload)

    def _read_body(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        try:
            parsed = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ValueError(f"body is not valid JSON: {exc}") from exc
        if not isinstance(parsed, dict):
            raise ValueError("body must be a JSON object")
        return parsed

    def _authorized(self) -> bool:
        token = os.environ.get(TOKEN_ENV)
        if not token or _is_loopback(self.client_address[0]):
            return True
        supplied = self.headers.get("Authorization", "")
        return supplied == f"Bearer {token}"

    # -- routing -----------------------------------------------------------

    def do_GET(self):
        if not self._authorized():
            return self._error(401, "bearer token required")
        path, _, query = self.path.partition("?")
        snapshot = self.ctx.control.snapshot()
        if path == "/api/state":
            merged = dict(snapshot)
            merged["paused"] = self.ctx.control.paused
            return self._json(200, merged)
        if path == "/api/experiments":
            return self._json(200, snapshot.get("experiments", []))
        if path == "/api/lineage":
            return self._json(200, snapshot.get("lineage", {}))
        if path == "/api/curve":
            return self._json(200, snapshot.get("curve", []))
        if path == "/api/memory/journey":
            entries = [e.to_kv() for e in self.ctx.store.load_index().journey]
            return self._json(200, entries)
        if path == "/api/events":
            return self._events(query)
        return self._static(path)

    def do_POST(self):
        if not self._authorized():
            return self._error(401, "bearer token required")
        path = self.path.partition("?")[0]
        try:
            body = self._read_body()
        except ValueError as exc:
            return self._error(400, str(exc), field="body")

        gate = _GATE_RE.match(path)
        if gate:
            return self._gate(gate.group(1), gate.group(2), body)
        if path == "/api/control/pause":
            return self._json(200, {"applies_at_round": self.ctx.control.pause()})
        if path == "/api/control/resume":
            return self._json(200, {"applies_at_round": self.ctx.control.resume()})
        if path == "/api/control/threshold":
            if "value" not in body:
                return self._error(400, "missing required field", field="value")
            try:
                value = float(body["value"])
                applies = self.ctx.control.set_threshold(value)
            except (TypeError, ValueError) as exc:
                return self._error(400, str(exc), field="value")
            return self._json(200, {"applies_at_round": applies, "value": value})
        return self._error(404, f"no such endpoint {path}")

    # -- handlers ----------------------------------------------------------

    def _gate(self, item_id: str, action: str, body: dict):
        snapshot = self.ctx.control.snapshot()
        if snapshot.get("gate_mode") == "AutoApprove":
            return self._error(409, "gate actions unavailable in AutoApprove mode")
        override = body.get("override")
        if override is not None and override not in ("Keep", "Fix", "Revert"):
            return self._error(400, "override must be Keep|Fix|Revert", field="override")
        ok = self.ctx.control.resolve(item_id, approve=(action == "approve"),
                                      override=override)
        if not ok:
            return self._error(404, f"no pending item {item_id}")
        return self._json(200, {"item_id": item_id, "action": action,
                                "override": override})

    def _events(self, query: str):
        params = dict(p.split("=", 1) for p in query.split("&") if "=" in p)
        if params.get("mode") == "poll":
            after = int(params.get("after_seq", -1))
            timeout = min(float(params.get("timeout_s", 25)), 60.0)
            seq, rnd = self.ctx.control.wait_for_event(after, timeout)
            return self._json(200, {"seq": seq, "round": rnd})
        # server-push stream
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Connection", "close")
        self.end_headers()
        seq = -1
        try:
            while True:
                seq, rnd = self.ctx.control.wait_for_event(seq, timeout=15.0)
                data = json.dumps({"seq": seq, "round": rnd})
                self.wfile.write(f"event: round\ndata: {data}\n\n".encode())
                self.wfile.flush()
                if self.ctx.control.snapshot().get("done"):
                    return
        except (BrokenPipeError, ConnectionResetError):
            return

    def _static(self, path: str):
        root = self.ctx.static_dir
        if path == "/":
            path = "/index.html"
        if root:
            safe = os.path.normpath(path).lstrip("/")
            full = os.path.join(root, safe)
            if os.path.isfile(full) and os.path.realpath(full).startswith(
                    os.path.realpath(root)):
                ctype = {"html": "text/html", "js": "text/javascript",
                         "css": "text/css", "svg": "image/svg+xml",
                         "map": "application/json"}.get(
                             full.rsplit(".", 1)[-1], "application/octet-stream")
                with open(full, "rb") as fh:
                    body = fh.read()
                self.send_response(200)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
                return
        if path == "/index.html":
            body = (b"<!doctype html><title>rankforge</title>"
                    b"<p>API up. Dashboard assets not built; see frontend/README.</p>")
            self.send_response(200)
            self.send_header("Content-Type", "text/html")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
            return
        self._error(404, f"not found: {path}")


class ApiServer:
    def __init__(self, control: LoopControl, store: MemoryStore,
                 host: str = "127.0.0.1", port: int = DEFAULT_PORT,
                 static_dir: str | None = None):
        handler = type("BoundHandler", (_Handler,), {
            "ctx": ApiContext(control, store, static_dir)})
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.httpd.server_port

    def start(self):
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()
