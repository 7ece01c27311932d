"""Minimal threaded HTTP service used by the gateway and its companion servers.

Thin wrapper over http.server that gives handlers full control over status
codes and bodies. Routes are method + path templates ("/admin/route/{id}");
each request runs in its own thread, so handlers may block.
"""
from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import parse_qs, urlsplit

logger = logging.getLogger(__name__)


@dataclass
class HttpRequest:
    method: str
    path: str
    query: dict[str, str]
    headers: dict[str, str]
    body: bytes
    client_ip: str


@dataclass
class HttpResponse:
    status: int
    body: bytes = b""
    content_type: str = "application/json"
    headers: dict[str, str] = field(default_factory=dict)


Handler = Callable[[HttpRequest, dict[str, str]], HttpResponse]


def json_response(status: int, payload: object) -> HttpResponse:
    return HttpResponse(status, json.dumps(payload).encode("utf-8"))


def error_response(status: int, message: str) -> HttpResponse:
    return json_response(status, {"error": message})


def _compile(template: str) -> re.Pattern[str]:
    pattern = re.sub(r"\{(\w+)\}", r"(?P<\1>[^/]+)", template)
    return re.compile(f"^{pattern}$")


class HttpService:
    """A loopback-friendly HTTP server with explicit start/stop for tests."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.host = host
        self.port = port
        self._routes: list[tuple[str, re.Pattern[str], Handler]] = []
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    def add_route(self, method: str, template: str, handler: Handler) -> None:
        self._routes.append((method.upper(), _compile(template), handler))

    def _dispatch(self, request: HttpRequest) -> HttpResponse:
        for method, pattern, handler in self._routes:
            if method != request.method:
                continue
            match = pattern.match(request.path)
            if match:
                return handler(request, match.groupdict())
        return error_response(404, "not found")

    def start(self) -> int:
        """Bind and serve on a background thread; returns the bound port."""
        service = self

        class _Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt: str, *args: object) -> None:
                logger.debug("%s %s", self.address_string(), fmt % args)

            def _handle(self) -> None:
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                split = urlsplit(self.path)
                query = {k: v[0] for k, v in parse_qs(split.query).items()}
                request = HttpRequest(
                    method=self.command,
                    path=split.path,
                    query=query,
                    headers={k: v for k, v in self.headers.items()},
                    body=body,
                    client_ip=self.client_address[0],
                )
                try:
                    response = service._dispatch(request)
                except Exception:
                    logger.exception("unhandled error for %s %s", self.command, split.path)
                    response = error_response(500, "internal error")
                self.send_response(response.status)
                self.send_header("Content-Type", response.content_type)
                self.send_header("Content-Length", str(len(response.body)))
                for name, value in response.headers.items():
                    self.send_header(name, value)
                self.end_headers()
                self.wfile.write(response.body)

            def do_GET(self) -> None:
                self._handle()

            def do_POST(self) -> None:
                self._handle()

        self._server = ThreadingHTTPServer((self.host, self.port), _Handler)
        self._server.daemon_threads = True
        self.port = self._server.server_address[1]
        # short poll interval so stop() returns promptly
        server = self._server
        self._thread = threading.Thread(
            target=lambda: server.serve_forever(poll_interval=0.05), daemon=True
        )
        self._thread.start()
        return self.port

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def serve_until_interrupt(self) -> None:
        """Blocking run for CLI entry points; reuses an existing bind."""
        if self._server is None:
            self.start()
        try:
            while True:
                thread = self._thread
                if thread is None or not thread.is_alive():
                    break
                thread.join(timeout=0.5)
        except KeyboardInterrupt:
            self.stop()
