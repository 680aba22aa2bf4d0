"""HTTP scoring endpoint.

    POST /v1/score[?clamp=1&segment_average=1]   body: audio/wav
         -> 200 {"mos": ..., "model_version": ..., "duration_s": ...}
    GET  /v1/health
         -> 200 {"status": "ok", "model_version": ..., "model_hash": ...}

Errors are JSON ``{"error": <code>, "message": ...}`` with status 400 (bad
audio), 404, 411 (no length) or 413 (body over the size cap).

Configuration falls back to the environment: ``DNSMOS_MODEL``,
``DNSMOS_BIND`` (host:port) and ``DNSMOS_MAX_BYTES``.
"""

from __future__ import annotations

import json
import logging
import os
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from dnsmos.audio import decode_wav
from dnsmos.errors import DnsmosError
from dnsmos.nnet import DnsmosModel, load_model
from dnsmos.scoring import score_clip

log = logging.getLogger(__name__)

DEFAULT_MAX_BYTES = 50 * 2**20
_TRUE = {"1", "true", "yes", "on"}


def model_version(model: DnsmosModel, digest: str) -> str:
    return f"{model.arch_version}+{digest}"


def _make_handler(model: DnsmosModel, digest: str, max_bytes: int):
    version = model_version(model, digest)

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "dnsmos/1"

        def _send(self, status, payload):
            body = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _error(self, status, code, message):
            self._send(status, {"error": code, "message": message})

        def do_GET(self):
            if urlsplit(self.path).path == "/v1/health":
                self._send(200, {"status": "ok", "model_version": version, "model_hash": digest})
            else:
                self._error(404, "not_found", self.path)

        def do_POST(self):
            url = urlsplit(self.path)
            if url.path != "/v1/score":
                self._error(404, "not_found", self.path)
                return
            length = self.headers.get("Content-Length")
            if length is None:
                self.close_connection = True
                self._error(411, "length_required", "Content-Length header is required")
                return
            try:
                length = int(length)
            except ValueError:
                self.close_connection = True
                self._error(400, "bad_request", "invalid Content-Length")
                return
            if length > max_bytes:
                self.close_connection = True
                self._error(413, "payload_too_large", f"body of {length} bytes exceeds {max_bytes}")
                return
            body = self.rfile.read(length)
            query = {k: v[-1].lower() for k, v in parse_qs(url.query).items()}
            try:
                clip = decode_wav(body, source_id="request")
                mos = score_clip(model, clip, clamp=query.get("clamp") in _TRUE,
                                 segment_average=query.get("segment_average") in _TRUE)
            except DnsmosError as exc:
                self._error(400, exc.code, str(exc))
                return
            self._send(200, {"mos": mos, "model_version": version, "duration_s": clip.duration_s})

        def log_message(self, fmt, *args):
            log.info("%s - %s", self.address_string(), fmt % args)

    return Handler


def make_server(model_path, bind: str = "127.0.0.1:0", max_bytes: int = DEFAULT_MAX_BYTES) -> ThreadingHTTPServer:
    """Load the model (failing fast) and bind a threaded server without starting it."""
    model = load_model(model_path)
    digest = model.content_hash()
    host, _, port = bind.rpartition(":")
    server = ThreadingHTTPServer((host or "127.0.0.1", int(port)), _make_handler(model, digest, max_bytes))
    server.daemon_threads = True
    return server


def serve(model_path=None, bind: str | None = None, max_bytes: int | None = None) -> None:
    model_path = model_path or os.environ["DNSMOS_MODEL"]
    bind = bind or os.environ.get("DNSMOS_BIND", "127.0.0.1:8000")
    max_bytes = max_bytes or int(os.environ.get("DNSMOS_MAX_BYTES", DEFAULT_MAX_BYTES))
    server = make_server(model_path, bind, max_bytes)
    host, port = server.server_address[:2]
    log.warning("serving %s on http://%s:%d", model_path, host, port)
    try:
        server.serve_forever()
    finally:
        server.server_close()


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    serve()
