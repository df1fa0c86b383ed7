"""Loopback HTTP stub implementing the guidance wire protocol for tests."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from dragsplat.protocol import (request_from_json, response_to_json)
from dragsplat.guidance import GuidanceResponse

import numpy as np


class GuidanceStub:
    """Runs a real loopback server; behavior injected as a callable.

    behavior(request_doc) -> response dict (already JSON-ready) or an int
    HTTP status to fail with.
    """

    def __init__(self, behavior=None):
        self.behavior = behavior or self.echo_zero
        self.requests: list[dict] = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers["Content-Length"])
                doc = json.loads(self.rfile.read(length))
                stub.requests.append(doc)
                result = stub.behavior(doc)
                if isinstance(result, int):
                    self.send_response(result)
                    self.end_headers()
                    return
                payload = json.dumps(result).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever,
                                       daemon=True)
        self.thread.start()

    @property
    def endpoint(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}/guidance"

    @staticmethod
    def echo_zero(doc):
        """eps_tgt = eps_src = 0 so the composite noise collapses to eps."""
        req = request_from_json(doc)
        zeros = np.zeros_like(req.noise)
        return response_to_json(GuidanceResponse(zeros, zeros))

    @staticmethod
    def echo_noise(doc):
        """eps_tgt = the request noise, eps_src = 0 (bit-exact round trip)."""
        req = request_from_json(doc)
        return response_to_json(
            GuidanceResponse(req.noise, np.zeros_like(req.noise)))

    def close(self):
        self.server.shutdown()
        self.server.server_close()
