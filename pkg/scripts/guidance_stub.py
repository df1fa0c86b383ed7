"""Minimal external guidance process implementing the wire protocol.

Echo semantics: eps_tgt = eps_src = 0, so the composite noise collapses to
the request noise and the edit holds still; useful for transport testing.

Usage: python scripts/guidance_stub.py [--port 8890]
"""

import argparse
import json
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from dragsplat.guidance import GuidanceResponse
from dragsplat.protocol import request_from_json, response_to_json


class Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers["Content-Length"])
        req = request_from_json(json.loads(self.rfile.read(length)))
        zeros = np.zeros_like(req.noise)
        payload = json.dumps(response_to_json(
            GuidanceResponse(zeros, zeros))).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--port", type=int, default=8890)
    args = ap.parse_args()
    server = ThreadingHTTPServer(("127.0.0.1", args.port), Handler)
    print(f"guidance stub on http://127.0.0.1:{args.port}/")
    server.serve_forever()


if __name__ == "__main__":
    main()
