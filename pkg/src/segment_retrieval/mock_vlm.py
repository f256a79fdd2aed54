"""Local stand-in for the captioning endpoint, built on ``http.server``.

The server answers each POST with the next scripted reply; once the script
runs out it echoes ``n_segments`` generic captions.  Received request bodies
are kept on ``requests`` for inspection.

    with MockVlmServer([(500, "boom"), {"captions": ["a", "b"]}]) as srv:
        caption_via_vlm(svg, 2, VlmClientConfig(endpoint=srv.url))
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

__all__ = ["MockVlmServer"]


class MockVlmServer:
    def __init__(self, script=(), host="127.0.0.1", port=0):
        self.script = list(script)
        self.requests = []
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = self.rfile.read(length)
                try:
                    payload = json.loads(body)
                except json.JSONDecodeError:
                    payload = None
                status, reply = server._next(payload)
                data = reply if isinstance(reply, bytes) else (
                    reply.encode() if isinstance(reply, str) else json.dumps(reply).encode())
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self._thread = None

    def _next(self, payload):
        with self._lock:
            self.requests.append(payload)
            if self.script:
                item = self.script.pop(0)
                if callable(item):
                    item = item(payload)
                if isinstance(item, tuple):
                    return item
                return 200, item
        n = int((payload or {}).get("n_segments", 1))
        return 200, {"captions": [f"segment {i + 1}" for i in range(n)]}

    @property
    def url(self):
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/caption"

    def start(self):
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
