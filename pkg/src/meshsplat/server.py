"""Static bundle serving plus the live pose endpoint for the web viewer.

Endpoints:
  GET  /manifest        -> bundle manifest JSON
  GET  /assets/<file>   -> file from the bundle directory
  POST /pose            -> body: pose JSON; response: binary polygon frames

Pose math stays on this side; the viewer applies the returned per-polygon
transforms and never runs forward kinematics itself. Requests are stateless,
so the threading server handles them concurrently without locks.
"""

from __future__ import annotations

import json
import os
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .assets import frames_payload, load_mesh
from .render import pose_polygon_frames
from .types import PoseParams

_INDEX_FALLBACK = b"""<!doctype html>
<html><head><title>meshsplat bundle server</title></head>
<body><h1>meshsplat bundle server</h1>
<p>Bundle endpoints: <a href="/manifest">/manifest</a>, /assets/&lt;file&gt;,
POST /pose. Point the web viewer at this origin, or restart with
--viewer-dir to serve the built viewer from /.</p></body></html>
"""


def pose_from_request(doc, num_joints: int) -> PoseParams:
    rotations = np.array(doc.get("joint_rotations", []), dtype=float).reshape(-1, 3)
    if rotations.shape[0] != num_joints:
        raise ValueError(
            f"expected joint_rotations for {num_joints} joints, got {rotations.shape[0]}")
    return PoseParams(
        joint_rotations=rotations,
        root_translation=np.array(doc.get("root_translation", [0.0, 0.0, 0.0]),
                                  dtype=float),
        shape=np.array(doc.get("shape", []), dtype=float),
        joint_offsets=(np.array(doc["joint_offsets"], dtype=float).reshape(-1, 3)
                       if doc.get("joint_offsets") else None),
        expression=np.array(doc.get("expression", []), dtype=float),
    )


def make_server(bundle_dir: str, host: str = "127.0.0.1", port: int = 8080,
                viewer_dir: str | None = None) -> ThreadingHTTPServer:
    bundle_dir = os.path.abspath(bundle_dir)
    viewer_root = os.path.abspath(viewer_dir) if viewer_dir else None
    mesh = load_mesh(os.path.join(bundle_dir, "avatar.mesh"))

    class Handler(BaseHTTPRequestHandler):
        server_version = "meshsplat"

        def log_message(self, fmt, *args):
            pass

        def _send(self, code, body: bytes, ctype: str):
            self.send_response(code)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.end_headers()
            self.wfile.write(body)

        def _send_file(self, root: str, rel: str):
            full = os.path.abspath(os.path.join(root, rel))
            if not full.startswith(root + os.sep) and full != root:
                self._send(403, b"forbidden", "text/plain")
                return
            if not os.path.isfile(full):
                self._send(404, f"no such file: {rel}".encode(), "text/plain")
                return
            ctype = {
                ".json": "application/json",
                ".html": "text/html",
                ".js": "text/javascript",
                ".css": "text/css",
                ".png": "image/png",
            }.get(os.path.splitext(full)[1], "application/octet-stream")
            with open(full, "rb") as fh:
                self._send(200, fh.read(), ctype)

        def do_OPTIONS(self):
            self._send(204, b"", "text/plain")

        def do_GET(self):
            path = self.path.split("?", 1)[0]
            if path in ("/manifest", "/manifest.json"):
                self._send_file(bundle_dir, "manifest.json")
            elif path.startswith("/assets/"):
                self._send_file(bundle_dir, path[len("/assets/"):])
            elif viewer_root is not None:
                rel = "index.html" if path == "/" else path.lstrip("/")
                self._send_file(viewer_root, rel)
            elif path == "/":
                self._send(200, _INDEX_FALLBACK, "text/html")
            else:
                self._send(404, b"not found", "text/plain")

        def do_POST(self):
            if self.path.split("?", 1)[0] != "/pose":
                self._send(404, b"not found", "text/plain")
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                doc = json.loads(self.rfile.read(length).decode("utf-8"))
                pose = pose_from_request(doc, mesh.num_joints)
                frames = pose_polygon_frames(mesh, pose)
            except Exception as e:  # surfaced to the client, not the server log
                self._send(400, f"bad pose request: {e}".encode(), "text/plain")
                return
            self._send(200, frames_payload(frames), "application/octet-stream")

    return ThreadingHTTPServer((host, port), Handler)


def serve_forever(server: ThreadingHTTPServer):
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread
