"""Line-protocol TCP service over published map snapshots.

Requests and responses are newline-delimited JSON. One request per line:

    {"op": "query", "text": "chair", "top_n": 5}
        -> {"instances": [{"id": 3, "cosine": 0.97,
                           "center": [x, y, z]}, ...], "version": 12}
    {"op": "relevance", "text": "chair", "pose": [...12 floats...],
     "out": "rel.ppm"}
        -> {"ok": true, "out": "rel.ppm", "version": 12}
    {"op": "render", "pose": [...12 floats...], "out": "view.ppm"}
        -> {"ok": true, "out": "view.ppm", "version": 12}
    {"op": "stats"}
        -> {"version": 12, "frames": 12, "cells": ..., "splits": ...,
            "language_cells": ..., "instances": ...}

Poses are 12 floats, row-major [R | t] (world from camera). Any malformed
request, including byte garbage that is not JSON at all, gets an
{"error": ...} reply and the connection stays open.

Every request reads the snapshot source exactly once and works on that
immutable snapshot throughout, so readers never observe a half-published
map no matter how the mapper is training concurrently.
"""

from __future__ import annotations

import json
import socketserver
import threading

import numpy as np

from .imageio import write_depth_raster, write_ppm
from .scene import CameraIntrinsics, Pose
from .snapshot import MapSnapshot
from .views import render_relevance, render_view

__all__ = ["MapService", "parse_endpoint"]


def parse_endpoint(text: str) -> tuple[str, int]:
    """'host:port' -> (host, port). Host may be empty for all interfaces."""
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _parse_pose(raw) -> Pose:
    vals = np.asarray(raw, dtype=np.float64)
    if vals.shape != (12,):
        raise ValueError("pose must be 12 floats, row-major [R | t]")
    m = vals.reshape(3, 4)
    return Pose(m[:, :3], m[:, 3])


def _parse_intrinsics(raw) -> CameraIntrinsics:
    return CameraIntrinsics(fx=float(raw["fx"]), fy=float(raw["fy"]),
                            cx=float(raw["cx"]), cy=float(raw["cy"]),
                            width=int(raw["width"]), height=int(raw["height"]))


def _gray_ppm(path, scores: np.ndarray) -> None:
    level = np.clip(scores, 0.0, 1.0)
    write_ppm(path, np.repeat(level[..., None], 3, axis=2))


class MapService:
    """Serves the latest snapshot from `snapshot_fn` until stopped.

    `snapshot_fn() -> MapSnapshot` is called once per request; handing in
    `mapper.snapshot` serves a live build. `embed_fn(text) -> np.ndarray`
    supplies query embeddings (a stub or a sidecar lookup). `intrinsics`
    is the camera used for render/relevance unless a request overrides it.
    """

    def __init__(self, snapshot_fn, embed_fn, intrinsics: CameraIntrinsics,
                 host: str = "127.0.0.1", port: int = 0):
        self.snapshot_fn = snapshot_fn
        self.embed_fn = embed_fn
        self.intrinsics = intrinsics
        service = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                while True:
                    line = self.rfile.readline()
                    if not line:
                        return
                    if not line.strip():
                        continue
                    reply = service._handle_line(line)
                    self.wfile.write(json.dumps(reply).encode("utf-8") + b"\n")
                    self.wfile.flush()

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> tuple[str, int]:
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="map-service", daemon=True)
        self._thread.start()
        return self.address

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def wait(self) -> None:
        """Block until the service is stopped from another thread."""
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    # ------------------------------------------------------------- dispatch

    def _handle_line(self, line: bytes) -> dict:
        try:
            request = json.loads(line)
        except (ValueError, UnicodeDecodeError) as e:
            return {"error": f"request is not valid JSON: {e}"}
        if not isinstance(request, dict):
            return {"error": "request must be a JSON object"}
        op = request.get("op")
        handler = getattr(self, f"_op_{op}", None) if isinstance(op, str) else None
        if handler is None:
            return {"error": f"unknown op {op!r}"}
        try:
            return handler(request, self.snapshot_fn())
        except Exception as e:  # noqa: BLE001 - the connection must survive
            return {"error": f"{type(e).__name__}: {e}"}

    def _op_query(self, request: dict, snap: MapSnapshot) -> dict:
        q = np.asarray(self.embed_fn(request["text"]), dtype=np.float64)
        q = q / np.linalg.norm(q)
        top_n = int(request.get("top_n", 5))
        instances = []
        if snap.retrieval.entries:
            for entry_id, cosine, center in snap.retrieval.query(q, top_n):
                instances.append({"id": int(entry_id), "cosine": float(cosine),
                                  "center": [float(x) for x in center]})
        return {"instances": instances, "version": snap.version}

    def _op_relevance(self, request: dict, snap: MapSnapshot) -> dict:
        pose = _parse_pose(request["pose"])
        k = (_parse_intrinsics(request["intrinsics"])
             if "intrinsics" in request else self.intrinsics)
        q = np.asarray(self.embed_fn(request["text"]), dtype=np.float64)
        rel = render_relevance(snap, pose, k, q)
        _gray_ppm(request["out"], rel.scores)
        return {"ok": True, "out": request["out"], "version": snap.version}

    def _op_render(self, request: dict, snap: MapSnapshot) -> dict:
        pose = _parse_pose(request["pose"])
        k = (_parse_intrinsics(request["intrinsics"])
             if "intrinsics" in request else self.intrinsics)
        rgb, depth = render_view(snap, pose, k)
        write_ppm(request["out"], np.clip(rgb, 0.0, 1.0))
        if "depth_out" in request:
            write_depth_raster(request["depth_out"],
                               depth.astype(np.float32))
        return {"ok": True, "out": request["out"], "version": snap.version}

    def _op_stats(self, request: dict, snap: MapSnapshot) -> dict:
        return {
            "version": snap.version,
            "frames": snap.version,
            "cells": snap.field.n_cells,
            "splits": snap.field.n_split,
            "language_cells": len(snap.field.language_cells()),
            "instances": len(snap.retrieval.entries),
        }
