"""Serve a map over TCP while it is still being built.

Starts the line-protocol service on a background mapper, streams frames
into the map on the main thread, and runs a small client loop that watches
the frame counter climb and the query results sharpen as coverage grows.
"""

import json
import socket
import sys
import tempfile
import threading
from pathlib import Path

from o2v import MapConfig, Mapper, MapService
from o2v.dataset import write_dataset
from o2v.perception import ArchivePerception, StubTextEmbedder
from o2v.synthworld import generate_scene, orbit_trajectory
from o2v.cli import DEFAULT_INTRINSICS


def ask(sock_file, request):
    sock_file.write((json.dumps(request) + "\n").encode())
    sock_file.flush()
    return json.loads(sock_file.readline())


def main() -> int:
    out = Path(tempfile.mkdtemp(prefix="o2v_serve_"))
    scene = generate_scene(seed=3, object_count=3)
    dataset = write_dataset(out / "scene", scene,
                            orbit_trajectory(scene, 12), DEFAULT_INTRINSICS)
    label = sorted(set(scene.instance_labels()))[0]

    mapper = Mapper(dataset.bounds(), MapConfig(steps_per_frame=30))
    embedder = StubTextEmbedder()
    service = MapService(mapper.snapshot, embedder.embed, dataset.intrinsics)
    host, port = service.start()
    print(f"service on {host}:{port}, building {dataset.n_frames} frames ...")

    provider = ArchivePerception(dataset.perception_path)

    def build():
        for frame in dataset.frames():
            mapper.integrate(frame, provider.perceive(frame))

    builder = threading.Thread(target=build)
    builder.start()

    with socket.create_connection((host, port)) as conn:
        f = conn.makefile("rwb")
        while builder.is_alive():
            stats = ask(f, {"op": "stats"})
            reply = ask(f, {"op": "query", "text": label, "top_n": 1})
            hit = reply["instances"][0] if reply["instances"] else None
            print(f"  version {stats['version']:2d}  cells {stats['cells']:5d}"
                  f"  {label!r} -> "
                  + (f"cos {hit['cosine']:+.3f}" if hit else "no instances"))
            builder.join(timeout=2.0)
        print("final:", ask(f, {"op": "stats"}))

    service.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
