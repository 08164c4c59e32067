"""Command-line interface.

Subcommands:

    o2v synth     --seed S --objects K --frames N --out <dir>
    o2v build     --scene <dir> --frames N --out map.o2vm
                  [--config cfg] [--no-voting] [--no-split]
    o2v query     --map map.o2vm --text "<q>" [--top 5] [--sidecar f.o2vt]
    o2v relevance --map map.o2vm --scene <dir> --text "<q>" --frame K
                  --out img.ppm [--sidecar f.o2vt]
    o2v serve     --scene <dir> --listen host:port [--frames N] [--config cfg]
    o2v eval      --scene <dir> --queries <file> --report report.json
                  [--frames N] [--every 3] [--config cfg]
                  [--no-voting] [--no-split]

`synth` renders a synthetic dataset directory; the other commands consume
dataset directories regardless of origin. Query text embeds through the
dataset's text sidecar when one is available (or given via --sidecar), and
through the deterministic stub embedder otherwise.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import MapConfig, load_config
from .dataset import SceneDataset, load_dataset, write_dataset
from .imageio import write_ppm
from .mapping import Mapper
from .perception import ArchivePerception, SidecarTextEmbedder, StubTextEmbedder
from .scene import CameraIntrinsics
from .service import MapService, parse_endpoint
from .snapshot import load_map, save_map
from .synthworld import evaluate_iou, generate_scene, label_mask, orbit_trajectory, render_gt
from .views import language_view, relevance_from_features, render_relevance

DEFAULT_INTRINSICS = CameraIntrinsics(fx=120.0, fy=120.0, cx=79.5, cy=59.5,
                                      width=160, height=120)


def _load_config_arg(path: str | None) -> MapConfig:
    return MapConfig() if path is None else load_config(path)


def _apply_flags(config: MapConfig, args) -> MapConfig:
    updates = {}
    if getattr(args, "no_voting", False):
        updates["voting"] = False
    if getattr(args, "no_split", False):
        updates["splitting"] = False
    return config.replace(**updates) if updates else config


def _embedder(args, dataset: SceneDataset | None):
    sidecar = getattr(args, "sidecar", None)
    if sidecar is not None:
        return SidecarTextEmbedder(sidecar)
    if dataset is not None and dataset.sidecar_path is not None:
        return SidecarTextEmbedder(dataset.sidecar_path)
    return StubTextEmbedder()


def _build(dataset: SceneDataset, config: MapConfig, n_frames: int | None,
           *, echo=print) -> Mapper:
    mapper = Mapper(dataset.bounds(), config)
    provider = None
    if dataset.perception_path is not None:
        provider = ArchivePerception(dataset.perception_path)
    n = dataset.n_frames if n_frames is None else min(n_frames, dataset.n_frames)
    for i in range(n):
        frame = dataset.frame(i)
        perception = provider.perceive(frame) if provider is not None else None
        report = mapper.integrate(frame, perception)
        if echo is not None and (i % 10 == 0 or i == n - 1):
            loss = "-" if report.loss is None else f"{report.loss.total:.4f}"
            echo(f"frame {i:4d}/{n}  loss {loss}  cells {mapper.field.n_cells}")
    return mapper


def cmd_synth(args) -> int:
    scene = generate_scene(seed=args.seed, object_count=args.objects)
    poses = orbit_trajectory(scene, args.frames)
    write_dataset(args.out, scene, poses, DEFAULT_INTRINSICS,
                  depth_noise_sigma=args.depth_noise)
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


def cmd_build(args) -> int:
    dataset = load_dataset(args.scene)
    config = _apply_flags(_load_config_arg(args.config), args)
    mapper = _build(dataset, config, args.frames)
    save_map(mapper.snapshot(), args.out)
    print(f"saved map version {mapper.snapshot().version} to {args.out}")
    return 0


def cmd_query(args) -> int:
    snap = load_map(args.map)
    embedder = _embedder(args, None)
    q = np.asarray(embedder.embed(args.text), dtype=np.float64)
    q /= np.linalg.norm(q)
    instances = []
    if snap.retrieval.entries:
        for entry_id, cosine, center in snap.retrieval.query(q, args.top):
            instances.append({"id": int(entry_id), "cosine": float(cosine),
                              "center": [float(x) for x in center]})
    print(json.dumps({"instances": instances, "version": snap.version}))
    return 0


def cmd_relevance(args) -> int:
    snap = load_map(args.map)
    dataset = load_dataset(args.scene)
    embedder = _embedder(args, dataset)
    q = np.asarray(embedder.embed(args.text), dtype=np.float64)
    rel = render_relevance(snap, dataset.pose(args.frame), dataset.intrinsics, q)
    level = np.clip(rel.scores, 0.0, 1.0)
    write_ppm(args.out, np.repeat(level[..., None], 3, axis=2))
    print(f"wrote relevance for {args.text!r} to {args.out}")
    return 0


def cmd_serve(args) -> int:
    dataset = load_dataset(args.scene)
    config = _apply_flags(_load_config_arg(args.config), args)
    host, port = parse_endpoint(args.listen)
    mapper = Mapper(dataset.bounds(), config)
    embedder = _embedder(args, dataset)
    service = MapService(mapper.snapshot, embedder.embed, dataset.intrinsics,
                         host=host, port=port)
    bound = service.start()
    print(f"serving on {bound[0]}:{bound[1]}", flush=True)
    try:
        _build_into(mapper, dataset, args.frames)
        print("build finished; still serving (ctrl-c to stop)", flush=True)
        service.wait()
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()
    return 0


def _build_into(mapper: Mapper, dataset: SceneDataset,
                n_frames: int | None) -> None:
    provider = None
    if dataset.perception_path is not None:
        provider = ArchivePerception(dataset.perception_path)
    n = dataset.n_frames if n_frames is None else min(n_frames, dataset.n_frames)
    for i in range(n):
        frame = dataset.frame(i)
        perception = provider.perceive(frame) if provider is not None else None
        mapper.integrate(frame, perception)


def cmd_eval(args) -> int:
    dataset = load_dataset(args.scene)
    if dataset.scene is None:
        print("eval needs a dataset with an embedded scene description",
              file=sys.stderr)
        return 2
    queries = [line.strip() for line in
               Path(args.queries).read_text(encoding="utf-8").splitlines()
               if line.strip() and not line.lstrip().startswith("#")]
    if not queries:
        print("query file holds no queries", file=sys.stderr)
        return 2
    config = _apply_flags(_load_config_arg(args.config), args)
    mapper = _build(dataset, config, args.frames)
    snap = mapper.snapshot()
    embedder = _embedder(args, dataset)

    n_built = min(args.frames or dataset.n_frames, dataset.n_frames)
    eval_ids = list(range(0, n_built, args.every))
    per_query: dict[str, float] = {}
    views = []
    for i in eval_ids:
        pose = dataset.pose(i)
        feats, present = language_view(snap, pose, dataset.intrinsics)
        _, _, inst = render_gt(dataset.scene, pose, dataset.intrinsics)
        views.append((feats, present, inst))
    for text in queries:
        q = np.asarray(embedder.embed(text), dtype=np.float64)
        pred, gt = [], []
        for feats, present, inst in views:
            rel = relevance_from_features(feats, present, q, config.tau_rel)
            pred.append(rel.mask())
            gt.append(label_mask(dataset.scene, inst, text))
        per_query[text] = evaluate_iou(pred, gt)
    report = {
        "frames_built": n_built,
        "eval_frames": eval_ids,
        "per_query": per_query,
        "mean_iou": float(np.mean(list(per_query.values()))),
    }
    Path(args.report).write_text(json.dumps(report, indent=2) + "\n",
                                 encoding="utf-8")
    print(json.dumps({"mean_iou": report["mean_iou"],
                      "report": str(args.report)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="o2v",
        description="Online open-vocabulary voxel mapping")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--objects", type=int, default=4)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--depth-noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build", help="build a map from a dataset directory")
    p.add_argument("--scene", required=True)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--no-voting", action="store_true")
    p.add_argument("--no-split", action="store_true")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", help="rank stored instances against a text query")
    p.add_argument("--map", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--sidecar", default=None)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("relevance", help="render a per-pixel relevance image")
    p.add_argument("--map", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sidecar", default=None)
    p.set_defaults(func=cmd_relevance)

    p = sub.add_parser("serve", help="build live and serve queries over TCP")
    p.add_argument("--scene", required=True)
    p.add_argument("--listen", required=True)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--sidecar", default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("eval", help="build, query every label, report IoU")
    p.add_argument("--scene", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--every", type=int, default=3)
    p.add_argument("--config", default=None)
    p.add_argument("--no-voting", action="store_true")
    p.add_argument("--no-split", action="store_true")
    p.add_argument("--sidecar", default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
