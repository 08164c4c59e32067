"""Scene dataset directories.

A dataset is a directory holding everything needed to (re)build a map:

    scene.json            camera intrinsics, frame count, and (for
                          synthetic data) the generating scene description
    frames/
      frame_00000.ppm     RGB image, binary PPM
      frame_00000.o2vd    plane-depth raster, meters
      frame_00000.pose    world-from-camera transform: 3 text lines of
                          4 floats each, rows of [R | t]
    perception.o2vp       segmentation masks + embeddings (optional)
    queries.o2vt          text-to-embedding sidecar (optional)

Depth rasters and pose text round-trip exactly; RGB quantizes to 8 bits,
which is far below the color tolerances anything downstream uses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import FormatError, read_depth_raster, read_ppm, write_depth_raster, write_ppm
from .perception import StubPerception, stub_embed, write_archive, write_text_sidecar
from .scene import CameraIntrinsics, Pose, RGBDFrame, SceneBounds
from .synthworld import SynthScene, render_gt

__all__ = ["SceneDataset", "write_dataset", "load_dataset"]

SCENE_JSON = "scene.json"
FRAME_DIR = "frames"
PERCEPTION_FILE = "perception.o2vp"
SIDECAR_FILE = "queries.o2vt"


def _frame_stem(index: int) -> str:
    return f"frame_{index:05d}"


def _write_pose(path: Path, pose: Pose) -> None:
    rows = np.hstack([pose.rotation, pose.translation[:, None]])
    text = "\n".join(" ".join(repr(float(x)) for x in row) for row in rows)
    path.write_text(text + "\n", encoding="utf-8")


def _read_pose(path: Path) -> Pose:
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"pose line in {path} must hold 4 floats")
        rows.append([float(p) for p in parts])
    if len(rows) != 3:
        raise FormatError(f"pose file {path} must hold 3 rows of [R | t]")
    m = np.array(rows, dtype=np.float64)
    return Pose(m[:, :3], m[:, 3])


@dataclass
class SceneDataset:
    """Handle to a dataset directory; frames are read lazily."""

    root: Path
    intrinsics: CameraIntrinsics
    n_frames: int
    scene: SynthScene | None

    @property
    def perception_path(self) -> Path | None:
        p = self.root / PERCEPTION_FILE
        return p if p.exists() else None

    @property
    def sidecar_path(self) -> Path | None:
        p = self.root / SIDECAR_FILE
        return p if p.exists() else None

    def bounds(self) -> SceneBounds:
        """Working volume: the scene room, or the span of all camera
        positions padded by the far plane would be guesswork, so datasets
        without a scene description must carry explicit bounds."""
        if self.scene is not None:
            return SceneBounds(np.array(self.scene.room_min),
                               np.array(self.scene.room_max))
        extra = json.loads((self.root / SCENE_JSON).read_text(encoding="utf-8"))
        if "bounds_min" not in extra or "bounds_max" not in extra:
            raise FormatError("dataset has neither a scene nor explicit bounds")
        return SceneBounds(np.array(extra["bounds_min"], dtype=np.float64),
                           np.array(extra["bounds_max"], dtype=np.float64))

    def pose(self, index: int) -> Pose:
        return _read_pose(self.root / FRAME_DIR / f"{_frame_stem(index)}.pose")

    def frame(self, index: int) -> RGBDFrame:
        if not 0 <= index < self.n_frames:
            raise IndexError(f"frame {index} outside 0..{self.n_frames - 1}")
        stem = self.root / FRAME_DIR / _frame_stem(index)
        rgb = read_ppm(stem.with_suffix(".ppm"))
        depth = read_depth_raster(stem.with_suffix(".o2vd"))
        pose = _read_pose(stem.with_suffix(".pose"))
        return RGBDFrame(frame_id=index, rgb=rgb, depth=depth, pose=pose,
                         intrinsics=self.intrinsics)

    def frames(self, n: int | None = None):
        for i in range(self.n_frames if n is None else min(n, self.n_frames)):
            yield self.frame(i)


def write_dataset(root, scene: SynthScene, poses, intrinsics: CameraIntrinsics,
                  *, with_perception: bool = True,
                  depth_noise_sigma: float = 0.0) -> SceneDataset:
    """Render a synthetic scene along a trajectory into a dataset directory."""
    root = Path(root)
    (root / FRAME_DIR).mkdir(parents=True, exist_ok=True)
    poses = list(poses)
    rng = np.random.default_rng(scene.seed)
    provider = StubPerception(scene) if with_perception else None
    perceptions = []
    for i, pose in enumerate(poses):
        rgb, depth, _ = render_gt(scene, pose, intrinsics,
                                  depth_noise_sigma=depth_noise_sigma, rng=rng)
        stem = root / FRAME_DIR / _frame_stem(i)
        write_ppm(stem.with_suffix(".ppm"), np.clip(rgb, 0.0, 1.0))
        write_depth_raster(stem.with_suffix(".o2vd"), depth)
        _write_pose(stem.with_suffix(".pose"), pose)
        if provider is not None:
            frame = RGBDFrame(frame_id=i, rgb=rgb, depth=depth, pose=pose,
                              intrinsics=intrinsics)
            perceptions.append(provider.perceive(frame))

    meta = {
        "intrinsics": {"fx": intrinsics.fx, "fy": intrinsics.fy,
                       "cx": intrinsics.cx, "cy": intrinsics.cy,
                       "width": intrinsics.width, "height": intrinsics.height},
        "n_frames": len(poses),
        "scene": json.loads(scene.to_json()),
    }
    (root / SCENE_JSON).write_text(json.dumps(meta, indent=2) + "\n",
                                   encoding="utf-8")

    if provider is not None:
        write_archive(root / PERCEPTION_FILE, perceptions,
                      lang_dim=provider.lang_dim)
        labels = sorted(set(scene.instance_labels()))
        write_text_sidecar(root / SIDECAR_FILE,
                           {lab: stub_embed(lab, provider.lang_dim)
                            for lab in labels})
    return load_dataset(root)


def load_dataset(root) -> SceneDataset:
    root = Path(root)
    meta_path = root / SCENE_JSON
    if not meta_path.exists():
        raise FormatError(f"{root} is not a dataset: no {SCENE_JSON}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"unreadable {SCENE_JSON}: {e}") from e
    for key in ("intrinsics", "n_frames"):
        if key not in meta:
            raise FormatError(f"{SCENE_JSON} is missing {key!r}")
    k = meta["intrinsics"]
    try:
        intrinsics = CameraIntrinsics(fx=float(k["fx"]), fy=float(k["fy"]),
                                      cx=float(k["cx"]), cy=float(k["cy"]),
                                      width=int(k["width"]),
                                      height=int(k["height"]))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"bad intrinsics in {SCENE_JSON}: {e}") from e
    scene = None
    if meta.get("scene") is not None:
        scene = SynthScene.from_json(json.dumps(meta["scene"]))
    return SceneDataset(root=root, intrinsics=intrinsics,
                        n_frames=int(meta["n_frames"]), scene=scene)
