"""Deterministic synthetic room scenes with exact ray-traced ground truth.

Scenes are a closed box room containing axis-aligned boxes and spheres with
flat Lambertian colors. The renderer shoots one ray per pixel with the
camera-frame direction scaled to z = 1, so the ray parameter at a hit IS the
plane depth the RGBD convention stores; no conversion happens here.

Room surfaces (floor, ceiling, walls) are first-class instances with their
own labels, so a full-image segmentation of a rendered frame partitions
every pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .scene import CameraIntrinsics, Pose

__all__ = [
    "SynthObject",
    "SynthScene",
    "QuerySpec",
    "GenerationError",
    "generate_scene",
    "render_gt",
    "orbit_trajectory",
    "look_at",
    "evaluate_iou",
    "label_mask",
]

SURFACE_LABELS = ["floor", "ceiling", "wall", "wall", "wall", "wall"]

_LABEL_POOL = ["chair", "table", "plant", "lamp", "ball", "crate", "book", "mug"]
_COLOR_POOL = np.array([
    [0.85, 0.25, 0.20], [0.20, 0.45, 0.85], [0.25, 0.70, 0.30],
    [0.90, 0.75, 0.20], [0.60, 0.30, 0.75], [0.90, 0.50, 0.15],
    [0.20, 0.70, 0.70], [0.75, 0.35, 0.50],
])


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthObject:
    label: str
    primitive: str  # "box" or "sphere"
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # box: full extents; sphere: diameter in [0]
    color: tuple[float, float, float]

    def __post_init__(self):
        if self.primitive not in ("box", "sphere"):
            raise ValueError(f"unknown primitive {self.primitive!r}")
        if min(self.size) <= 0:
            raise ValueError("degenerate size")

    @property
    def radius(self) -> float:
        """Bounding-sphere radius."""
        if self.primitive == "sphere":
            return self.size[0] / 2.0
        return float(np.linalg.norm(self.size)) / 2.0

    @property
    def half_extents(self) -> np.ndarray:
        """Tight axis-aligned half extents."""
        if self.primitive == "sphere":
            r = self.size[0] / 2.0
            return np.array([r, r, r])
        return np.array(self.size) / 2.0


@dataclass(frozen=True)
class SynthScene:
    room_min: tuple[float, float, float]
    room_max: tuple[float, float, float]
    objects: tuple[SynthObject, ...]
    seed: int

    def __post_init__(self):
        lo = np.array(self.room_min)
        hi = np.array(self.room_max)
        for o in self.objects:
            c = np.array(o.center)
            h = o.half_extents
            if np.any(c - h < lo) or np.any(c + h > hi):
                raise ValueError(f"object {o.label} pokes outside the room")

    def instance_labels(self) -> list[str]:
        """Label per instance id: objects first, then room surfaces."""
        return [o.label for o in self.objects] + SURFACE_LABELS

    def object_labels(self) -> list[str]:
        """Distinct queryable object labels, in first-appearance order."""
        seen: list[str] = []
        for o in self.objects:
            if o.label not in seen:
                seen.append(o.label)
        return seen

    @property
    def center(self) -> np.ndarray:
        return (np.array(self.room_min) + np.array(self.room_max)) / 2.0

    def to_json(self) -> str:
        return json.dumps({
            "room_min": list(self.room_min),
            "room_max": list(self.room_max),
            "seed": self.seed,
            "objects": [{
                "label": o.label, "primitive": o.primitive,
                "center": list(o.center), "size": list(o.size),
                "color": list(o.color),
            } for o in self.objects],
        }, indent=2)

    @staticmethod
    def from_json(text: str) -> "SynthScene":
        d = json.loads(text)
        objs = tuple(SynthObject(o["label"], o["primitive"], tuple(o["center"]),
                                 tuple(o["size"]), tuple(o["color"]))
                     for o in d["objects"])
        return SynthScene(tuple(d["room_min"]), tuple(d["room_max"]), objs,
                          int(d["seed"]))


@dataclass(frozen=True)
class QuerySpec:
    """One evaluation query: a label, the frames to score it on, and how many
    distinct instances carry it."""

    text: str
    frame_ids: tuple[int, ...]
    expected_count: int = 1


def generate_scene(seed: int, object_count: int,
                   room_min=(-2.5, -2.5, 0.0), room_max=(2.5, 2.5, 2.8),
                   min_separation: float = 0.3) -> SynthScene:
    """Deterministic scene: objects placed on a loose ring near the room
    center with pairwise surface separation >= min_separation. With four or
    more objects at least two share a label."""
    if object_count < 1:
        raise ValueError("object_count must be >= 1")
    rng = np.random.default_rng(seed)
    lo = np.array(room_min)
    hi = np.array(room_max)
    center = (lo + hi) / 2.0

    labels = list(rng.permutation(_LABEL_POOL))[:max(object_count, 1)]
    while len(labels) < object_count:
        labels.append(labels[len(labels) % len(_LABEL_POOL)])
    if object_count >= 4:
        labels[1] = labels[0]  # guaranteed duplicate label

    objects: list[SynthObject] = []
    placed: list[tuple[np.ndarray, float]] = []
    for i in range(object_count):
        primitive = "sphere" if rng.random() < 0.35 else "box"
        if primitive == "sphere":
            diam = rng.uniform(0.5, 0.75)
            size = (diam, diam, diam)
            rad = diam / 2.0
        else:
            ext = rng.uniform(0.45, 0.7, size=3)
            size = tuple(float(x) for x in ext)
            rad = float(np.linalg.norm(ext)) / 2.0
        ok = False
        for _ in range(600):
            ang = rng.uniform(0, 2 * np.pi)
            r = rng.uniform(0.6, 1.5)
            z = rng.uniform(rad + 0.05, min(1.8, hi[2] - rad - 0.1))
            c = center + np.array([r * np.cos(ang), r * np.sin(ang), 0.0])
            c[2] = lo[2] + z
            if np.any(c - rad < lo + 0.05) or np.any(c + rad > hi - 0.05):
                continue
            if all(np.linalg.norm(c - pc) >= min_separation + rad + pr
                   for pc, pr in placed):
                ok = True
                break
        if not ok:
            raise GenerationError(
                f"could not place object {i + 1}/{object_count} after retries")
        placed.append((c, rad))
        color = _COLOR_POOL[int(rng.integers(len(_COLOR_POOL)))]
        color = np.clip(color + rng.uniform(-0.05, 0.05, 3), 0.05, 0.95)
        objects.append(SynthObject(labels[i], primitive, tuple(float(x) for x in c),
                                   size, tuple(float(x) for x in color)))
    return SynthScene(tuple(float(x) for x in lo), tuple(float(x) for x in hi),
                      tuple(objects), seed)


# --------------------------------------------------------------------- render

_SURFACE_COLORS = np.array([
    [0.45, 0.42, 0.40],  # floor
    [0.92, 0.92, 0.90],  # ceiling
    [0.70, 0.70, 0.72],  # -x wall
    [0.72, 0.68, 0.66],  # +x wall
    [0.66, 0.70, 0.72],  # -y wall
    [0.70, 0.72, 0.68],  # +y wall
])

_BIG = 1e30


def _intersect_box(origins, dirs, lo, hi):
    """Smallest positive entry parameter per ray, or +inf."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_a = (lo - origins) * inv
        t_b = (hi - origins) * inv
    t_lo = np.fmin(t_a, t_b)
    t_hi = np.fmax(t_a, t_b)
    enter = np.nanmax(t_lo, axis=-1)
    exit_ = np.nanmin(t_hi, axis=-1)
    t = np.where((enter <= exit_) & (exit_ > 1e-9), np.maximum(enter, 1e-9), _BIG)
    # a ray starting inside hits at the exit; treat that as no entry hit
    inside = enter < 1e-9
    return np.where(inside & (t < _BIG) & (exit_ > 1e-9), _BIG, t)


def _intersect_sphere(origins, dirs, c, radius):
    oc = origins - c
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * np.sum(oc * dirs, axis=-1)
    cc = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - 4 * a * cc
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t1 = (-b - sq) / (2 * a)
    t2 = (-b + sq) / (2 * a)
    t = np.where(t1 > 1e-9, t1, np.where(t2 > 1e-9, t2, _BIG))
    return np.where(hit, t, _BIG)


def _room_exit(origins, dirs, lo, hi):
    """Exit parameter and exit-face id (0 floor, 1 ceiling, 2..5 walls)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_a = (lo - origins) * inv
        t_b = (hi - origins) * inv
    t_hi = np.fmax(t_a, t_b)
    t_hi = np.where(np.isnan(t_hi), _BIG, t_hi)
    exit_ = np.min(t_hi, axis=-1)
    axis = np.argmin(t_hi, axis=-1)
    positive = np.take_along_axis(t_b, axis[..., None], axis=-1)[..., 0] == exit_
    face = np.empty(exit_.shape, dtype=np.int32)
    face[(axis == 2) & ~positive] = 0
    face[(axis == 2) & positive] = 1
    face[(axis == 0) & ~positive] = 2
    face[(axis == 0) & positive] = 3
    face[(axis == 1) & ~positive] = 4
    face[(axis == 1) & positive] = 5
    return exit_, face


def _pixel_dirs(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame direction per pixel with z=1, shape (H, W, 3)."""
    us = np.arange(intrinsics.width, dtype=np.float64)
    vs = np.arange(intrinsics.height, dtype=np.float64)
    x = (us - intrinsics.cx) / intrinsics.fx
    y = (vs - intrinsics.cy) / intrinsics.fy
    gx, gy = np.meshgrid(x, y)
    return np.stack([gx, gy, np.ones_like(gx)], axis=-1)


def render_gt(scene: SynthScene, pose: Pose, intrinsics: CameraIntrinsics,
              objects_only: bool = False, depth_noise_sigma: float = 0.0,
              rng: np.random.Generator | None = None
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact render: (rgb (H,W,3) f32, plane depth (H,W) f32, instance (H,W) i32).

    Instance ids index scene.instance_labels(); -1 marks no hit (only
    possible with objects_only=True, which skips the room shell).
    """
    d_cam = _pixel_dirs(intrinsics)
    dirs = d_cam @ pose.rotation.T  # unnormalized: ray parameter == plane depth
    origins = np.broadcast_to(pose.translation, dirs.shape)

    h, w = dirs.shape[:2]
    best_t = np.full((h, w), _BIG)
    best_id = np.full((h, w), -1, dtype=np.int32)

    for i, obj in enumerate(scene.objects):
        c = np.array(obj.center)
        if obj.primitive == "sphere":
            t = _intersect_sphere(origins, dirs, c, obj.size[0] / 2.0)
        else:
            half = np.array(obj.size) / 2.0
            t = _intersect_box(origins, dirs, c - half, c + half)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, i, best_id)

    if not objects_only:
        exit_t, face = _room_exit(origins, dirs, np.array(scene.room_min),
                                  np.array(scene.room_max))
        closer = exit_t < best_t
        best_t = np.where(closer, exit_t, best_t)
        best_id = np.where(closer, len(scene.objects) + face, best_id)

    colors = np.concatenate([
        np.array([o.color for o in scene.objects], dtype=np.float64).reshape(-1, 3),
        _SURFACE_COLORS,
    ], axis=0)
    rgb = np.where((best_id >= 0)[..., None],
                   colors[np.clip(best_id, 0, len(colors) - 1)], 0.0)
    depth = np.where(best_id >= 0, best_t, 0.0)
    if depth_noise_sigma > 0:
        gen = rng if rng is not None else np.random.default_rng(0)
        depth = np.where(depth > 0,
                         np.maximum(depth + gen.normal(0, depth_noise_sigma,
                                                       depth.shape), 1e-3),
                         0.0)
    return rgb.astype(np.float32), depth.astype(np.float32), best_id


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose at eye looking toward target, image x right, y down."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(f, up)
    n = np.linalg.norm(x)
    if n < 1e-9:  # looking straight up/down: pick an arbitrary horizontal right
        x = np.array([1.0, 0.0, 0.0])
        n = 1.0
    x = x / n
    y = np.cross(f, x)
    y = y / np.linalg.norm(y)
    r = np.stack([x, y, f], axis=1)
    if np.linalg.det(r) < 0:
        y = -y
        r = np.stack([x, y, f], axis=1)
    return Pose(r, eye)


def orbit_trajectory(scene: SynthScene, n_frames: int, radius: float | None = None,
                     eye_height: float = 1.5, target_height: float = 0.85,
                     height_wobble: float = 0.25) -> list[Pose]:
    """Smooth inward-looking orbit around the room center."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    lo = np.array(scene.room_min)
    hi = np.array(scene.room_max)
    c = scene.center
    if radius is None:
        radius = 0.40 * float(min(hi[0] - lo[0], hi[1] - lo[1]))
    poses = []
    for k in range(n_frames):
        th = 2.0 * np.pi * k / n_frames
        eye = np.array([c[0] + radius * np.cos(th),
                        c[1] + radius * np.sin(th),
                        lo[2] + eye_height + height_wobble * np.sin(2 * th)])
        eye[2] = min(eye[2], hi[2] - 0.15)
        target = np.array([c[0], c[1], lo[2] + target_height])
        poses.append(look_at(eye, target))
    return poses


# ----------------------------------------------------------------- evaluation

def label_mask(scene: SynthScene, instance_map: np.ndarray, label: str) -> np.ndarray:
    """Union of pixels whose instance carries the given label."""
    labels = scene.instance_labels()
    ids = [i for i, l in enumerate(labels) if l == label]
    out = np.zeros(instance_map.shape, dtype=bool)
    for i in ids:
        out |= instance_map == i
    return out


def evaluate_iou(pred_masks: list[np.ndarray], gt_masks: list[np.ndarray]) -> float:
    """Mean per-frame IoU; a frame where both masks are empty scores 1."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError("mask list lengths differ")
    if not pred_masks:
        raise ValueError("no frames to evaluate")
    scores = []
    for p, g in zip(pred_masks, gt_masks):
        if p.shape != g.shape:
            raise ValueError(f"mask shape mismatch: {p.shape} vs {g.shape}")
        union = np.logical_or(p, g).sum()
        if union == 0:
            scores.append(1.0)
        else:
            scores.append(float(np.logical_and(p, g).sum() / union))
    return float(np.mean(scores))
