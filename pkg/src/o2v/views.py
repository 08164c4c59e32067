"""Camera-space views of a map snapshot: RGBD re-rendering and text relevance.

Rays here are deliberately unnormalized (camera z component 1), so the ray
parameter equals plane depth and rendered depth comes out directly in the
same domain the input frames use. Relevance maps are computed from one
fused language image per view; scoring several queries against the same
view reuses that image instead of re-rendering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .renderer import render_language, render_rays
from .scene import CameraIntrinsics, Pose
from .snapshot import MapSnapshot

__all__ = [
    "RelevanceMap",
    "render_view",
    "language_view",
    "relevance_from_features",
    "render_relevance",
]


@dataclass(frozen=True)
class RelevanceMap:
    """Per-pixel response of one view to one text query.

    `scores` holds min-max normalized cosine relevance in [0, 1] over the
    pixels with language data; pixels with none are 0 with present=False.
    `threshold` is the relative cutoff the mask applies to the scores.
    """

    scores: np.ndarray  # (H, W) float64
    present: np.ndarray  # (H, W) bool
    threshold: float

    def mask(self) -> np.ndarray:
        """Boolean segmentation: present pixels at or above the cutoff."""
        return self.present & (self.scores >= self.threshold)


def _view_rays(pose: Pose, intrinsics: CameraIntrinsics
               ) -> tuple[np.ndarray, np.ndarray]:
    k = intrinsics
    u, v = np.meshgrid(np.arange(k.width, dtype=np.float64),
                       np.arange(k.height, dtype=np.float64))
    x = (u - k.cx) / k.fx
    y = (v - k.cy) / k.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
    dirs = d_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    return origins, dirs


def render_view(snap: MapSnapshot, pose: Pose, intrinsics: CameraIntrinsics,
                *, n_strat: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Render the snapshot from a camera: (rgb (H,W,3), plane depth (H,W)).

    `n_strat` overrides the snapshot's per-ray sample count; depth
    resolution is roughly (far - near) / n_strat, so callers that care
    about metric depth accuracy more than speed should raise it.
    """
    origins, dirs = _view_rays(pose, intrinsics)
    out = render_rays(snap.field, snap.occupancy, snap.color, origins, dirs,
                      n_strat=n_strat or snap.config.n_strat,
                      near=snap.near, far=snap.far)
    h, w = intrinsics.height, intrinsics.width
    return out["rgb"].reshape(h, w, 3), out["depth"].reshape(h, w)


def language_view(snap: MapSnapshot, pose: Pose, intrinsics: CameraIntrinsics,
                  *, n_strat: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Fused unit language vector per pixel, read near the rendered surface.

    Returns (features (H, W, D_l) float64, present (H, W) bool). Pixels
    whose surface neighborhood holds no language observations have a zero
    vector and present=False.
    """
    origins, dirs = _view_rays(pose, intrinsics)
    out = render_rays(snap.field, snap.occupancy, snap.color, origins, dirs,
                      n_strat=n_strat or snap.config.n_strat,
                      near=snap.near, far=snap.far)
    feats = []
    present = []
    for chunk in out["chunks"]:
        f, p = render_language(chunk["batch"], chunk["weights"],
                               chunk["depth"], snap.field)
        feats.append(f)
        present.append(p)
    h, w = intrinsics.height, intrinsics.width
    return (np.concatenate(feats).reshape(h, w, -1),
            np.concatenate(present).reshape(h, w))


def relevance_from_features(feats: np.ndarray, present: np.ndarray,
                            query: np.ndarray, threshold: float) -> RelevanceMap:
    """Score a language image against one query embedding.

    Raw relevance is the cosine against the query clamped at zero, then
    min-max normalized across the present pixels so the best response maps
    to 1. A flat response (max == min) keeps its raw values: a query
    orthogonal to everything must yield an all-zero map, not light up.
    """
    q = np.asarray(query, dtype=np.float64)
    n = np.linalg.norm(q)
    if n > 0:
        q = q / n
    raw = np.maximum(feats @ q, 0.0)
    raw[~present] = 0.0
    scores = np.zeros_like(raw)
    if np.any(present):
        lo = raw[present].min()
        hi = raw[present].max()
        if hi > lo:
            scores[present] = (raw[present] - lo) / (hi - lo)
        else:
            scores[present] = raw[present]
    return RelevanceMap(scores=scores, present=present, threshold=threshold)


def render_relevance(snap: MapSnapshot, pose: Pose,
                     intrinsics: CameraIntrinsics, query: np.ndarray,
                     threshold: float | None = None,
                     *, n_strat: int | None = None) -> RelevanceMap:
    """Render one view and score it against one query embedding."""
    if threshold is None:
        threshold = snap.config.tau_rel
    feats, present = language_view(snap, pose, intrinsics, n_strat=n_strat)
    return relevance_from_features(feats, present, query, threshold)
