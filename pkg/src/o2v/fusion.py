"""Multi-view language fusion: projecting mask embeddings into voxels.

Every valid-depth pixel covered by an instance mask is one observation of
the voxel its backprojection lands in, carrying the mask embedding f, the
mask confidence c, and weight k = c * scale_weight(rank). Each cell keeps

  * a running weighted mean ``fused`` F and accumulated weight
    ``total_weight`` K, updated as F <- (K F + k f) / (K + k), K <- K + k,
    which makes the final (F, K) independent of observation order; F is a
    convex combination of unit embeddings and is deliberately NOT
    renormalized;
  * a bounded queue of records. An incoming observation merges into the
    best-matching record when their cosine reaches tau_same (the merged
    record embedding is the weight-mean, renormalized back to unit length),
    otherwise it appends; on overflow the record with the smallest
    weight * confidence product is evicted (ties evict the oldest). The
    queue is the per-object evidence used for rendering and diagnostics;
    eviction never rolls K back.

Conflicts are a same-frame phenomenon: when two masks from ONE frame land
observations in the same level-0 cell with cosine below tau_split, the cell
straddles an object boundary, so it is split into its eight children and the
frame's points are re-routed before anything is integrated. Disagreement
across frames is what the running mean exists for and never splits.

With voting disabled (the ablation switch) every observation group simply
overwrites the cell: F := f, K := k, queue := [that record].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .perception import FramePerception
from .scene import RGBDFrame, backproject_pixels
from .voxels import LanguageCell, ObservationRecord, SparseVoxelField, VoxelKey

__all__ = [
    "TAU_SAME",
    "TAU_SPLIT",
    "Q_MAX",
    "SCALE_WEIGHTS",
    "IntegrationReport",
    "scale_weight",
    "batch_fuse",
    "integrate_observation",
    "detect_conflict",
    "dominant_record",
    "integrate_frame",
]

TAU_SAME = 0.95
TAU_SPLIT = 0.85
Q_MAX = 8
SCALE_WEIGHTS = (1.0, 0.6, 0.3)


def scale_weight(scale_rank: int) -> float:
    """Down-weighting per mask scale rank (whole object, part, detail)."""
    return SCALE_WEIGHTS[scale_rank]


@dataclass(frozen=True)
class IntegrationReport:
    """What one frame did to the map's language state."""

    voxels_touched: int
    splits_triggered: int
    observations: int


def batch_fuse(embeddings: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, float]:
    """Closed-form fusion of a whole observation set: the weighted mean and
    total weight that sequential integration converges to."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if embeddings.ndim != 2 or weights.shape != (embeddings.shape[0],):
        raise ValueError("need (n, D) embeddings and (n,) weights")
    if np.any(weights <= 0):
        raise ValueError("weights must be positive")
    total = float(weights.sum())
    return (weights[:, None] * embeddings).sum(axis=0) / total, total


def integrate_observation(cell: LanguageCell, f: np.ndarray, k: float,
                          confidence: float = 1.0, *, tau_same: float = TAU_SAME,
                          q_max: int = Q_MAX, voting: bool = True) -> LanguageCell:
    """Fold one observation (unit embedding f, weight k) into a cell in place."""
    if k <= 0:
        raise ValueError(f"observation weight must be positive, got {k}")
    f = np.asarray(f, dtype=np.float64)

    if not voting:
        cell.fused = f.copy()
        cell.total_weight = float(k)
        cell.records = [ObservationRecord(f.copy(), float(confidence), float(k))]
        return cell

    if cell.fused is None:
        cell.fused = f.copy()
        cell.total_weight = float(k)
    else:
        total = cell.total_weight + k
        cell.fused = (cell.total_weight * cell.fused + k * f) / total
        cell.total_weight = total

    best = -1
    best_cos = -2.0
    for i, rec in enumerate(cell.records):
        c = float(np.dot(rec.embedding, f))
        if c >= tau_same and c > best_cos:
            best = i
            best_cos = c
    if best >= 0:
        rec = cell.records[best]
        total = rec.weight + k
        merged = (rec.weight * rec.embedding + k * f) / total
        norm = np.linalg.norm(merged)
        if norm > 0:
            merged = merged / norm
        cell.records[best] = ObservationRecord(
            merged, (rec.weight * rec.confidence + k * confidence) / total, total)
    else:
        cell.records.append(ObservationRecord(f.copy(), float(confidence), float(k)))
        if len(cell.records) > q_max:
            products = [r.weight * r.confidence for r in cell.records]
            cell.records.pop(int(np.argmin(products)))
    return cell


def detect_conflict(staged: list[np.ndarray], f: np.ndarray,
                    tau_split: float = TAU_SPLIT) -> bool:
    """True iff f disagrees with any already-staged same-frame embedding,
    meaning cosine strictly below tau_split."""
    f = np.asarray(f, dtype=np.float64)
    return any(float(np.dot(np.asarray(s, np.float64), f)) < tau_split
               for s in staged)


def dominant_record(cell: LanguageCell) -> ObservationRecord | None:
    """The queue record with the largest weight * confidence product."""
    if not cell.records:
        return None
    products = [r.weight * r.confidence for r in cell.records]
    return cell.records[int(np.argmax(products))]


@dataclass
class _Staged:
    """One frame's observations of one cell from one mask."""

    embedding: np.ndarray  # float64 unit
    k_total: float
    confidence: float
    points: np.ndarray  # (m, 3) backprojected pixels, for re-routing


def integrate_frame(field: SparseVoxelField, frame: RGBDFrame,
                    perception: FramePerception, *,
                    tau_split: float = TAU_SPLIT, tau_same: float = TAU_SAME,
                    q_max: int = Q_MAX, voting: bool = True,
                    splitting: bool = True) -> IntegrationReport:
    """Project a frame's masks into the field's language cells.

    Pixels sharing one mask and one cell integrate as a single observation
    carrying their summed weight, which equals the per-pixel sequential
    result exactly. Same-frame conflicts split the cell (once; children are
    the finest level) and re-route the points before integration.
    """
    if perception.frame_id != frame.frame_id:
        raise ValueError("perception does not belong to this frame")
    lo = field.bounds.min
    hi = field.bounds.max
    eps = 1e-9 * np.maximum(hi - lo, 1.0)
    valid = frame.valid_depth_mask()

    # stage: packed cell key -> list of per-mask observation groups
    staged: dict[int, list[_Staged]] = {}
    n_obs = 0
    for mask in perception.masks:
        use = mask.bitmap & valid
        if not use.any():
            continue
        vs, us = np.nonzero(use)
        points, ok = backproject_pixels(frame, us, vs)
        points = points[ok]
        if points.size == 0:
            continue
        inside = np.all((points >= lo) & (points <= hi), axis=1)
        points = np.clip(points[inside], lo + eps, hi - eps)
        if points.shape[0] == 0:
            continue
        k_pixel = mask.confidence * scale_weight(mask.scale_rank)
        if k_pixel <= 0.0:
            continue  # weightless observation; nothing to integrate
        emb = mask.embedding.astype(np.float64)
        keys = field.cells_at(points)
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        points = points[order]
        uniq, starts = np.unique(keys, return_index=True)
        bounds_idx = np.append(starts, keys.shape[0])
        for j, key in enumerate(uniq):
            rows = slice(bounds_idx[j], bounds_idx[j + 1])
            m = bounds_idx[j + 1] - bounds_idx[j]
            staged.setdefault(int(key), []).append(_Staged(
                embedding=emb, k_total=float(k_pixel * m),
                confidence=mask.confidence, points=points[rows]))
            n_obs += m

    # split cells where this frame's own masks disagree, then re-route
    splits = 0
    if splitting:
        for packed in list(staged):
            groups = staged[packed]
            if len(groups) < 2:
                continue
            key = VoxelKey.from_packed(packed)
            if key.level != 0 or field.is_split(key):
                continue
            conflict = any(
                float(np.dot(groups[a].embedding, groups[b].embedding)) < tau_split
                for a in range(len(groups)) for b in range(a + 1, len(groups)))
            if not conflict:
                continue
            field.split_voxel(key)
            splits += 1
            groups = staged.pop(packed)
            for g in groups:
                child_keys = field.cells_at(g.points)
                order = np.argsort(child_keys, kind="stable")
                ck = child_keys[order]
                cp = g.points[order]
                uniq, starts = np.unique(ck, return_index=True)
                bounds_idx = np.append(starts, ck.shape[0])
                k_pixel = g.k_total / g.points.shape[0]
                for j, ckey in enumerate(uniq):
                    rows = slice(bounds_idx[j], bounds_idx[j + 1])
                    m = bounds_idx[j + 1] - bounds_idx[j]
                    staged.setdefault(int(ckey), []).append(_Staged(
                        embedding=g.embedding, k_total=float(k_pixel * m),
                        confidence=g.confidence, points=cp[rows]))

    # integrate everything that survived staging
    for packed, groups in staged.items():
        cell = field.language_cell(packed, create=True)
        for g in groups:
            integrate_observation(cell, g.embedding, g.k_total, g.confidence,
                                  tau_same=tau_same, q_max=q_max, voting=voting)
    return IntegrationReport(voxels_touched=len(staged),
                             splits_triggered=splits, observations=n_obs)
