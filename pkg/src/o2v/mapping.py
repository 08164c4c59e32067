"""Online mapper: the per-frame loop tying training, fusion, and retrieval.

For every incoming RGBD frame the mapper runs a fixed number of gradient
steps on the voxel features and decoders, folds the frame's segmentation
masks into per-cell language state, registers each mask with the instance
retrieval index, and publishes an immutable snapshot. Readers (queries,
renderers, the network service) only ever touch snapshots, so a long
training step can never expose them to half-updated state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import MapConfig
from .decoders import ColorDecoder, OccupancyDecoder, PositionalEncoder
from .fusion import IntegrationReport, integrate_frame, scale_weight
from .perception import FramePerception
from .renderer import AdamTrainer, LossReport, train_step
from .retrieval import RetrievalMap
from .scene import RGBDFrame, SceneBounds, backproject_pixels, ray_depth_scale
from .snapshot import MapSnapshot
from .voxels import SparseVoxelField

__all__ = ["FrameReport", "Mapper"]

BOUNDS_MARGIN_CELLS = 2.0


@dataclass(frozen=True)
class FrameReport:
    """What one integrated frame did to the map."""

    frame_id: int
    loss: LossReport | None
    fusion: IntegrationReport | None
    instances_registered: int


class Mapper:
    """Builds a scene map online from posed RGBD frames.

    `bounds` is the working volume the frames observe (for a synthetic
    scene, the room box). The field is padded by a margin of voxels so
    trilinear interpolation at the boundary surfaces still has a full
    corner neighborhood.
    """

    def __init__(self, bounds: SceneBounds, config: MapConfig | None = None,
                 *, dtype=np.float32):
        config = config if config is not None else MapConfig()
        margin = BOUNDS_MARGIN_CELLS * config.voxel_edge
        self.bounds = SceneBounds(bounds.min - margin, bounds.max + margin)
        self.config = config
        self.near = config.near
        diag = float(np.linalg.norm(self.bounds.max - self.bounds.min))
        self.far = config.far if config.far > 0 else diag

        self.field = SparseVoxelField(self.bounds, config.voxel_edge,
                                      config.depth_dim, config.color_dim,
                                      config.lang_dim, dtype)
        encoder = PositionalEncoder(bounds=self.bounds)
        self.occupancy = OccupancyDecoder(encoder, config.depth_dim,
                                          seed=config.seed, dtype=dtype)
        self.color = ColorDecoder(encoder, config.color_dim,
                                  seed=config.seed + 1, dtype=dtype)
        self.retrieval = RetrievalMap(alpha=config.alpha)
        self.rng = np.random.default_rng(config.seed)
        self.trainer = (AdamTrainer(self.field, self.occupancy, self.color)
                        if config.optimizer == "adam" else None)
        self.frames_integrated = 0
        self._snapshot = self._publish()

    # ------------------------------------------------------------- snapshots

    def _publish(self) -> MapSnapshot:
        snap = MapSnapshot(self.field.clone(), self.occupancy.clone(),
                           self.color.clone(), self.retrieval.clone(),
                           self.config, self.frames_integrated,
                           self.near, self.far)
        self._snapshot = snap
        return snap

    def snapshot(self) -> MapSnapshot:
        """Latest published snapshot. Never mutated after publication."""
        return self._snapshot

    # ------------------------------------------------------------ frame loop

    def _trainable_pixels(self, frame: RGBDFrame) -> np.ndarray:
        """Flat indices of pixels the training loss can supervise.

        Invalid depth (0) carries no surface. A pixel whose ray-length
        depth lands beyond the far plane is also dropped: samples stop at
        `far`, so its loss would push occupancy toward a surface the
        renderer cannot reach.
        """
        k = frame.intrinsics
        depth = frame.depth.reshape(-1).astype(np.float64)
        us, vs = np.meshgrid(np.arange(k.width, dtype=np.float64),
                             np.arange(k.height, dtype=np.float64))
        scale = ray_depth_scale(k, us.reshape(-1), vs.reshape(-1))
        return np.flatnonzero((depth > 0) & (depth * scale <= self.far))

    def integrate(self, frame: RGBDFrame,
                  perception: FramePerception | None = None,
                  *, steps: int | None = None) -> FrameReport:
        """Train on one frame, fuse its masks, and publish a snapshot.

        `steps` overrides config.steps_per_frame (0 skips training, which
        the language-only replay paths use). Returns the last training
        loss plus fusion and registration counts.
        """
        cfg = self.config
        n_steps = cfg.steps_per_frame if steps is None else steps
        valid_idx = self._trainable_pixels(frame)
        if len(valid_idx) == 0:
            n_steps = 0  # nothing the loss can see; keep fusion going
        loss = None
        for _ in range(n_steps):
            if self.trainer is not None:
                loss = self.trainer.step(frame, n_pixels=cfg.n_pixels,
                                         n_strat=cfg.n_strat, n_surf=cfg.n_surf,
                                         near=self.near, far=self.far,
                                         lambda_c=cfg.lambda_c, rng=self.rng,
                                         valid_idx=valid_idx)
            else:
                loss = train_step(self.field, self.occupancy, self.color, frame,
                                  n_pixels=cfg.n_pixels, n_strat=cfg.n_strat,
                                  n_surf=cfg.n_surf, near=self.near, far=self.far,
                                  lambda_c=cfg.lambda_c, lr_feat=cfg.lr_feat,
                                  lr_mlp=cfg.lr_mlp, rng=self.rng,
                                  valid_idx=valid_idx)
        fusion_report = None
        registered = 0
        if perception is not None:
            fusion_report = integrate_frame(
                self.field, frame, perception, tau_split=cfg.tau_split,
                tau_same=cfg.tau_same, q_max=cfg.q_max,
                voting=cfg.voting, splitting=cfg.splitting)
            registered = self._register_instances(frame, perception)
        self.frames_integrated += 1
        self._publish()
        return FrameReport(frame.frame_id, loss, fusion_report, registered)

    def _register_instances(self, frame: RGBDFrame,
                            perception: FramePerception) -> int:
        """Register each mask with the retrieval index: unit embedding,
        world centroid of its valid in-bounds pixels, scale-weighted
        confidence as weight, touched-cell count as footprint."""
        valid = frame.valid_depth_mask()
        eps = 1e-9 * (self.bounds.max - self.bounds.min)
        lo, hi = self.bounds.min + eps, self.bounds.max - eps
        count = 0
        for mask in perception.masks:
            use = mask.bitmap & valid
            if not use.any():
                continue
            vs, us = np.nonzero(use)
            pts, ok = backproject_pixels(frame, us, vs)
            pts = pts[ok]
            pts = pts[self.bounds.contains(pts)]
            if len(pts) == 0:
                continue
            centroid = pts.mean(axis=0)
            cells = np.unique(self.field.cells_at(np.clip(pts, lo, hi)))
            emb = np.asarray(mask.embedding, dtype=np.float64)
            emb = emb / np.linalg.norm(emb)
            k = mask.confidence * scale_weight(mask.scale_rank)
            if k <= 0:
                continue
            self.retrieval.register_instance(emb, centroid, k,
                                             voxel_count=len(cells))
            count += 1
        return count
