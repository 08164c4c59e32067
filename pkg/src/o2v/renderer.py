"""Volume rendering over the voxel field: sampling, weights, losses, training.

Depth convention inside this module: every per-sample depth d_i is a ray
length (distance along the unit ray direction). Frames store plane depth,
so callers convert with scene.ray_depth_scale at the frame boundary.

Termination weights follow w_i = o_i * prod_{j<i}(1 - o_j). The backward
pass uses the reverse recurrence

    A_k = g_{k+1} o_{k+1} + (1 - o_{k+1}) A_{k+1},   A_N = 0
    dL/do_k = T_k (g_k - A_k)

with T_k the exclusive product and g_k = dL/dw_k, which avoids dividing by
(1 - o_k) and stays finite for fully opaque samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoders import ColorDecoder, OccupancyDecoder
from .scene import RGBDFrame, Ray, SceneBounds, ray_depth_scale
from .voxels import SparseVoxelField

__all__ = [
    "RaySampleBatch",
    "LossReport",
    "StepGradients",
    "sample_ray",
    "sample_rays",
    "termination_weights",
    "termination_weights_backward",
    "render_depth_color",
    "render_language",
    "compute_losses",
    "train_step",
    "AdamTrainer",
    "render_rays",
    "render_rays_refined",
]


@dataclass
class RaySampleBatch:
    """Per-ray sample depths (ray lengths), strictly increasing along axis 1."""

    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3), unit
    depths: np.ndarray  # (R, S)
    hit: np.ndarray  # (R,) bool, False where the ray misses the bounds

    def points(self, dtype=None) -> np.ndarray:
        o, d, u = self.origins, self.depths, self.directions
        if dtype is not None and np.dtype(dtype) != o.dtype:
            dt = np.dtype(dtype)
            o, d, u = o.astype(dt), d.astype(dt), u.astype(dt)
        return o[:, None, :] + d[:, :, None] * u[:, None, :]


@dataclass
class LossReport:
    l_d: float
    l_c: float
    lambda_c: float
    n_rays: int = 0

    @property
    def total(self) -> float:
        return self.l_d + self.lambda_c * self.l_c


def _slab_intersection(origins: np.ndarray, dirs: np.ndarray, bounds: SceneBounds
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Entry/exit ray parameters against the bounds box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_a = (bounds.min - origins) * inv
        t_b = (bounds.max - origins) * inv
    lo = np.fmin(t_a, t_b)
    hi = np.fmax(t_a, t_b)
    # axes with zero direction give nan when the origin sits on the slab
    # plane; fmin/fmax already ignore nan operands
    enter = np.nanmax(lo, axis=-1)
    exit_ = np.nanmin(hi, axis=-1)
    return enter, exit_


def sample_rays(origins: np.ndarray, dirs: np.ndarray, bounds: SceneBounds, *,
                n_strat: int = 32, n_surf: int = 8, near: float = 0.1,
                far: float = 6.0, gt_depth: np.ndarray | None = None,
                surface_window: float = 0.64, rng: np.random.Generator | None = None
                ) -> RaySampleBatch:
    """Stratified samples in [near, far] clipped to the bounds, plus optional
    near-surface samples around gt_depth (ray-length domain), merged sorted.

    With rng=None the stratified samples sit at stratum midpoints, which
    keeps rendering a pure function of its inputs.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = len(origins)
    enter, exit_ = _slab_intersection(origins, dirs, bounds)
    t0 = np.maximum(near, enter)
    t1 = np.minimum(far, exit_)
    hit = t1 > t0
    t0 = np.where(hit, t0, near)
    t1 = np.where(hit, t1, near + 1.0)

    if rng is None:
        jitter = np.full((n, n_strat), 0.5)
    else:
        jitter = rng.random((n, n_strat))
    frac = (np.arange(n_strat) + jitter) / n_strat
    depths = t0[:, None] + (t1 - t0)[:, None] * frac

    if gt_depth is not None and n_surf > 0:
        gt = np.asarray(gt_depth, dtype=np.float64).reshape(n)
        if rng is None:
            offs = np.linspace(-surface_window, surface_window, n_surf)[None, :]
            surf = gt[:, None] + np.broadcast_to(offs, (n, n_surf)).copy()
        else:
            surf = gt[:, None] + rng.uniform(-surface_window, surface_window,
                                             size=(n, n_surf))
        surf = np.clip(surf, t0[:, None], t1[:, None])
        # rays without a depth measurement (sentinel 0) get no surface samples;
        # park them on existing strata so the row shape stays rectangular
        no_gt = gt <= 0
        if np.any(no_gt):
            surf[no_gt] = depths[no_gt, :n_surf] if n_surf <= n_strat else t0[no_gt, None]
        depths = np.concatenate([depths, surf], axis=1)

    depths = np.sort(depths, axis=1)
    for i in range(1, depths.shape[1]):
        np.maximum(depths[:, i], depths[:, i - 1] + 1e-9, out=depths[:, i])
    return RaySampleBatch(origins, dirs, depths, hit)


def sample_ray(ray: Ray, bounds: SceneBounds, gt_depth: float = 0.0,
               **kw) -> RaySampleBatch:
    """Single-ray convenience wrapper; gt_depth 0 means no measurement."""
    gt = None if gt_depth <= 0 else np.array([gt_depth])
    return sample_rays(ray.origin[None, :], ray.direction[None, :], bounds,
                       gt_depth=gt, **kw)


def termination_weights(occupancy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """w_i = o_i * prod_{j<i}(1 - o_j). Returns (weights, exclusive products).

    Transmittance below 1e-30 is flushed to exact zero. Once the cumulative
    product decays that far the samples behind it contribute nothing at any
    tolerance this package tests, but letting the values keep shrinking
    feeds subnormal floats into every downstream multiply, and those run
    orders of magnitude slower on common hardware.
    """
    o = np.asarray(occupancy)
    onem = 1.0 - o
    t_excl = np.ones_like(o)
    np.cumprod(onem[..., :-1], axis=-1, out=t_excl[..., 1:])
    np.copyto(t_excl, 0.0, where=t_excl < 1e-30)
    return o * t_excl, t_excl


def termination_weights_backward(occupancy: np.ndarray, t_excl: np.ndarray,
                                 dw: np.ndarray) -> np.ndarray:
    """dL/do given dL/dw, via the division-free reverse recurrence."""
    o = occupancy
    s = o.shape[-1]
    acc = np.zeros(o.shape[:-1], dtype=dw.dtype)
    out = np.empty_like(dw)
    for k in range(s - 1, -1, -1):
        out[..., k] = t_excl[..., k] * (dw[..., k] - acc)
        if k > 0:
            acc = dw[..., k] * o[..., k] + (1.0 - o[..., k]) * acc
    return out


def render_depth_color(batch: RaySampleBatch, weights: np.ndarray,
                       colors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted sums: depth = sum w_i d_i, rgb = sum w_i c_i (no normalization).

    Each channel reduces over a contiguous product array so the result is
    bit-identical to a per-ray dot product.
    """
    depth = np.sum(weights * batch.depths, axis=-1)
    rgb = np.stack([np.sum(weights * colors[..., ch], axis=-1) for ch in range(3)],
                   axis=-1)
    return depth, rgb


def render_language(batch: RaySampleBatch, weights: np.ndarray,
                    pred_depth: np.ndarray, field: SparseVoxelField,
                    window: float | None = None
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Per-ray fused language vector read from cells near the rendered depth.

    Restricts to samples with |d_i - pred_depth| <= window (default 4 voxel
    edges); each such sample contributes its containing cell's queue, every
    record weighted by the sample's termination weight times the record's
    accumulated weight, averaged over the number of contributing records and
    renormalized to unit length. Returns (vectors (R, D_l), present (R,));
    rows with no contributing observations are zero with present=False.
    """
    if window is None:
        window = 4.0 * field.voxel_edge
    r, s = batch.depths.shape
    out = np.zeros((r, field.lang_dim), dtype=np.float64)
    counts = np.zeros(r, dtype=np.float64)

    near_mask = (np.abs(batch.depths - pred_depth[:, None]) <= window) \
        & batch.hit[:, None] & (weights > 0)
    if not np.any(near_mask):
        return out, counts > 0
    ray_idx, samp_idx = np.nonzero(near_mask)
    pts = batch.points()[ray_idx, samp_idx]
    inside = field.bounds.contains(pts)
    ray_idx, samp_idx, pts = ray_idx[inside], samp_idx[inside], pts[inside]
    if len(pts) == 0:
        return out, counts > 0
    keys = field.cells_at(pts)
    w = weights[ray_idx, samp_idx].astype(np.float64)

    uniq, inv = np.unique(keys, return_inverse=True)
    cell_vec = np.zeros((len(uniq), field.lang_dim), dtype=np.float64)
    cell_n = np.zeros(len(uniq), dtype=np.float64)
    lang = field.language_cells()
    for i, k in enumerate(uniq):
        cell = lang.get(int(k))
        if cell is None or not cell.records:
            continue
        for rec in cell.records:
            cell_vec[i] += rec.weight * rec.embedding
        cell_n[i] = len(cell.records)

    contrib = w[:, None] * cell_vec[inv]
    for d in range(field.lang_dim):
        out[:, d] = np.bincount(ray_idx, weights=contrib[:, d], minlength=r)
    counts = np.bincount(ray_idx, weights=cell_n[inv], minlength=r)

    present = counts > 0
    out[present] /= counts[present, None]
    norms = np.linalg.norm(out, axis=1)
    nz = norms > 0
    out[nz] /= norms[nz, None]
    present &= nz
    out[~present] = 0.0
    return out, present


def compute_losses(pred_depth: np.ndarray, gt_depth: np.ndarray,
                   pred_rgb: np.ndarray, gt_rgb: np.ndarray,
                   lambda_c: float = 0.2,
                   valid: np.ndarray | None = None) -> LossReport:
    """Mean squared errors over the sampled pixels (Eq 4 form).

    Color error is the squared RGB vector norm per pixel. Pixels with an
    invalid depth measurement (valid=False) are excluded from the depth
    term only.
    """
    m = len(np.atleast_1d(pred_depth))
    if m == 0:
        raise ValueError("loss needs at least one pixel")
    if valid is None:
        valid = np.ones(m, dtype=bool)
    nv = int(valid.sum())
    l_d = float(np.square(pred_depth[valid] - gt_depth[valid]).sum() / nv) if nv else 0.0
    l_c = float(np.square(pred_rgb - gt_rgb).sum() / m)
    return LossReport(l_d, l_c, lambda_c, n_rays=m)


def _frame_rays(frame: RGBDFrame, us: np.ndarray, vs: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World rays through the given pixels: (origins, unit dirs, plane->ray scale)."""
    k = frame.intrinsics
    x = (us - k.cx) / k.fx
    y = (vs - k.cy) / k.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    scale = np.linalg.norm(d_cam, axis=-1)
    d_world = d_cam @ frame.pose.rotation.T
    d_world /= scale[:, None]
    origins = np.broadcast_to(frame.pose.translation, d_world.shape)
    return origins, d_world, scale


@dataclass
class StepGradients:
    """Loss gradients for one sampled batch: the full cell table plus each
    decoder's parameter list, in the layout the multilayer perceptron's
    backward pass returns them."""

    cells: np.ndarray  # (n_cells, depth_dim + color_dim)
    occ_weights: list[np.ndarray]
    occ_biases: list[np.ndarray]
    col_weights: list[np.ndarray]
    col_biases: list[np.ndarray]


def _sample_frame_batch(field, frame, *, n_pixels, n_strat, n_surf, near, far,
                        rng, valid_idx):
    """Pick training pixels, build their world rays and sample depths."""
    k = frame.intrinsics
    if valid_idx is None:
        valid_idx = np.flatnonzero(frame.depth.reshape(-1) > 0)
    if len(valid_idx) == 0:
        raise ValueError("frame has no valid depth")
    take = min(n_pixels, len(valid_idx))
    pix = rng.choice(valid_idx, size=take, replace=len(valid_idx) < n_pixels)
    us = (pix % k.width).astype(np.float64)
    vs = (pix // k.width).astype(np.float64)

    origins, dirs, scale = _frame_rays(frame, us, vs)
    gt_plane = frame.depth.reshape(-1)[pix].astype(np.float64)
    gt_ray = gt_plane * scale
    gt_rgb = frame.rgb.reshape(-1, 3)[pix].astype(np.float64)

    batch = sample_rays(origins, dirs, field.bounds, n_strat=n_strat,
                        n_surf=n_surf, near=near, far=far, gt_depth=gt_ray,
                        surface_window=4.0 * field.voxel_edge, rng=rng)
    return batch, gt_ray, gt_rgb


def train_step(field: SparseVoxelField, occ_dec: OccupancyDecoder,
               col_dec: ColorDecoder, frame: RGBDFrame, *,
               n_pixels: int = 1024, n_strat: int = 32, n_surf: int = 8,
               near: float = 0.1, far: float = 6.0, lambda_c: float = 0.2,
               lr_feat: float = 0.1, lr_mlp: float = 1e-3,
               rng: np.random.Generator, valid_idx: np.ndarray | None = None,
               update: bool = True) -> LossReport:
    """One joint gradient step on decoder params and touched feature cells.

    Samples n_pixels uniformly over valid-depth pixels, renders them, and
    applies plain gradient descent (per-group learning rates). Returns the
    losses measured before the update. update=False reports losses and
    gradients' side effects (cell materialization) without changing any
    parameter, which the finite-difference checks rely on.
    """
    batch, gt_ray, gt_rgb = _sample_frame_batch(
        field, frame, n_pixels=n_pixels, n_strat=n_strat, n_surf=n_surf,
        near=near, far=far, rng=rng, valid_idx=valid_idx)
    report, grads = _gradients_on_batch(field, occ_dec, col_dec, batch,
                                        gt_ray, gt_rgb, lambda_c=lambda_c,
                                        want_grads=update)
    if grads is None:
        return report

    field.feature_table()[:] -= lr_feat * grads.cells
    for mlp, dws, dbs in ((occ_dec.mlp, grads.occ_weights, grads.occ_biases),
                          (col_dec.mlp, grads.col_weights, grads.col_biases)):
        for wm, g in zip(mlp.weights, dws):
            wm -= lr_mlp * g
        for bm, g in zip(mlp.biases, dbs):
            bm -= lr_mlp * g
    return report


def _gradients_on_batch(field, occ_dec, col_dec, batch, gt_ray, gt_rgb, *,
                        lambda_c, want_grads=True
                        ) -> tuple[LossReport, StepGradients | None]:
    """Render the batch, measure losses, and (optionally) backpropagate.

    Materializes any missing cells the samples touch as a side effect of
    building the interpolation operator, so the returned cell gradient is
    shaped for the field as it is afterwards.
    """
    r, s = batch.depths.shape
    lo = (field.bounds.min + 1e-9).astype(field.dtype)
    hi = (field.bounds.max - 1e-9).astype(field.dtype)
    pts = batch.points(dtype=field.dtype).reshape(-1, 3)
    np.clip(pts, lo, hi, out=pts)
    op = field.interp_operator(pts, materialize=True)
    feats = op @ field.feature_table()
    dd = field.depth_dim

    enc = occ_dec.encoder.encode(pts, dtype=field.dtype)
    o_flat, ctx_o = occ_dec.forward_encoded(enc, feats[:, :dd])
    c_flat, ctx_c = col_dec.forward_encoded(enc, feats[:, dd:])
    o = o_flat.reshape(r, s)
    colors = c_flat.reshape(r, s, 3)

    w, t_excl = termination_weights(o)
    pred_depth, pred_rgb = render_depth_color(batch, w, colors)

    live = batch.hit
    report = compute_losses(pred_depth[live], gt_ray[live],
                            pred_rgb[live], gt_rgb[live], lambda_c)
    if not want_grads:
        return report, None

    n_live = max(int(live.sum()), 1)
    d_depth = np.where(live, 2.0 * (pred_depth - gt_ray) / n_live, 0.0)
    d_rgb = lambda_c * 2.0 * (pred_rgb - gt_rgb) / n_live
    d_rgb[~live] = 0.0

    dw = (d_depth[:, None] * batch.depths
          + np.einsum("rc,rsc->rs", d_rgb, colors))
    d_colors = w[:, :, None] * d_rgb[:, None, :]
    do = termination_weights_backward(o, t_excl, dw.astype(field.dtype))

    dphi_d, dws_o, dbs_o = occ_dec.backward(ctx_o, do.reshape(-1, 1))
    dphi_c, dws_c, dbs_c = col_dec.backward(ctx_c, d_colors.reshape(-1, 3))
    dfeats = np.concatenate([dphi_d, dphi_c], axis=1)
    grad_cells = op.T @ dfeats
    return report, StepGradients(grad_cells, dws_o, dbs_o, dws_c, dbs_c)


class AdamTrainer:
    """Adaptive-moment updates behind the same sampling and gradients as
    train_step.

    Plain descent needs thousands of sweeps to push signal through the
    small-weight decoder layers; per-parameter step normalization gets the
    same loss down in a few hundred. First and second moments are kept for
    every decoder parameter and every feature cell. Cell moments follow the
    cell table: rows added since the last step start at zero moment, rows
    removed (a voxel split replaces the parent with its children) drop
    theirs.
    """

    def __init__(self, field: SparseVoxelField, occ_dec: OccupancyDecoder,
                 col_dec: ColorDecoder, *, lr_feat: float = 1e-2,
                 lr_mlp: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.field = field
        self.occ_dec = occ_dec
        self.col_dec = col_dec
        self.lr_feat = float(lr_feat)
        self.lr_mlp = float(lr_mlp)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._t = 0
        # the trainer is these decoders' only caller, so buffer reuse is safe
        occ_dec.mlp.enable_scratch()
        col_dec.mlp.enable_scratch()
        self._cell_keys = field.packed_keys().copy()
        table = field.feature_table()
        self._cell_m = np.zeros_like(table)
        self._cell_v = np.zeros_like(table)
        self._mlp_state: list[tuple[np.ndarray, np.ndarray]] = [
            (np.zeros_like(p), np.zeros_like(p)) for p in self._mlp_params()]

    def _mlp_params(self) -> list[np.ndarray]:
        return (self.occ_dec.mlp.weights + self.occ_dec.mlp.biases
                + self.col_dec.mlp.weights + self.col_dec.mlp.biases)

    def _sync_cells(self) -> None:
        """Carry cell moments over to the current cell table layout."""
        keys = self.field.packed_keys()
        if len(keys) == len(self._cell_keys) and np.array_equal(keys, self._cell_keys):
            return
        m = np.zeros((len(keys), self._cell_m.shape[1]), dtype=self._cell_m.dtype)
        v = np.zeros_like(m)
        if len(keys) and len(self._cell_keys):
            pos = np.searchsorted(keys, self._cell_keys)
            pos_c = np.minimum(pos, len(keys) - 1)
            kept = keys[pos_c] == self._cell_keys
            m[pos_c[kept]] = self._cell_m[kept]
            v[pos_c[kept]] = self._cell_v[kept]
        self._cell_keys = keys.copy()
        self._cell_m, self._cell_v = m, v

    def _apply(self, param: np.ndarray, grad: np.ndarray,
               m: np.ndarray, v: np.ndarray, lr: float) -> None:
        b1, b2 = self.beta1, self.beta2
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * np.square(grad)
        scale = lr / (1.0 - b1 ** self._t)
        denom = np.sqrt(v / (1.0 - b2 ** self._t))
        denom += self.eps
        param -= scale * m / denom

    def _apply_cells(self, grad: np.ndarray) -> None:
        """Moment update restricted to rows with a nonzero gradient.

        Cells outside the sampled view keep their features and moments
        untouched (no momentum drift into unobserved space), and the cost
        per step stays proportional to the touched set, not the map. Bias
        correction uses the global step count, as sparse-gradient moment
        optimizers conventionally do.
        """
        rows = np.flatnonzero(grad.any(axis=1))
        if len(rows) == 0:
            return
        b1, b2 = self.beta1, self.beta2
        g = grad[rows]
        m = self._cell_m[rows]
        v = self._cell_v[rows]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        # repeated decay walks stale moments into the subnormal range, where
        # later arithmetic on them is drastically slower; flush to zero
        np.copyto(m, 0.0, where=np.abs(m) < 1e-35)
        np.copyto(v, 0.0, where=v < 1e-35)
        self._cell_m[rows] = m
        self._cell_v[rows] = v
        scale = self.lr_feat / (1.0 - b1 ** self._t)
        denom = np.sqrt(v / (1.0 - b2 ** self._t))
        denom += self.eps
        self.field.feature_table()[rows] -= scale * m / denom

    def step(self, frame: RGBDFrame, *, n_pixels: int = 1024,
             n_strat: int = 32, n_surf: int = 8, near: float = 0.1,
             far: float = 6.0, lambda_c: float = 0.2,
             rng: np.random.Generator,
             valid_idx: np.ndarray | None = None) -> LossReport:
        batch, gt_ray, gt_rgb = _sample_frame_batch(
            self.field, frame, n_pixels=n_pixels, n_strat=n_strat,
            n_surf=n_surf, near=near, far=far, rng=rng, valid_idx=valid_idx)
        report, grads = _gradients_on_batch(
            self.field, self.occ_dec, self.col_dec, batch, gt_ray, gt_rgb,
            lambda_c=lambda_c)
        self._t += 1
        self._sync_cells()
        self._apply_cells(grads.cells)
        grad_list = (grads.occ_weights + grads.occ_biases
                     + grads.col_weights + grads.col_biases)
        for p, g, (m, v) in zip(self._mlp_params(), grad_list, self._mlp_state):
            self._apply(p, g, m, v, self.lr_mlp)
        return report


def render_rays(field: SparseVoxelField, occ_dec: OccupancyDecoder,
                col_dec: ColorDecoder, origins: np.ndarray, dirs: np.ndarray, *,
                n_strat: int = 32, near: float = 0.1, far: float = 6.0,
                chunk: int = 4096) -> dict:
    """Deterministic inference rendering (midpoint strata, no surface samples).

    Returns dict with ray-length 'depth', 'rgb', 'weights', 'batch' lists
    concatenated over chunks.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    outs: list[dict] = []
    for i in range(0, len(origins), chunk):
        batch = sample_rays(origins[i:i + chunk], dirs[i:i + chunk], field.bounds,
                            n_strat=n_strat, n_surf=0, near=near, far=far, rng=None)
        pts = batch.points(dtype=field.dtype).reshape(-1, 3)
        np.clip(pts, (field.bounds.min + 1e-9).astype(field.dtype),
                (field.bounds.max - 1e-9).astype(field.dtype), out=pts)
        feats = field.interpolate(pts)
        dd = field.depth_dim
        enc = occ_dec.encoder.encode(pts, dtype=field.dtype)
        o = occ_dec.forward_encoded(enc, feats[:, :dd])[0].reshape(batch.depths.shape)
        c = col_dec.forward_encoded(enc, feats[:, dd:])[0].reshape(*batch.depths.shape, 3)
        w, _ = termination_weights(o)
        depth, rgb = render_depth_color(batch, w, c)
        outs.append({"depth": depth, "rgb": rgb, "weights": w, "batch": batch})
    return {
        "depth": np.concatenate([o["depth"] for o in outs]),
        "rgb": np.concatenate([o["rgb"] for o in outs]),
        "chunks": outs,
    }


def _batch_occupancy_color(field: SparseVoxelField, occ_dec: OccupancyDecoder,
                           col_dec: ColorDecoder | None, batch: RaySampleBatch,
                           coverage: str) -> tuple[np.ndarray, np.ndarray | None]:
    """Decode occupancy (and optionally color) for every sample of a batch.

    coverage controls what happens in space no training ray ever
    materialized, where interpolation has no live corners and the decoder
    sees a zero feature vector:
      "hard": occupancy forced to 0 where all 8 corners are absent. The
              field holds no evidence there; letting the decoder bias
              invent matter puts phantom surfaces in front of novel views.
      "soft": occupancy scaled by the live fraction of trilinear weight,
              which also fades the partially-backed border cells.
      "off":  decoder output used everywhere as-is.
    """
    pts = batch.points(dtype=field.dtype).reshape(-1, 3)
    np.clip(pts, (field.bounds.min + 1e-9).astype(field.dtype),
            (field.bounds.max - 1e-9).astype(field.dtype), out=pts)
    if field.n_cells == 0:
        feats = np.zeros((len(pts), field.depth_dim + field.color_dim),
                         dtype=field.dtype)
        live = np.zeros(len(pts), dtype=field.dtype)
    else:
        op = field.interp_operator(pts)
        feats = op @ field.feature_table()
        live = np.asarray(op.sum(axis=1)).ravel()
    dd = field.depth_dim
    enc = occ_dec.encoder.encode(pts, dtype=field.dtype)
    o = occ_dec.forward_encoded(enc, feats[:, :dd])[0][:, 0]
    if coverage == "hard":
        o = o * (live > 0)
    elif coverage == "soft":
        o = o * np.clip(live, 0.0, 1.0)
    elif coverage != "off":
        raise ValueError(f"unknown coverage mode {coverage!r}")
    o = o.reshape(batch.depths.shape)
    c = None
    if col_dec is not None:
        c = col_dec.forward_encoded(enc, feats[:, dd:])[0]
        c = c.reshape(*batch.depths.shape, 3)
    return o, c


def render_rays_refined(field: SparseVoxelField, occ_dec: OccupancyDecoder,
                        col_dec: ColorDecoder, origins: np.ndarray,
                        dirs: np.ndarray, *, n_strat: int = 32,
                        n_surf: int = 8, near: float = 0.1, far: float = 6.0,
                        chunk: int = 4096, coverage: str = "hard") -> dict:
    """Two-pass inference rendering that mirrors the training sample layout.

    The occupancy field is calibrated to the per-meter sampling rate it was
    trained at: termination probability applies per sample, so rendering
    the same field with denser samples attenuates rays faster (depth
    collapses toward the camera) and sparser sampling lets them overshoot.
    Training rays carry n_strat stratified samples plus n_surf samples
    packed around the measured depth; at inference the measurement does not
    exist, so a stratified-only pass locates the surface first and a second
    pass re-renders with the near-surface samples laid around that
    estimate. Rays whose first pass finds nothing (predicted depth 0 or
    out of range) keep their stratified layout.

    Returns the same dict shape as render_rays.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    window = 4.0 * field.voxel_edge
    outs: list[dict] = []
    for i in range(0, len(origins), chunk):
        o_chunk = origins[i:i + chunk]
        d_chunk = dirs[i:i + chunk]
        coarse = sample_rays(o_chunk, d_chunk, field.bounds, n_strat=n_strat,
                             n_surf=0, near=near, far=far, rng=None)
        occ1, _ = _batch_occupancy_color(field, occ_dec, None, coarse, coverage)
        w1, _ = termination_weights(occ1)
        guess = np.sum(w1 * coarse.depths, axis=-1)
        # a guess below near means the coarse pass never terminated; the
        # sentinel 0 path inside sample_rays then skips surface samples
        guess = np.where(guess >= near, guess, 0.0)
        batch = sample_rays(o_chunk, d_chunk, field.bounds, n_strat=n_strat,
                            n_surf=n_surf, near=near, far=far,
                            gt_depth=guess, surface_window=window, rng=None)
        occ, col = _batch_occupancy_color(field, occ_dec, col_dec, batch,
                                          coverage)
        w, _ = termination_weights(occ)
        depth, rgb = render_depth_color(batch, w, col)
        outs.append({"depth": depth, "rgb": rgb, "weights": w, "batch": batch})
    return {
        "depth": np.concatenate([o["depth"] for o in outs]),
        "rgb": np.concatenate([o["rgb"] for o in outs]),
        "chunks": outs,
    }
