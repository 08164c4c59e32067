"""Sparse two-level voxel field: geometry features plus language cells.

Storage model:
  * Cells are addressed by signed integer grid indices at level 0 (base
    edge, default 0.16 m) or level 1 (half edge, split children). Level-1
    indices live on the global half-edge lattice, so a parent's children
    are 2*idx + {0,1} per axis.
  * Keys pack (ix, iy, iz, level) into one int64; the canonical cell set
    is a sorted key array with a parallel feature table (row per cell,
    depth features then color features, fused).
  * A dense integer index over the scene bounds accelerates key lookup;
    it is an accelerator only and is rebuilt lazily after mutations.
  * Language cells are sparse side data keyed by packed key; only the
    fusion and rendering paths touch them.

Splitting replaces one level-0 cell with its 8 half-edge children. The
children copy the parent's features (geometry stays continuous at the
instant of the split) and start with no language observations. A split
base key keeps no feature row of its own.

Interpolation is trilinear over the 8 surrounding cell centers at the
point's own level. Corners that fall on a split base resolve to the mean
of that base's 8 children; level-1 corners that fall under an unsplit
neighbor resolve to that neighbor's cell; corners with no cell at all
contribute zeros (the initialization vector).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import sparse

from .scene import SceneBounds

__all__ = [
    "VoxelKey",
    "FeatureCell",
    "ObservationRecord",
    "LanguageCell",
    "SparseVoxelField",
    "pack_keys",
    "unpack_keys",
]

_AXIS_BITS = 20
_AXIS_MASK = (1 << _AXIS_BITS) - 1
_AXIS_OFF = 1 << (_AXIS_BITS - 1)
_SHIFT_X = 2 * _AXIS_BITS + 1
_SHIFT_Y = _AXIS_BITS + 1
_SHIFT_Z = 1

# (8, 3) corner displacement pattern, z fastest
_CORNERS = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)],
                    dtype=np.int64)


def pack_keys(ix, iy, iz, level) -> np.ndarray:
    """Pack signed grid indices and level into sortable int64 keys."""
    ix = np.asarray(ix, dtype=np.int64)
    iy = np.asarray(iy, dtype=np.int64)
    iz = np.asarray(iz, dtype=np.int64)
    for a in (ix, iy, iz):
        if np.any((a < -_AXIS_OFF) | (a >= _AXIS_OFF)):
            raise ValueError("grid index out of packable range")
    lv = np.asarray(level, dtype=np.int64)
    return (((ix + _AXIS_OFF) << _SHIFT_X)
            | ((iy + _AXIS_OFF) << _SHIFT_Y)
            | ((iz + _AXIS_OFF) << _SHIFT_Z)
            | lv)


def unpack_keys(keys) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    k = np.asarray(keys, dtype=np.int64)
    ix = ((k >> _SHIFT_X) & _AXIS_MASK) - _AXIS_OFF
    iy = ((k >> _SHIFT_Y) & _AXIS_MASK) - _AXIS_OFF
    iz = ((k >> _SHIFT_Z) & _AXIS_MASK) - _AXIS_OFF
    return ix, iy, iz, k & 1


@dataclass(frozen=True)
class VoxelKey:
    """One cell address: signed grid indices plus level (0 base, 1 split child)."""

    ix: int
    iy: int
    iz: int
    level: int = 0

    def __post_init__(self):
        if self.level not in (0, 1):
            raise ValueError(f"level must be 0 or 1, got {self.level}")

    def packed(self) -> int:
        return int(pack_keys(self.ix, self.iy, self.iz, self.level))

    @staticmethod
    def from_packed(packed: int) -> "VoxelKey":
        ix, iy, iz, lv = unpack_keys(packed)
        return VoxelKey(int(ix), int(iy), int(iz), int(lv))

    def edge(self, base_edge: float) -> float:
        return base_edge / (2.0 ** self.level)

    def center(self, base_edge: float) -> np.ndarray:
        e = self.edge(base_edge)
        return (np.array([self.ix, self.iy, self.iz], dtype=np.float64) + 0.5) * e

    def parent(self) -> "VoxelKey":
        if self.level != 1:
            raise ValueError("level-0 keys have no parent")
        return VoxelKey(self.ix >> 1, self.iy >> 1, self.iz >> 1, 0)

    def children(self) -> list["VoxelKey"]:
        if self.level != 0:
            raise ValueError("only level-0 keys have children")
        return [VoxelKey(2 * self.ix + dx, 2 * self.iy + dy, 2 * self.iz + dz, 1)
                for dx, dy, dz in _CORNERS]


@dataclass(frozen=True)
class FeatureCell:
    """Read view of one cell's trainable features."""

    depth_feature: np.ndarray
    color_feature: np.ndarray


@dataclass
class ObservationRecord:
    """One fused language observation: unit embedding, mask confidence, weight."""

    embedding: np.ndarray  # (D_l,) float64, unit norm
    confidence: float
    weight: float

    def copy(self) -> "ObservationRecord":
        return ObservationRecord(self.embedding.copy(), self.confidence, self.weight)


@dataclass
class LanguageCell:
    """Per-cell language state: observation queue plus running fused mean.

    `fused` is the weight-weighted mean of every integrated embedding and
    `total_weight` the accumulated weight, maintained incrementally by the
    fusion module.
    """

    records: list[ObservationRecord] = dc_field(default_factory=list)
    fused: np.ndarray | None = None
    total_weight: float = 0.0

    def copy(self) -> "LanguageCell":
        return LanguageCell([r.copy() for r in self.records],
                            None if self.fused is None else self.fused.copy(),
                            self.total_weight)


class SparseVoxelField:
    """Sparse voxel storage with trilinear interpolation and one split level."""

    def __init__(self, bounds: SceneBounds, voxel_edge: float = 0.16,
                 depth_dim: int = 16, color_dim: int = 16, lang_dim: int = 32,
                 dtype=np.float64):
        if voxel_edge <= 0:
            raise ValueError("voxel_edge must be positive")
        self.bounds = bounds
        self.voxel_edge = float(voxel_edge)
        self.depth_dim = int(depth_dim)
        self.color_dim = int(color_dim)
        self.lang_dim = int(lang_dim)
        self.dtype = np.dtype(dtype)
        self.feat_dim = self.depth_dim + self.color_dim

        self._keys = np.empty(0, dtype=np.int64)  # sorted packed keys
        self._feats = np.empty((0, self.feat_dim), dtype=self.dtype)
        self._split = np.empty(0, dtype=np.int64)  # sorted packed level-0 keys
        self._lang: dict[int, LanguageCell] = {}
        self._index_stale = True
        self._dense: list | None = None

    # ---------------------------------------------------------------- basic

    @property
    def n_cells(self) -> int:
        return len(self._keys)

    @property
    def n_split(self) -> int:
        return len(self._split)

    def packed_keys(self) -> np.ndarray:
        return self._keys

    def feature_table(self) -> np.ndarray:
        return self._feats

    def split_keys(self) -> np.ndarray:
        return self._split

    def has_cell(self, key: VoxelKey | int) -> bool:
        p = key.packed() if isinstance(key, VoxelKey) else int(key)
        i = np.searchsorted(self._keys, p)
        return i < len(self._keys) and self._keys[i] == p

    def is_split(self, key: VoxelKey | int) -> bool:
        p = key.packed() if isinstance(key, VoxelKey) else int(key)
        i = np.searchsorted(self._split, p)
        return i < len(self._split) and self._split[i] == p

    # ------------------------------------------------------------ dense index

    def _rebuild_dense(self) -> None:
        edge = self.voxel_edge
        lo = np.floor(self.bounds.min / edge).astype(np.int64) - 2
        hi = np.floor(self.bounds.max / edge).astype(np.int64) + 3
        shape0 = hi - lo
        rows0 = np.full(shape0, -1, dtype=np.int32)
        split0 = np.zeros(shape0, dtype=bool)
        lo1 = 2 * lo
        shape1 = 2 * shape0
        rows1 = np.full(shape1, -1, dtype=np.int32)

        ix, iy, iz, lv = unpack_keys(self._keys)
        m0 = lv == 0
        a = (ix[m0] - lo[0], iy[m0] - lo[1], iz[m0] - lo[2])
        rows0[a] = np.flatnonzero(m0).astype(np.int32)
        m1 = ~m0
        b = (ix[m1] - lo1[0], iy[m1] - lo1[1], iz[m1] - lo1[2])
        rows1[b] = np.flatnonzero(m1).astype(np.int32)

        sx, sy, sz, _ = unpack_keys(self._split)
        split0[(sx - lo[0], sy - lo[1], sz - lo[2])] = True

        self._dense = [lo, rows0, split0, lo1, rows1]
        self._index_stale = False

    def _ensure_dense(self) -> None:
        if self._index_stale or self._dense is None:
            self._rebuild_dense()

    @staticmethod
    def _gather_dense(table: np.ndarray, lo: np.ndarray, idx: np.ndarray,
                      fill):
        """table[idx - lo] with out-of-range triples mapped to `fill`."""
        a0 = idx[..., 0] - lo[0]
        a1 = idx[..., 1] - lo[1]
        a2 = idx[..., 2] - lo[2]
        s0, s1, s2 = table.shape
        ok = ((a0 >= 0) & (a0 < s0) & (a1 >= 0) & (a1 < s1)
              & (a2 >= 0) & (a2 < s2))
        flat = (a0 * s1 + a1) * s2 + a2
        if ok.all():
            return table.reshape(-1)[flat]
        out = table.reshape(-1)[np.where(ok, flat, 0)]
        out[~ok] = fill
        return out

    def _rows_level0(self, idx: np.ndarray) -> np.ndarray:
        """Row per level-0 index triple (..., 3); -1 where absent."""
        self._ensure_dense()
        return self._gather_dense(self._dense[1], self._dense[0], idx, -1)

    def _corner_rows_level0(self, base: np.ndarray) -> np.ndarray:
        """Level-0 rows for all 8 lattice corners of each base triple.

        Equivalent to _rows_level0(base[:, None] + _CORNERS) but shares the
        flat table index across corners: one base offset plus a constant
        per-corner displacement instead of eight full triple lookups.
        """
        self._ensure_dense()
        lo, tab = self._dense[0], self._dense[1]
        s0, s1, s2 = tab.shape
        a = base - lo
        ax, ay, az = a[:, 0], a[:, 1], a[:, 2]
        inside = ((ax >= 0) & (ax < s0 - 1) & (ay >= 0) & (ay < s1 - 1)
                  & (az >= 0) & (az < s2 - 1))
        if inside.all():
            flat = (ax * s1 + ay) * s2 + az
            tab_flat = tab.reshape(-1)
            rows = np.empty((len(a), 8), dtype=tab.dtype)
            for c, (dx, dy, dz) in enumerate(_CORNERS):
                rows[:, c] = tab_flat[flat + int((dx * s1 + dy) * s2 + dz)]
            return rows
        return self._rows_level0(base[:, None, :] + _CORNERS[None, :, :])

    def _rows_level1(self, idx: np.ndarray) -> np.ndarray:
        self._ensure_dense()
        return self._gather_dense(self._dense[4], self._dense[3], idx, -1)

    def _split_mask(self, idx: np.ndarray) -> np.ndarray:
        """Split flag per level-0 index triple (..., 3)."""
        if len(self._split) == 0:
            return np.zeros(np.asarray(idx).shape[:-1], dtype=bool)
        self._ensure_dense()
        return self._gather_dense(self._dense[2], self._dense[0], idx, False)

    # -------------------------------------------------------------- mutation

    def _insert_cells(self, new_packed: np.ndarray, new_feats: np.ndarray | None = None) -> None:
        """Insert cells (unique keys, none already present), keeping sort order."""
        if len(new_packed) == 0:
            return
        if new_feats is None:
            new_feats = np.zeros((len(new_packed), self.feat_dim), dtype=self.dtype)
        order = np.argsort(new_packed, kind="stable")
        new_packed = new_packed[order]
        new_feats = new_feats[order]
        pos = np.searchsorted(self._keys, new_packed)
        self._keys = np.insert(self._keys, pos, new_packed)
        self._feats = np.insert(self._feats, pos, new_feats, axis=0)
        self._index_stale = True

    def _remove_cell(self, packed: int) -> np.ndarray:
        i = int(np.searchsorted(self._keys, packed))
        if i >= len(self._keys) or self._keys[i] != packed:
            raise KeyError(f"no cell for key {packed}")
        feats = self._feats[i].copy()
        self._keys = np.delete(self._keys, i)
        self._feats = np.delete(self._feats, i, axis=0)
        self._index_stale = True
        return feats

    # -------------------------------------------------------------- location

    def _check_bounds(self, point: np.ndarray) -> None:
        if not self.bounds.contains(point):
            raise ValueError(f"point {point} outside scene bounds")

    def cell_at(self, point) -> VoxelKey:
        """Finest-level key containing the point (level 1 if the base is split)."""
        p = np.asarray(point, dtype=np.float64).reshape(3)
        self._check_bounds(p)
        base = np.floor(p / self.voxel_edge).astype(np.int64)
        if self._split_mask(base[None, :])[0]:
            child = np.floor(p / (self.voxel_edge / 2.0)).astype(np.int64)
            return VoxelKey(int(child[0]), int(child[1]), int(child[2]), 1)
        return VoxelKey(int(base[0]), int(base[1]), int(base[2]), 0)

    def cells_at(self, points: np.ndarray) -> np.ndarray:
        """Vectorized cell_at: packed finest-level keys, no bounds validation."""
        pts = np.asarray(points, dtype=np.float64)
        base = np.floor(pts / self.voxel_edge).astype(np.int64)
        split = self._split_mask(base)
        keys = pack_keys(base[..., 0], base[..., 1], base[..., 2], 0)
        if np.any(split):
            child = np.floor(pts[split] / (self.voxel_edge / 2.0)).astype(np.int64)
            keys[split] = pack_keys(child[..., 0], child[..., 1], child[..., 2], 1)
        return keys

    # ---------------------------------------------------------- interpolation

    def _lattice(self, pts: np.ndarray, edge: float) -> tuple[np.ndarray, np.ndarray]:
        """Base corner index and fractional offset on the cell-center lattice."""
        x = pts / edge - 0.5
        f = np.floor(x)
        return f.astype(np.int64), x - f

    def _corner_weights(self, frac: np.ndarray, dtype=np.float64) -> np.ndarray:
        """Trilinear weights (..., 8) for fractional offsets (..., 3),
        ordered like _CORNERS (x outermost, z innermost)."""
        frac = frac.astype(dtype, copy=False)
        fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        w = np.empty(frac.shape[:-1] + (8,), dtype=dtype)
        w[..., 0] = gx * gy * gz
        w[..., 1] = gx * gy * fz
        w[..., 2] = gx * fy * gz
        w[..., 3] = gx * fy * fz
        w[..., 4] = fx * gy * gz
        w[..., 5] = fx * gy * fz
        w[..., 6] = fx * fy * gz
        w[..., 7] = fx * fy * fz
        return w

    def interpolation_gradient(self, point) -> tuple[list[VoxelKey], np.ndarray]:
        """The 8 corner keys at the point's level and their trilinear weights.

        Weights are nonnegative and sum to 1; they are exactly the routing
        used to push loss gradients into cells.
        """
        p = np.asarray(point, dtype=np.float64).reshape(3)
        self._check_bounds(p)
        level = self.cell_at(p).level
        edge = self.voxel_edge / (2.0 ** level)
        base, frac = self._lattice(p[None, :], edge)
        w = self._corner_weights(frac)[0]
        corners = base[0] + _CORNERS
        keys = [VoxelKey(int(c[0]), int(c[1]), int(c[2]), level) for c in corners]
        return keys, w

    def corner_features(self, key: VoxelKey) -> np.ndarray:
        """Resolved feature vector an interpolation corner contributes.

        Level-0 corner on a split base resolves to the mean of the 8
        children; a level-1 corner under an unsplit base resolves to that
        base's cell; absent cells resolve to zeros.
        """
        p = key.packed()
        i = int(np.searchsorted(self._keys, p))
        if i < len(self._keys) and self._keys[i] == p:
            return self._feats[i].astype(np.float64)
        if key.level == 0:
            if self.is_split(key):
                rows = [int(np.searchsorted(self._keys, c.packed())) for c in key.children()]
                return self._feats[rows].astype(np.float64).mean(axis=0)
            return np.zeros(self.feat_dim, dtype=np.float64)
        parent = key.parent()
        q = parent.packed()
        j = int(np.searchsorted(self._keys, q))
        if j < len(self._keys) and self._keys[j] == q:
            return self._feats[j].astype(np.float64)
        return np.zeros(self.feat_dim, dtype=np.float64)

    def interpolate_features(self, point) -> tuple[np.ndarray, np.ndarray]:
        """Trilinear blend at the point's level: (depth features, color features)."""
        keys, w = self.interpolation_gradient(point)
        out = np.zeros(self.feat_dim, dtype=np.float64)
        for k, wi in zip(keys, w):
            out += wi * self.corner_features(k)
        return out[:self.depth_dim], out[self.depth_dim:]

    def ensure_cells(self, points: np.ndarray) -> int:
        """Materialize zero-feature level-0 cells every corner could train.

        Creates the level-0 cell for each interpolation corner that has no
        storable cell yet (split bases excluded; level-1 corners under an
        unsplit base materialize that base). Returns the number created.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return 0
        base0 = np.floor(pts / self.voxel_edge).astype(np.int64)
        split_pt = self._split_mask(base0)

        need = []
        if np.any(~split_pt):
            b, _ = self._lattice(pts[~split_pt], self.voxel_edge)
            corners = (b[:, None, :] + _CORNERS[None, :, :]).reshape(-1, 3)
            need.append(corners)
        if np.any(split_pt):
            b, _ = self._lattice(pts[split_pt], self.voxel_edge / 2.0)
            corners = (b[:, None, :] + _CORNERS[None, :, :]).reshape(-1, 3)
            # floor-divide maps half-edge lattice indices to their base cell
            need.append(corners >> 1)
        idx = np.concatenate(need)
        rows = self._rows_level0(idx)
        if (rows >= 0).all():
            return 0
        missing = (rows < 0) & ~self._split_mask(idx)
        if not missing.any():
            return 0
        idx = idx[missing]
        new = np.unique(pack_keys(idx[:, 0], idx[:, 1], idx[:, 2], 0))
        self._insert_cells(new)
        return int(len(new))

    def interp_operator(self, points: np.ndarray, *,
                        materialize: bool = False) -> sparse.csr_matrix:
        """Sparse trilinear operator M with M @ feature_table == interpolation.

        Rows are points, columns are cells; corner resolution (split fan-out,
        parent fallback, absent-as-zero) is baked into the entries, so M.T
        routes per-point feature gradients back into exactly the cells that
        contributed.

        materialize=True first creates any level-0 cell an interpolation
        corner needs, exactly like ensure_cells(points), sharing the corner
        lookups with the operator assembly.
        """
        pts = np.asarray(points)
        if pts.dtype != np.float32:
            pts = pts.astype(np.float64, copy=False)
        pts = pts.reshape(-1, 3)
        n = len(pts)
        base0 = np.floor(pts / self.voxel_edge).astype(np.int64)
        split_pt = self._split_mask(base0)

        if not split_pt.any():
            # Common case once cells are materialized: every point is in an
            # unsplit region and all 8 corners resolve to level-0 rows, so
            # the matrix has exactly 8 entries per row and can be assembled
            # in CSR form directly, skipping the coordinate-sort.
            b, frac = self._lattice(pts, self.voxel_edge)
            rows = self._corner_rows_level0(b)
            neg = rows < 0
            if neg.any() and materialize:
                corners = b[:, None, :] + _CORNERS[None, :, :]
                cand = corners[neg]
                cand = cand[~self._split_mask(cand)]
                if len(cand):
                    self._insert_cells(np.unique(
                        pack_keys(cand[:, 0], cand[:, 1], cand[:, 2], 0)))
                    rows = self._corner_rows_level0(b)
                    neg = rows < 0
            if not neg.any():
                w = self._corner_weights(frac, self.dtype)
                indptr = np.arange(0, 8 * n + 1, 8, dtype=np.int32)
                return sparse.csr_matrix(
                    (w.reshape(-1), rows.reshape(-1), indptr),
                    shape=(n, max(self.n_cells, 1)))
        elif materialize:
            self.ensure_cells(pts)

        rows_out: list[np.ndarray] = []
        cols_out: list[np.ndarray] = []
        vals_out: list[np.ndarray] = []

        def emit(pt_idx, cols, vals):
            rows_out.append(pt_idx)
            cols_out.append(cols)
            vals_out.append(vals)

        m0 = ~split_pt
        if np.any(m0):
            pidx = np.flatnonzero(m0)
            b, frac = self._lattice(pts[m0], self.voxel_edge)
            w = self._corner_weights(frac)  # (n0, 8)
            corners = b[:, None, :] + _CORNERS[None, :, :]  # (n0, 8, 3)
            rows = self._rows_level0(corners)
            hit = rows >= 0
            if np.any(hit):
                i, j = np.nonzero(hit)
                emit(pidx[i], rows[hit], w[hit])
            fan = (~hit) & self._split_mask(corners)
            if np.any(fan):
                i, j = np.nonzero(fan)
                parents = corners[fan]  # (e, 3)
                kids = 2 * parents[:, None, :] + _CORNERS[None, :, :]  # (e, 8, 3)
                kid_rows = self._rows_level1(kids)
                # split bases always carry all 8 children
                emit(np.repeat(pidx[i], 8), kid_rows.ravel(),
                     np.repeat(w[fan] / 8.0, 8))

        m1 = split_pt
        if np.any(m1):
            pidx = np.flatnonzero(m1)
            b, frac = self._lattice(pts[m1], self.voxel_edge / 2.0)
            w = self._corner_weights(frac)
            corners = b[:, None, :] + _CORNERS[None, :, :]
            rows = self._rows_level1(corners)
            hit = rows >= 0
            if np.any(hit):
                i, j = np.nonzero(hit)
                emit(pidx[i], rows[hit], w[hit])
            miss = ~hit
            if np.any(miss):
                i, j = np.nonzero(miss)
                prow = self._rows_level0(corners[miss] >> 1)
                ok = prow >= 0
                if np.any(ok):
                    emit(pidx[i[ok]], prow[ok], w[miss][ok])

        if rows_out:
            r = np.concatenate(rows_out)
            c = np.concatenate(cols_out)
            v = np.concatenate(vals_out).astype(self.dtype)
        else:
            r = np.empty(0, dtype=np.int64)
            c = np.empty(0, dtype=np.int64)
            v = np.empty(0, dtype=self.dtype)
        return sparse.csr_matrix((v, (r, c)), shape=(n, max(self.n_cells, 1)))

    def interpolate(self, points: np.ndarray) -> np.ndarray:
        """Batch interpolation: (N, depth_dim + color_dim) in the field dtype."""
        if self.n_cells == 0:
            return np.zeros((len(np.atleast_2d(points)), self.feat_dim), dtype=self.dtype)
        return self.interp_operator(points) @ self._feats

    # ------------------------------------------------------------- splitting

    def split_voxel(self, key: VoxelKey | int) -> list[VoxelKey]:
        """Split a level-0 cell into its 8 half-edge children.

        Children copy the parent's features and start with empty language
        state; the parent's feature row and language cell are removed.
        """
        k = key if isinstance(key, VoxelKey) else VoxelKey.from_packed(int(key))
        if k.level != 0:
            raise ValueError("only level-0 cells can be split")
        if self.is_split(k):
            raise ValueError(f"cell {k} is already split")
        p = k.packed()
        if self.has_cell(p):
            parent_feats = self._remove_cell(p)
        else:
            parent_feats = np.zeros(self.feat_dim, dtype=self.dtype)
        children = k.children()
        child_packed = np.array([c.packed() for c in children], dtype=np.int64)
        self._insert_cells(child_packed, np.tile(parent_feats, (8, 1)))
        i = np.searchsorted(self._split, p)
        self._split = np.insert(self._split, i, p)
        self._lang.pop(p, None)
        self._index_stale = True
        return children

    # -------------------------------------------------------------- language

    def language_cell(self, key: VoxelKey | int, create: bool = False) -> LanguageCell | None:
        p = key.packed() if isinstance(key, VoxelKey) else int(key)
        cell = self._lang.get(p)
        if cell is None and create:
            cell = LanguageCell()
            self._lang[p] = cell
        return cell

    def language_cells(self) -> dict[int, LanguageCell]:
        return self._lang

    @property
    def n_language_cells(self) -> int:
        return len(self._lang)

    # ------------------------------------------------------------------ copy

    def clone(self) -> "SparseVoxelField":
        out = SparseVoxelField(self.bounds, self.voxel_edge, self.depth_dim,
                               self.color_dim, self.lang_dim, self.dtype)
        out._keys = self._keys.copy()
        out._feats = self._feats.copy()
        out._split = self._split.copy()
        out._lang = {k: c.copy() for k, c in self._lang.items()}
        return out
