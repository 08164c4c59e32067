"""Immutable map snapshots and their on-disk container format.

A MapSnapshot bundles everything a reader needs to render or query the map
at one instant: the voxel field (geometry features plus per-cell language
state), both decoder networks, the instance retrieval index, and the config
the map was built with. The mapper publishes a fresh snapshot after every
integrated frame; readers hold a reference and are never affected by later
training steps.

The file container ("O2VM") is a little-endian sectioned binary. Each
section is tagged and length-prefixed so a truncated or corrupted file
fails loudly instead of yielding a half-loaded map. Arrays are stored in
their native dtype, which makes a save/load round trip bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import MapConfig, config_to_text, parse_config
from .decoders import ColorDecoder, Mlp, OccupancyDecoder, PositionalEncoder
from .imageio import ByteReader, FormatError
from .retrieval import InstanceEntry, RetrievalMap
from .scene import SceneBounds
from .voxels import LanguageCell, ObservationRecord, SparseVoxelField

__all__ = ["MapSnapshot", "save_map", "load_map", "map_equal"]

MAP_MAGIC = b"O2VM"
MAP_VERSION = 1

_SECTION_TAGS = (b"META", b"BNDS", b"DIMS", b"VOXL", b"LANG", b"DECO", b"RETR")

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class MapSnapshot:
    """One consistent, read-only view of the map.

    `version` counts frames integrated when the snapshot was published, so
    readers can tell snapshots apart and order them.
    """

    field: SparseVoxelField
    occupancy: OccupancyDecoder
    color: ColorDecoder
    retrieval: RetrievalMap
    config: MapConfig
    version: int
    near: float
    far: float

    def __post_init__(self):
        if self.occupancy.feat_dim != self.field.depth_dim:
            raise ValueError("occupancy decoder width does not match field")
        if self.color.feat_dim != self.field.color_dim:
            raise ValueError("color decoder width does not match field")
        if self.occupancy.encoder.bands != self.color.encoder.bands:
            raise ValueError("decoders disagree on encoding bands")
        if not self.near < self.far:
            raise ValueError(f"near {self.near} must be below far {self.far}")
        for entry in self.retrieval.entries:
            if entry.embedding.shape[0] != self.field.lang_dim:
                raise ValueError("retrieval entry dim does not match field")

    @property
    def lang_dim(self) -> int:
        return self.field.lang_dim


def _dtype_code(dtype) -> int:
    dt = np.dtype(dtype).newbyteorder("<")
    try:
        return _DTYPE_CODES[dt]
    except KeyError:
        raise ValueError(f"unsupported array dtype {dtype}") from None


def _array_bytes(arr: np.ndarray) -> bytes:
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return np.ascontiguousarray(le).tobytes()


def _pack_meta(snap: MapSnapshot) -> bytes:
    text = config_to_text(snap.config).encode("utf-8")
    return struct.pack("<QddI", snap.version, snap.near, snap.far,
                       len(text)) + text


def _pack_bounds(snap: MapSnapshot) -> bytes:
    b = snap.field.bounds
    return struct.pack("<6d", *b.min, *b.max)


def _pack_dims(snap: MapSnapshot) -> bytes:
    f = snap.field
    return struct.pack("<IIIIBd", f.depth_dim, f.color_dim, f.lang_dim,
                       snap.occupancy.encoder.bands, _dtype_code(f.dtype),
                       f.voxel_edge)


def _pack_voxels(snap: MapSnapshot) -> bytes:
    f = snap.field
    keys = f.packed_keys()
    split = f.split_keys()
    parts = [struct.pack("<Q", len(keys)), _array_bytes(keys),
             _array_bytes(f.feature_table()),
             struct.pack("<Q", len(split)), _array_bytes(split)]
    return b"".join(parts)


def _pack_language(snap: MapSnapshot) -> bytes:
    cells = snap.field.language_cells()
    parts = [struct.pack("<Q", len(cells))]
    for key in sorted(cells):
        cell = cells[key]
        parts.append(struct.pack("<qB", key, 0 if cell.fused is None else 1))
        if cell.fused is not None:
            parts.append(_array_bytes(np.asarray(cell.fused, dtype=np.float64)))
        parts.append(struct.pack("<dI", cell.total_weight, len(cell.records)))
        for rec in cell.records:
            parts.append(_array_bytes(np.asarray(rec.embedding, dtype=np.float64)))
            parts.append(struct.pack("<dd", rec.confidence, rec.weight))
    return b"".join(parts)


def _pack_mlp(mlp: Mlp) -> bytes:
    arrays = mlp.params()
    parts = [struct.pack("<I", len(arrays))]
    for arr in arrays:
        parts.append(struct.pack("<BB", _dtype_code(arr.dtype), arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(_array_bytes(arr))
    return b"".join(parts)


def _pack_retrieval(snap: MapSnapshot) -> bytes:
    r = snap.retrieval
    parts = [struct.pack("<ddQQ", r.alpha, r.eps_dist, r._next_id,
                         len(r.entries))]
    for e in r.entries:
        parts.append(struct.pack("<Q", e.id))
        parts.append(_array_bytes(np.asarray(e.embedding, dtype=np.float64)))
        parts.append(_array_bytes(np.asarray(e.center, dtype=np.float64)))
        parts.append(struct.pack("<dQ", e.weight, e.voxel_count))
    return b"".join(parts)


def save_map(snapshot: MapSnapshot, path) -> None:
    """Write a snapshot to `path` in the sectioned map container format."""
    sections = [
        (b"META", _pack_meta(snapshot)),
        (b"BNDS", _pack_bounds(snapshot)),
        (b"DIMS", _pack_dims(snapshot)),
        (b"VOXL", _pack_voxels(snapshot)),
        (b"LANG", _pack_language(snapshot)),
        (b"DECO", _pack_mlp(snapshot.occupancy.mlp) + _pack_mlp(snapshot.color.mlp)),
        (b"RETR", _pack_retrieval(snapshot)),
    ]
    with open(path, "wb") as f:
        f.write(MAP_MAGIC)
        f.write(struct.pack("<II", MAP_VERSION, len(sections)))
        for tag, payload in sections:
            f.write(tag)
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


def _read_mlp(r: ByteReader) -> list[np.ndarray]:
    (n_arrays,) = r.unpack("<I")
    arrays = []
    for _ in range(n_arrays):
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown array dtype code {code}")
        if ndim < 1 or ndim > 2:
            raise FormatError(f"implausible parameter rank {ndim}")
        shape = r.unpack(f"<{ndim}I")
        arrays.append(r.array(_CODE_DTYPES[code],
                              int(np.prod(shape))).reshape(shape))
    return arrays


def _mlp_layout(arrays: list[np.ndarray]):
    """Recover (in_dim, out_dim, hidden) from a params() array list."""
    if len(arrays) < 4 or len(arrays) % 2 != 0:
        raise FormatError("malformed decoder parameter list")
    weights = arrays[: len(arrays) // 2]
    for w in weights:
        if w.ndim != 2:
            raise FormatError("decoder weight is not a matrix")
    hidden = tuple(int(w.shape[1]) for w in weights[:-1])
    return int(weights[0].shape[0]), int(weights[-1].shape[1]), hidden


def load_map(path) -> MapSnapshot:
    """Read a map container back into a fully usable snapshot."""
    with open(path, "rb") as f:
        r = ByteReader(f.read(), "map file")
    if r.take(4) != MAP_MAGIC:
        raise FormatError("bad map-file magic")
    version, n_sections = r.unpack("<II")
    if version != MAP_VERSION:
        raise FormatError(f"unsupported map-file version {version}")
    payloads: dict[bytes, ByteReader] = {}
    for _ in range(n_sections):
        tag = r.take(4)
        if tag not in _SECTION_TAGS:
            raise FormatError(f"unknown map section {tag!r}")
        if tag in payloads:
            raise FormatError(f"duplicate map section {tag!r}")
        (length,) = r.unpack("<Q")
        payloads[tag] = ByteReader(r.take(length), f"map section {tag.decode()}")
    if not r.done():
        raise FormatError("trailing bytes after map sections")
    missing = [t for t in _SECTION_TAGS if t not in payloads]
    if missing:
        raise FormatError(f"map file is missing sections {missing}")

    s = payloads[b"META"]
    snap_version, near, far, text_len = s.unpack("<QddI")
    try:
        config = parse_config(s.take(text_len).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise FormatError(f"bad embedded config: {e}") from e

    s = payloads[b"BNDS"]
    vals = s.unpack("<6d")
    bounds = SceneBounds(np.array(vals[:3]), np.array(vals[3:]))

    s = payloads[b"DIMS"]
    depth_dim, color_dim, lang_dim, bands, code, voxel_edge = s.unpack("<IIIIBd")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown field dtype code {code}")
    field_dtype = _CODE_DTYPES[code]

    field = SparseVoxelField(bounds, voxel_edge, depth_dim, color_dim,
                             lang_dim, field_dtype)
    s = payloads[b"VOXL"]
    (n_cells,) = s.unpack("<Q")
    field._keys = s.array(np.int64, n_cells)
    field._feats = s.array(field_dtype, n_cells * field.feat_dim).reshape(
        n_cells, field.feat_dim)
    (n_split,) = s.unpack("<Q")
    field._split = s.array(np.int64, n_split)
    field._index_stale = True
    if not s.done():
        raise FormatError("trailing bytes in voxel section")

    s = payloads[b"LANG"]
    (n_lang,) = s.unpack("<Q")
    lang: dict[int, LanguageCell] = {}
    for _ in range(n_lang):
        key, has_fused = s.unpack("<qB")
        fused = s.array(np.float64, lang_dim) if has_fused else None
        total_weight, n_records = s.unpack("<dI")
        records = []
        for _ in range(n_records):
            emb = s.array(np.float64, lang_dim)
            conf, weight = s.unpack("<dd")
            records.append(ObservationRecord(emb, conf, weight))
        lang[int(key)] = LanguageCell(records, fused, total_weight)
    if not s.done():
        raise FormatError("trailing bytes in language section")
    field._lang = lang

    s = payloads[b"DECO"]
    encoder = PositionalEncoder(bands, bounds)
    decoders = []
    for ctor, feat_dim in ((OccupancyDecoder, depth_dim),
                           (ColorDecoder, color_dim)):
        arrays = _read_mlp(s)
        in_dim, out_dim, hidden = _mlp_layout(arrays)
        if in_dim != encoder.out_dim + feat_dim:
            raise FormatError("decoder input width does not match dims")
        dec = ctor(encoder, feat_dim, hidden, dtype=arrays[0].dtype)
        if dec.mlp.out_dim != out_dim:
            raise FormatError("decoder output width does not match dims")
        dec.mlp.set_params(arrays)
        decoders.append(dec)
    if not s.done():
        raise FormatError("trailing bytes in decoder section")

    s = payloads[b"RETR"]
    alpha, eps_dist, next_id, n_entries = s.unpack("<ddQQ")
    retrieval = RetrievalMap(alpha, eps_dist)
    retrieval._next_id = int(next_id)
    for _ in range(n_entries):
        (entry_id,) = s.unpack("<Q")
        emb = s.array(np.float64, lang_dim)
        center = s.array(np.float64, 3)
        weight, voxel_count = s.unpack("<dQ")
        retrieval.entries.append(
            InstanceEntry(int(entry_id), emb, center, weight, int(voxel_count)))
    if not s.done():
        raise FormatError("trailing bytes in retrieval section")

    return MapSnapshot(field, decoders[0], decoders[1], retrieval, config,
                       int(snap_version), near, far)


def _records_equal(a: LanguageCell, b: LanguageCell) -> bool:
    if len(a.records) != len(b.records):
        return False
    if (a.fused is None) != (b.fused is None):
        return False
    if a.fused is not None and not np.array_equal(a.fused, b.fused):
        return False
    if a.total_weight != b.total_weight:
        return False
    return all(np.array_equal(ra.embedding, rb.embedding)
               and ra.confidence == rb.confidence and ra.weight == rb.weight
               for ra, rb in zip(a.records, b.records))


def map_equal(a: MapSnapshot, b: MapSnapshot) -> bool:
    """True when two snapshots are bit-for-bit the same map."""
    fa, fb = a.field, b.field
    if (a.version != b.version or a.near != b.near or a.far != b.far
            or a.config != b.config):
        return False
    if not (np.array_equal(fa.bounds.min, fb.bounds.min)
            and np.array_equal(fa.bounds.max, fb.bounds.max)):
        return False
    if (fa.voxel_edge != fb.voxel_edge or fa.dtype != fb.dtype
            or (fa.depth_dim, fa.color_dim, fa.lang_dim)
            != (fb.depth_dim, fb.color_dim, fb.lang_dim)):
        return False
    if not (np.array_equal(fa.packed_keys(), fb.packed_keys())
            and np.array_equal(fa.feature_table(), fb.feature_table())
            and np.array_equal(fa.split_keys(), fb.split_keys())):
        return False
    la, lb = fa.language_cells(), fb.language_cells()
    if la.keys() != lb.keys():
        return False
    if not all(_records_equal(la[k], lb[k]) for k in la):
        return False
    for mlp_a, mlp_b in ((a.occupancy.mlp, b.occupancy.mlp),
                         (a.color.mlp, b.color.mlp)):
        pa, pb = mlp_a.params(), mlp_b.params()
        if len(pa) != len(pb):
            return False
        if not all(x.dtype == y.dtype and np.array_equal(x, y)
                   for x, y in zip(pa, pb)):
            return False
    ra, rb = a.retrieval, b.retrieval
    if (ra.alpha != rb.alpha or ra.eps_dist != rb.eps_dist
            or ra._next_id != rb._next_id or len(ra.entries) != len(rb.entries)):
        return False
    return all(ea.id == eb.id and np.array_equal(ea.embedding, eb.embedding)
               and np.array_equal(ea.center, eb.center)
               and ea.weight == eb.weight and ea.voxel_count == eb.voxel_count
               for ea, eb in zip(ra.entries, rb.entries))
