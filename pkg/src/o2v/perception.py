"""Per-frame instance masks with language embeddings, and their file formats.

A perception provider turns an RGBD frame into a set of instance masks, each
carrying a unit-norm language embedding, a confidence in [0, 1], and a scale
rank (0 whole object, 1 part, 2 fine detail). Masks of the same rank never
overlap within a frame.

Two providers live here. StubPerception renders ground-truth instance masks
for a synthetic scene, so the rest of the pipeline can be exercised without
any learned segmentation model. ArchivePerception replays masks from a
perception archive produced offline.

Archive format (.o2vp, little-endian): magic ``O2VP``, version u32, embedding
dim u32, frame count u32; per frame a u64 frame id and u32 mask count; per
mask a u8 scale rank, f32 confidence, the f32 embedding, and the bitmap as
run-length pairs (u32 pair count, then (off_run, on_run) u32 pairs, row-major
starting with pixels-off). Text embeddings ship in a sidecar (.o2vt): magic
``O2VT``, version u32, dim u32, entry count u32; per entry a u32 byte length,
UTF-8 text, and the f32 embedding.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .imageio import ByteReader, FormatError
from .scene import RGBDFrame
from .synthworld import SynthScene, render_gt

__all__ = [
    "InstanceMask",
    "FramePerception",
    "stub_embed",
    "StubTextEmbedder",
    "SidecarTextEmbedder",
    "StubPerception",
    "ArchivePerception",
    "write_archive",
    "read_archive",
    "validate_archive",
    "write_text_sidecar",
    "read_text_sidecar",
    "rle_encode",
    "rle_decode",
]

ARCHIVE_MAGIC = b"O2VP"
ARCHIVE_VERSION = 1
SIDECAR_MAGIC = b"O2VT"
SIDECAR_VERSION = 1

DEFAULT_LANG_DIM = 32
SCALE_RANKS = (0, 1, 2)


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """One segmented instance in one frame."""

    bitmap: np.ndarray  # (H, W) bool
    embedding: np.ndarray  # (D_l,) float32, unit norm
    confidence: float
    scale_rank: int = 0

    def __post_init__(self):
        if self.bitmap.ndim != 2 or self.bitmap.dtype != np.bool_:
            raise ValueError("bitmap must be a 2-D bool array")
        if not self.bitmap.any():
            raise ValueError("mask covers no pixels")
        if self.embedding.ndim != 1:
            raise ValueError("embedding must be 1-D")
        norm = float(np.linalg.norm(self.embedding.astype(np.float64)))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"embedding norm {norm} is not 1")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.scale_rank not in SCALE_RANKS:
            raise ValueError(f"scale_rank {self.scale_rank} not in {SCALE_RANKS}")

    @property
    def pixel_count(self) -> int:
        return int(self.bitmap.sum())


@dataclass(frozen=True, eq=False)
class FramePerception:
    """All masks extracted from one frame."""

    frame_id: int
    lang_dim: int
    masks: tuple[InstanceMask, ...] = field(default_factory=tuple)

    def __post_init__(self):
        shapes = {m.bitmap.shape for m in self.masks}
        if len(shapes) > 1:
            raise ValueError(f"masks disagree on frame shape: {shapes}")
        for m in self.masks:
            if m.embedding.shape[0] != self.lang_dim:
                raise ValueError("mask embedding dim differs from lang_dim")
        for rank in SCALE_RANKS:
            cover = None
            for m in self.masks:
                if m.scale_rank != rank:
                    continue
                cover = m.bitmap.astype(np.int32) if cover is None \
                    else cover + m.bitmap
            if cover is not None and cover.max() > 1:
                raise ValueError(f"rank-{rank} masks overlap within the frame")


# ----------------------------------------------------------------- embeddings

def _label_key(label: str) -> int:
    """Stable 64-bit key for a label, independent of process hash seed."""
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stub_embed(label: str, dim: int = DEFAULT_LANG_DIM) -> np.ndarray:
    """Deterministic unit embedding for a label: a counter-based generator
    keyed by a stable hash of the text draws standard normals, normalized.
    Distinct labels land nearly orthogonal for any reasonable dim."""
    if not label:
        raise ValueError("empty label")
    rng = np.random.Generator(np.random.Philox(key=_label_key(label)))
    v = rng.standard_normal(dim)
    v = v / np.linalg.norm(v)
    return v.astype(np.float32)


class StubTextEmbedder:
    """Embeds query text exactly like the stub perception embeds labels."""

    def __init__(self, lang_dim: int = DEFAULT_LANG_DIM):
        self.lang_dim = lang_dim

    def embed(self, text: str) -> np.ndarray:
        return stub_embed(text, self.lang_dim)


class SidecarTextEmbedder:
    """Embeds query text by exact lookup in a text sidecar file."""

    def __init__(self, path):
        self.lang_dim, self._table = read_text_sidecar(path)

    def embed(self, text: str) -> np.ndarray:
        try:
            return self._table[text]
        except KeyError:
            raise KeyError(f"no embedding recorded for text {text!r}") from None

    def known_texts(self) -> list[str]:
        return sorted(self._table)


# ------------------------------------------------------------------ providers

class StubPerception:
    """Ground-truth masks for a synthetic scene.

    Every sufficiently visible instance (objects and room surfaces alike)
    becomes one rank-0 mask labeled by its ground-truth name. Object
    confidence is the visible fraction of the unoccluded projected area,
    measured on a canvas three times wider and taller than the frame so area
    lost to the image border is counted; room surfaces get confidence 1.
    Output depends only on (scene, frame pose, intrinsics)."""

    def __init__(self, scene: SynthScene, lang_dim: int = DEFAULT_LANG_DIM,
                 min_pixels: int = 20):
        self.scene = scene
        self.lang_dim = lang_dim
        self.min_pixels = min_pixels
        self._embeddings = {label: stub_embed(label, lang_dim)
                            for label in set(scene.instance_labels())}

    def _visible_fraction(self, frame: RGBDFrame, obj_index: int,
                          visible_count: int) -> float:
        cam = frame.intrinsics
        from .scene import CameraIntrinsics
        wide = CameraIntrinsics(
            fx=cam.fx, fy=cam.fy,
            cx=cam.cx + cam.width, cy=cam.cy + cam.height,
            width=3 * cam.width, height=3 * cam.height)
        alone = SynthScene(self.scene.room_min, self.scene.room_max,
                           (self.scene.objects[obj_index],), self.scene.seed)
        _, _, inst = render_gt(alone, frame.pose, wide, objects_only=True)
        total = int((inst == 0).sum())
        if total == 0:
            return 0.05
        return float(np.clip(visible_count / total, 0.05, 1.0))

    def perceive(self, frame: RGBDFrame) -> FramePerception:
        _, _, inst = render_gt(self.scene, frame.pose, frame.intrinsics)
        labels = self.scene.instance_labels()
        n_objects = len(self.scene.objects)
        masks = []
        for idx in range(len(labels)):
            bitmap = inst == idx
            count = int(bitmap.sum())
            if count < self.min_pixels:
                continue
            if idx < n_objects:
                conf = self._visible_fraction(frame, idx, count)
            else:
                conf = 1.0
            masks.append(InstanceMask(
                bitmap=bitmap,
                embedding=self._embeddings[labels[idx]],
                confidence=conf,
                scale_rank=0))
        return FramePerception(frame.frame_id, self.lang_dim, tuple(masks))


class ArchivePerception:
    """Replays masks recorded in a perception archive."""

    def __init__(self, path):
        self.lang_dim, self._frames = read_archive(path)

    def frame_ids(self) -> list[int]:
        return sorted(self._frames)

    def perceive(self, frame: RGBDFrame) -> FramePerception:
        try:
            raw = self._frames[frame.frame_id]
        except KeyError:
            raise KeyError(f"archive holds no frame {frame.frame_id}") from None
        h, w = frame.depth.shape
        masks = []
        for rank, conf, emb, flat in raw:
            if flat.size != h * w:
                raise ValueError(
                    f"frame {frame.frame_id}: archived bitmap has {flat.size} "
                    f"pixels, frame is {w}x{h}")
            masks.append(InstanceMask(
                bitmap=flat.reshape(h, w),
                embedding=emb,
                confidence=conf,
                scale_rank=rank))
        return FramePerception(frame.frame_id, self.lang_dim, tuple(masks))


# ------------------------------------------------------------------- RLE bits

def rle_encode(bits: np.ndarray) -> np.ndarray:
    """Run lengths of a flat bool array as (n_pairs, 2) uint32, each row an
    (off_run, on_run) pair; runs alternate starting with off."""
    bits = np.asarray(bits).ravel().astype(np.int8)
    if bits.size == 0:
        return np.zeros((0, 2), dtype=np.uint32)
    edges = np.flatnonzero(np.diff(bits)) + 1
    starts = np.concatenate([[0], edges, [bits.size]])
    lengths = np.diff(starts)
    if bits[0] == 1:  # leading zero-length off run keeps the off/on rhythm
        lengths = np.concatenate([[0], lengths])
    if lengths.size % 2:
        lengths = np.concatenate([lengths, [0]])
    if lengths.max() > np.iinfo(np.uint32).max:
        raise ValueError("run too long for u32")
    return lengths.astype(np.uint32).reshape(-1, 2)


def rle_decode(pairs: np.ndarray, total: int | None = None) -> np.ndarray:
    """Inverse of rle_encode, returning a flat bool array."""
    pairs = np.asarray(pairs, dtype=np.uint64).reshape(-1, 2)
    n = int(pairs.sum())
    if total is not None and n != total:
        raise FormatError(f"run lengths sum to {n}, expected {total}")
    out = np.zeros(n, dtype=bool)
    pos = 0
    for off, on in pairs:
        pos += int(off)
        out[pos:pos + int(on)] = True
        pos += int(on)
    return out


# -------------------------------------------------------------- archive files

def write_archive(path, perceptions, lang_dim: int | None = None) -> None:
    """Write frame perceptions to a perception archive."""
    perceptions = list(perceptions)
    if lang_dim is None:
        if not perceptions:
            raise ValueError("cannot infer lang_dim from an empty archive")
        lang_dim = perceptions[0].lang_dim
    for p in perceptions:
        if p.lang_dim != lang_dim:
            raise ValueError("perceptions disagree on lang_dim")
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC)
        f.write(struct.pack("<III", ARCHIVE_VERSION, lang_dim, len(perceptions)))
        for p in perceptions:
            f.write(struct.pack("<QI", p.frame_id, len(p.masks)))
            for m in p.masks:
                f.write(struct.pack("<Bf", m.scale_rank, m.confidence))
                f.write(np.ascontiguousarray(m.embedding, dtype="<f4").tobytes())
                pairs = rle_encode(m.bitmap)
                f.write(struct.pack("<I", pairs.shape[0]))
                f.write(np.ascontiguousarray(pairs, dtype="<u4").tobytes())


def read_archive(path):
    """Read a perception archive.

    Returns (lang_dim, frames) where frames maps frame_id to a list of
    (scale_rank, confidence, embedding float32, flat bool bitmap)."""
    with open(path, "rb") as f:
        r = ByteReader(f.read(), "perception archive")
    if r.take(4) != ARCHIVE_MAGIC:
        raise FormatError("bad perception-archive magic")
    version, lang_dim, n_frames = r.unpack("<III")
    if version != ARCHIVE_VERSION:
        raise FormatError(f"unsupported perception-archive version {version}")
    if lang_dim < 1 or lang_dim > 65536:
        raise FormatError(f"implausible embedding dim {lang_dim}")
    frames: dict[int, list] = {}
    for _ in range(n_frames):
        frame_id, n_masks = r.unpack("<QI")
        if frame_id in frames:
            raise FormatError(f"duplicate frame id {frame_id}")
        masks = []
        for _ in range(n_masks):
            rank, conf = r.unpack("<Bf")
            emb = np.frombuffer(r.take(4 * lang_dim), dtype="<f4").copy()
            (n_pairs,) = r.unpack("<I")
            pairs = np.frombuffer(r.take(8 * n_pairs), dtype="<u4")
            flat = rle_decode(pairs.reshape(-1, 2))
            masks.append((int(rank), float(conf), emb, flat))
        frames[frame_id] = masks
    if not r.done():
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after archive")
    return lang_dim, frames


def validate_archive(path) -> dict:
    """Structural and semantic validation of a perception archive.

    Raises FormatError on any violation; returns a summary dict."""
    lang_dim, frames = read_archive(path)
    n_masks = 0
    for frame_id, masks in frames.items():
        sizes = set()
        for rank, conf, emb, flat in masks:
            n_masks += 1
            if rank not in SCALE_RANKS:
                raise FormatError(
                    f"frame {frame_id}: scale rank {rank} not in {SCALE_RANKS}")
            if not 0.0 <= conf <= 1.0 or not np.isfinite(conf):
                raise FormatError(
                    f"frame {frame_id}: confidence {conf} outside [0, 1]")
            if not np.all(np.isfinite(emb)):
                raise FormatError(f"frame {frame_id}: non-finite embedding")
            norm = float(np.linalg.norm(emb.astype(np.float64)))
            if abs(norm - 1.0) > 1e-5:
                raise FormatError(
                    f"frame {frame_id}: embedding norm {norm:.6f} is not 1")
            if flat.size == 0 or not flat.any():
                raise FormatError(f"frame {frame_id}: empty mask bitmap")
            sizes.add(flat.size)
        if len(sizes) > 1:
            raise FormatError(
                f"frame {frame_id}: masks disagree on pixel count: {sizes}")
        for rank in SCALE_RANKS:
            cover = None
            for r_, _, _, flat in masks:
                if r_ != rank:
                    continue
                cover = flat.astype(np.int32) if cover is None else cover + flat
            if cover is not None and cover.max() > 1:
                raise FormatError(
                    f"frame {frame_id}: rank-{rank} masks overlap")
    return {"frames": len(frames), "masks": n_masks, "lang_dim": lang_dim}


# -------------------------------------------------------------- sidecar files

def write_text_sidecar(path, table: dict[str, np.ndarray],
                       lang_dim: int | None = None) -> None:
    """Write a text-to-embedding table next to an archive."""
    if lang_dim is None:
        if not table:
            raise ValueError("cannot infer lang_dim from an empty table")
        lang_dim = len(next(iter(table.values())))
    with open(path, "wb") as f:
        f.write(SIDECAR_MAGIC)
        f.write(struct.pack("<III", SIDECAR_VERSION, lang_dim, len(table)))
        for text in sorted(table):
            emb = np.asarray(table[text])
            if emb.shape != (lang_dim,):
                raise ValueError(f"embedding for {text!r} has shape {emb.shape}")
            raw = text.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(np.ascontiguousarray(emb, dtype="<f4").tobytes())


def read_text_sidecar(path) -> tuple[int, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        r = ByteReader(f.read(), "text sidecar")
    if r.take(4) != SIDECAR_MAGIC:
        raise FormatError("bad text-sidecar magic")
    version, lang_dim, count = r.unpack("<III")
    if version != SIDECAR_VERSION:
        raise FormatError(f"unsupported text-sidecar version {version}")
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = r.unpack("<I")
        try:
            text = r.take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError("text sidecar entry is not valid UTF-8") from e
        emb = np.frombuffer(r.take(4 * lang_dim), dtype="<f4").copy()
        if text in table:
            raise FormatError(f"duplicate sidecar text {text!r}")
        table[text] = emb
    if not r.done():
        raise FormatError("trailing bytes after text sidecar")
    return lang_dim, table
