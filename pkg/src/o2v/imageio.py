"""Binary PPM images and a small float32 depth-raster format.

Color images travel as binary PPM (P6, maxval 255). Depth maps use a tiny
raster format of our own: a 16-byte header (magic ``O2VD``, version, width,
height as little-endian u32) followed by row-major float32 plane depths,
with 0 marking invalid pixels. Both readers validate structure and raise
FormatError on anything malformed.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "FormatError",
    "ByteReader",
    "write_ppm",
    "read_ppm",
    "write_depth_raster",
    "read_depth_raster",
]

DEPTH_MAGIC = b"O2VD"
DEPTH_VERSION = 1


class FormatError(ValueError):
    """A file does not parse as the expected format."""


class ByteReader:
    """Sequential cursor over a byte buffer that raises FormatError on
    truncation instead of silently returning short reads."""

    def __init__(self, buf: bytes, label: str = "file"):
        self.buf = buf
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.label}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        raw = self.take(dtype.itemsize * int(count))
        return np.frombuffer(raw, dtype=dtype).copy()

    def done(self) -> bool:
        return self.pos == len(self.buf)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write float RGB in [0, 1] as binary PPM with 8-bit quantization."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) array, got {rgb.shape}")
    if rgb.min() < 0 or rgb.max() > 1:
        raise ValueError("rgb values must lie in [0, 1]")
    h, w = rgb.shape[:2]
    data = np.rint(rgb.astype(np.float64) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _tokens(buf: bytes):
    """PPM header tokens, skipping whitespace and # comments. Yields
    (token, end_offset)."""
    i = 0
    n = len(buf)
    while i < n:
        c = buf[i:i + 1]
        if c in b" \t\r\n":
            i += 1
        elif c == b"#":
            while i < n and buf[i:i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < n and buf[j:j + 1] not in b" \t\r\n":
                j += 1
            yield buf[i:j], j
            i = j


def read_ppm(path) -> np.ndarray:
    """Read binary PPM into float32 RGB in [0, 1]."""
    with open(path, "rb") as f:
        buf = f.read()
    toks = _tokens(buf)
    try:
        magic, _ = next(toks)
        if magic != b"P6":
            raise FormatError(f"not a binary PPM (magic {magic!r})")
        (w_tok, _), (h_tok, _), (max_tok, end) = next(toks), next(toks), next(toks)
        w, h, maxval = int(w_tok), int(h_tok), int(max_tok)
    except (StopIteration, ValueError) as e:
        raise FormatError("truncated or malformed PPM header") from e
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    if w < 1 or h < 1:
        raise FormatError(f"bad dimensions {w}x{h}")
    pixels = buf[end + 1:]
    if len(pixels) < w * h * 3:
        raise FormatError("PPM pixel data truncated")
    data = np.frombuffer(pixels[:w * h * 3], dtype=np.uint8)
    return (data.reshape(h, w, 3).astype(np.float32)) / 255.0


def write_depth_raster(path, depth: np.ndarray) -> None:
    """Write an (H, W) plane-depth map as float32 little-endian."""
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError(f"expected (H, W) array, got {depth.shape}")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<III", DEPTH_VERSION, w, h))
        f.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth_raster(path) -> np.ndarray:
    """Read a depth raster back as float32 (H, W)."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 16:
        raise FormatError("depth raster shorter than its header")
    if buf[:4] != DEPTH_MAGIC:
        raise FormatError(f"bad depth-raster magic {buf[:4]!r}")
    version, w, h = struct.unpack("<III", buf[4:16])
    if version != DEPTH_VERSION:
        raise FormatError(f"unsupported depth-raster version {version}")
    expect = 16 + w * h * 4
    if len(buf) != expect:
        raise FormatError(f"depth raster size {len(buf)}, expected {expect}")
    data = np.frombuffer(buf[16:], dtype="<f4")
    return data.reshape(h, w).astype(np.float32, copy=False)
