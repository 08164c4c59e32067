"""Positional encoding and the two small MLP decoders (occupancy, color).

Plain numpy, with hand-written reverse-mode gradients for every parameter
and for the feature inputs. The topology is fixed (3 tanh hidden layers of
width 32 by default, sigmoid-squashed output), so nothing more general than
that needs to differentiate.
"""

from __future__ import annotations

import numpy as np

from .scene import SceneBounds

__all__ = ["PositionalEncoder", "Mlp", "OccupancyDecoder", "ColorDecoder", "sigmoid"]


def sigmoid(x: np.ndarray) -> np.ndarray:
    # evaluate exp on the non-positive side only, so the exponential can
    # never overflow; the two quotients are the algebraically matching
    # forms for each sign
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


class PositionalEncoder:
    """Maps world points to [p̂, sin(2^l π p̂), cos(2^l π p̂)] for l < bands.

    Points are first normalized to [-1, 1]^3 using the scene bounds when
    bounds are given. Output dim is 3 + 6 * bands.
    """

    def __init__(self, bands: int = 4, bounds: SceneBounds | None = None):
        if bands < 0:
            raise ValueError("bands must be >= 0")
        self.bands = int(bands)
        self.bounds = bounds
        self.out_dim = 3 + 6 * self.bands

    def normalize(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        if self.bounds is None:
            return p
        lo, hi = self.bounds.min, self.bounds.max
        return 2.0 * (p - lo) / (hi - lo) - 1.0

    def encode(self, points: np.ndarray, dtype=None) -> np.ndarray:
        """Encoded points, in float64 by default.

        Passing a narrower dtype runs the whole computation in that
        precision and derives each higher frequency band from the one
        below by angle doubling instead of fresh transcendental calls.
        The float32 training path uses this; the float64 default keeps
        the direct per-band evaluation bit for bit.
        """
        dt = np.float64 if dtype is None else np.dtype(dtype)
        if dt == np.float64:
            p = self.normalize(points)
            if self.bands == 0:
                return p
            freqs = np.pi * (1 << np.arange(self.bands))
            ang = p[..., None, :] * freqs[:, None]  # (..., bands, 3)
            out = np.empty(p.shape[:-1] + (self.out_dim,), dtype=np.float64)
            out[..., :3] = p
            # per band, the sin triple then the cos triple
            trig = out[..., 3:]
            trig.shape = p.shape[:-1] + (self.bands, 2, 3)
            trig[..., 0, :] = np.sin(ang)
            trig[..., 1, :] = np.cos(ang)
            return out

        p = np.asarray(points)
        if p.dtype != dt:
            p = p.astype(dt)
        if self.bounds is not None:
            lo = self.bounds.min.astype(dt)
            span = (self.bounds.max - self.bounds.min).astype(dt)
            p = (p - lo) * (dt.type(2.0) / span) - dt.type(1.0)
        if self.bands == 0:
            return p
        out = np.empty(p.shape[:-1] + (self.out_dim,), dtype=dt)
        out[..., :3] = p
        trig = out[..., 3:]
        trig.shape = p.shape[:-1] + (self.bands, 2, 3)
        s = np.sin(dt.type(np.pi) * p)
        c = np.cos(dt.type(np.pi) * p)
        for band in range(self.bands):
            if band:
                # sin 2a = 2 sin a cos a, cos 2a = 1 - 2 sin^2 a
                s, c = 2.0 * s * c, 1.0 - 2.0 * np.square(s)
            trig[..., band, 0, :] = s
            trig[..., band, 1, :] = c
        return out


class Mlp:
    """Fixed-topology MLP: tanh hidden layers, linear output, exact backprop."""

    def __init__(self, in_dim: int, out_dim: int, hidden: tuple[int, ...] = (32, 32, 32),
                 seed: int = 0, dtype=np.float64):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = tuple(hidden)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        dims = [in_dim, *hidden, out_dim]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for a, b in zip(dims[:-1], dims[1:]):
            s = 1.0 / np.sqrt(a)
            self.weights.append(rng.uniform(-s, s, size=(a, b)).astype(self.dtype))
            self.biases.append(rng.uniform(-s, s, size=b).astype(self.dtype))
        self._bias_ones: np.ndarray | None = None  # backward scratch
        self._scratch: dict | None = None

    def enable_scratch(self) -> None:
        """Reuse internal buffers across forward/backward calls.

        Cuts large per-call allocations out of hot training loops. With
        scratch on, a forward's activation cache and a backward's input
        gradient stay valid only until the next forward/backward on this
        instance, so enable it only on an instance with a single caller
        (clones always start with scratch off).
        """
        if self._scratch is None:
            self._scratch = {}

    def _buf(self, key, shape) -> np.ndarray:
        arr = self._scratch.get(key)
        if arr is None or arr.shape != shape:
            arr = np.empty(shape, dtype=self.dtype)
            self._scratch[key] = arr
        return arr

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns (pre-squash output (N, out_dim), activation cache)."""
        a = np.asarray(x, dtype=self.dtype)
        cache = [a]
        for i, (w, b) in enumerate(zip(self.weights[:-1], self.biases[:-1])):
            if self._scratch is None:
                z = a @ w
            else:
                z = np.matmul(a, w, out=self._buf(("z", i), a.shape[:-1] + (w.shape[1],)))
            z += b
            a = np.tanh(z, out=z)
            cache.append(a)
        out = a @ self.weights[-1]
        out += self.biases[-1]
        return out, cache

    def _chain(self, d: np.ndarray, w: np.ndarray, flip: int) -> np.ndarray:
        """d @ w.T, into alternating scratch buffers when enabled."""
        if self._scratch is None:
            return d @ w.T
        out = self._buf(("d", flip), d.shape[:-1] + (w.shape[0],))
        return np.matmul(d, w.T, out=out)

    def backward(self, cache: list[np.ndarray], dout: np.ndarray,
                 dx_cols: slice | None = None
                 ) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
        """Gradients for one forward pass: (dx, dweights, dbiases).

        dx_cols restricts the returned input gradient to a column slice
        (the weight/bias gradients are always complete), skipping the
        unused part of the first-layer backprop product.
        """
        dws: list[np.ndarray] = [None] * len(self.weights)
        dbs: list[np.ndarray] = [None] * len(self.biases)
        d = np.asarray(dout, dtype=self.dtype)
        ones = self._bias_ones
        if ones is None or ones.shape[0] != d.shape[0]:
            ones = self._bias_ones = np.ones(d.shape[0], dtype=self.dtype)
        dws[-1] = cache[-1].T @ d
        dbs[-1] = d.T @ ones
        w_last = self.weights[-1]
        if len(self.weights) == 1 and dx_cols is not None:
            w_last = w_last[dx_cols]
        flip = 0
        d = self._chain(d, w_last, flip)
        for i in range(len(self.weights) - 2, -1, -1):
            a = cache[i + 1]
            if self._scratch is None:
                t = np.square(a)
            else:
                t = np.square(a, out=self._buf(("t",), a.shape))
            np.subtract(1.0, t, out=t)
            d *= t
            dws[i] = cache[i].T @ d
            dbs[i] = d.T @ ones
            w0 = self.weights[i]
            if i == 0 and dx_cols is not None:
                w0 = w0[dx_cols]
            flip ^= 1
            d = self._chain(d, w0, flip)
        return d, dws, dbs

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def set_params(self, arrays: list[np.ndarray]) -> None:
        n = len(self.weights)
        for i, a in enumerate(arrays[:n]):
            self.weights[i] = np.asarray(a, dtype=self.dtype).reshape(self.weights[i].shape)
        for i, a in enumerate(arrays[n:]):
            self.biases[i] = np.asarray(a, dtype=self.dtype).reshape(self.biases[i].shape)

    def clone(self) -> "Mlp":
        out = Mlp.__new__(Mlp)
        out.in_dim, out.out_dim, out.hidden, out.dtype = (
            self.in_dim, self.out_dim, self.hidden, self.dtype)
        out.weights = [w.copy() for w in self.weights]
        out.biases = [b.copy() for b in self.biases]
        out._bias_ones = None
        out._scratch = None
        return out


class _SquashedDecoder:
    """Shared wiring: input [encoded point, feature vector] -> sigmoid outputs."""

    def __init__(self, encoder: PositionalEncoder, feat_dim: int, out_dim: int,
                 hidden: tuple[int, ...], seed: int, dtype):
        self.encoder = encoder
        self.feat_dim = int(feat_dim)
        self.mlp = Mlp(encoder.out_dim + feat_dim, out_dim, hidden, seed, dtype)

    def forward_encoded(self, encoded: np.ndarray, feats: np.ndarray
                        ) -> tuple[np.ndarray, tuple]:
        encoded = np.asarray(encoded)
        split = encoded.shape[-1]
        if self.mlp._scratch is not None and encoded.ndim == 2:
            x = self.mlp._buf(("x",), (encoded.shape[0], self.mlp.in_dim))
            x[:, :split] = encoded
            x[:, split:] = feats
        else:
            x = np.concatenate([np.asarray(encoded, dtype=self.mlp.dtype),
                                np.asarray(feats, dtype=self.mlp.dtype)], axis=-1)
        z, cache = self.mlp.forward(x)
        y = sigmoid(z)
        return y, (cache, y)

    def backward(self, ctx: tuple, dy: np.ndarray
                 ) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
        """Returns (dfeats, dweights, dbiases) for upstream dL/doutput."""
        cache, y = ctx
        dz = np.asarray(dy, dtype=self.mlp.dtype) * y * (1.0 - y)
        feat_cols = slice(self.mlp.in_dim - self.feat_dim, self.mlp.in_dim)
        dfeats, dws, dbs = self.mlp.backward(cache, dz, dx_cols=feat_cols)
        return dfeats, dws, dbs

    def decode(self, points: np.ndarray, feats: np.ndarray) -> np.ndarray:
        out, _ = self.forward_encoded(self.encoder.encode(points), feats)
        return out

    def clone(self):
        out = object.__new__(type(self))
        out.encoder = self.encoder
        out.feat_dim = self.feat_dim
        out.mlp = self.mlp.clone()
        return out


class OccupancyDecoder(_SquashedDecoder):
    """Occupancy probability in (0,1) from an encoded point and depth features."""

    def __init__(self, encoder: PositionalEncoder, feat_dim: int = 16,
                 hidden: tuple[int, ...] = (32, 32, 32), seed: int = 0, dtype=np.float64):
        super().__init__(encoder, feat_dim, 1, hidden, seed, dtype)

    def decode(self, points: np.ndarray, feats: np.ndarray) -> np.ndarray:
        return super().decode(points, feats)[..., 0]


class ColorDecoder(_SquashedDecoder):
    """RGB in (0,1)^3 from an encoded point and color features."""

    def __init__(self, encoder: PositionalEncoder, feat_dim: int = 16,
                 hidden: tuple[int, ...] = (32, 32, 32), seed: int = 1, dtype=np.float64):
        super().__init__(encoder, feat_dim, 3, hidden, seed, dtype)
