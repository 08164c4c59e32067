"""Instance-level retrieval index: embeddings with geometric centers.

Each segmented instance the mapper sees is registered here with its mask
embedding, world centroid, and a weight. Registration greedily merges into
the best-scoring existing entry when

    score = max(cos(embedding, entry.embedding), 0) / max(distance, eps)

exceeds alpha, otherwise it opens a new entry. Merging updates embedding
(weighted mean, renormalized to unit) and center (weighted mean) and adds
the weights. Text queries rank entries by cosine against the query
embedding, ties broken by larger weight then smaller id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ALPHA",
    "EPS_DIST",
    "InstanceEntry",
    "RetrievalMap",
    "merge_score",
]

ALPHA = 2.0
EPS_DIST = 0.05


@dataclass
class InstanceEntry:
    """One retrievable object instance."""

    id: int
    embedding: np.ndarray  # (D_l,) float64, unit norm
    center: np.ndarray  # (3,) meters
    weight: float
    voxel_count: int

    def __post_init__(self):
        norm = float(np.linalg.norm(self.embedding))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"entry embedding norm {norm} is not 1")
        if self.weight <= 0:
            raise ValueError("entry weight must be positive")
        if self.voxel_count < 1:
            raise ValueError("entry must cover at least one voxel")

    def copy(self) -> "InstanceEntry":
        return InstanceEntry(self.id, self.embedding.copy(),
                             self.center.copy(), self.weight, self.voxel_count)


def merge_score(entry: InstanceEntry, f: np.ndarray, c: np.ndarray,
                eps_dist: float = EPS_DIST) -> float:
    """Same-object score between an entry and an incoming observation:
    cosine over distance, distance floored at eps_dist, negative cosine
    clamped to zero."""
    cos = float(np.dot(entry.embedding, np.asarray(f, dtype=np.float64)))
    if cos <= 0.0:
        return 0.0
    dist = float(np.linalg.norm(entry.center - np.asarray(c, dtype=np.float64)))
    return cos / max(dist, eps_dist)


class RetrievalMap:
    """Greedy-merge instance index over the whole scene."""

    def __init__(self, alpha: float = ALPHA, eps_dist: float = EPS_DIST):
        self.alpha = float(alpha)
        self.eps_dist = float(eps_dist)
        self.entries: list[InstanceEntry] = []
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.entries)

    def register_instance(self, f: np.ndarray, c: np.ndarray, k: float,
                          voxel_count: int = 1) -> int:
        """Fold one observed instance into the index; returns the entry id it
        merged into or the id of the entry it created."""
        if k <= 0:
            raise ValueError(f"registration weight must be positive, got {k}")
        f = np.asarray(f, dtype=np.float64)
        norm = float(np.linalg.norm(f))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"embedding norm {norm} is not 1")
        c = np.asarray(c, dtype=np.float64).reshape(3)

        best = None
        best_score = -1.0
        for entry in self.entries:
            score = merge_score(entry, f, c, self.eps_dist)
            if score > best_score:
                best = entry
                best_score = score
        if best is not None and best_score > self.alpha:
            total = best.weight + k
            merged = (best.weight * best.embedding + k * f) / total
            n = np.linalg.norm(merged)
            if n > 0:
                merged = merged / n
            best.embedding = merged
            best.center = (best.weight * best.center + k * c) / total
            best.weight = total
            best.voxel_count += voxel_count
            return best.id
        entry = InstanceEntry(id=self._next_id, embedding=f.copy(),
                              center=c.copy(), weight=float(k),
                              voxel_count=voxel_count)
        self.entries.append(entry)
        self._next_id += 1
        return entry.id

    def query(self, q: np.ndarray, top_n: int = 5) -> list[tuple[int, float, np.ndarray]]:
        """Entries ranked by cosine to the query embedding, descending;
        ties prefer larger weight, then smaller id."""
        q = np.asarray(q, dtype=np.float64)
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"query embedding norm {norm} is not 1")
        if top_n < 1:
            raise ValueError("top_n must be >= 1")
        scored = [(float(np.dot(e.embedding, q)), e) for e in self.entries]
        scored.sort(key=lambda t: (-t[0], -t[1].weight, t[1].id))
        return [(e.id, cos, e.center.copy()) for cos, e in scored[:top_n]]

    def get(self, entry_id: int) -> InstanceEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise KeyError(f"no entry {entry_id}")

    def clone(self) -> "RetrievalMap":
        out = RetrievalMap(self.alpha, self.eps_dist)
        out.entries = [e.copy() for e in self.entries]
        out._next_id = self._next_id
        return out
