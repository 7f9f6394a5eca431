from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Aabb:
    """Axis-aligned box. The empty box has ``lo = +inf`` and ``hi = -inf``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64).reshape(3))

    @classmethod
    def empty(cls) -> Aabb:
        return cls(np.full(3, np.inf), np.full(3, -np.inf))

    @classmethod
    def from_points(cls, pts) -> Aabb:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return cls.empty()
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def is_empty(self) -> bool:
        return bool(np.any(self.lo > self.hi))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Aabb):
            return NotImplemented
        if self.is_empty and other.is_empty:
            return True
        return bool(np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi))

    def __repr__(self) -> str:
        if self.is_empty:
            return "Aabb(empty)"
        return f"Aabb(lo={self.lo.tolist()}, hi={self.hi.tolist()})"

    @property
    def extent(self) -> np.ndarray:
        if self.is_empty:
            return np.zeros(3)
        return self.hi - self.lo

    @property
    def centroid(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def surface_area(self) -> float:
        if self.is_empty:
            return 0.0
        e = self.hi - self.lo
        return float(2.0 * (e[0] * e[1] + e[1] * e[2] + e[2] * e[0]))

    def volume(self) -> float:
        if self.is_empty:
            return 0.0
        return float(np.prod(self.hi - self.lo))

    def union(self, other: Aabb) -> Aabb:
        return Aabb(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def intersection(self, other: Aabb) -> Aabb:
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        if np.any(lo > hi):
            return Aabb.empty()
        return Aabb(lo, hi)

    def overlaps(self, other: Aabb) -> bool:
        """Closed-box overlap: touching faces count."""
        if self.is_empty or other.is_empty:
            return False
        return bool(np.all(self.lo <= other.hi) and np.all(other.lo <= self.hi))

    def contains(self, other: Aabb) -> bool:
        if other.is_empty:
            return True
        return bool(np.all(self.lo <= other.lo) and np.all(other.hi <= self.hi))

    def contains_points(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)

    def interior_overlap_volume(self, other: Aabb) -> float:
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        return float(np.prod(np.clip(hi - lo, 0.0, None)))

    def split(self, axis: int, pos: float) -> tuple[Aabb, Aabb]:
        lhi = self.hi.copy()
        lhi[axis] = pos
        rlo = self.lo.copy()
        rlo[axis] = pos
        return Aabb(self.lo, lhi), Aabb(rlo, self.hi)


def union_all(boxes) -> Aabb:
    out = Aabb.empty()
    for b in boxes:
        out = out.union(b)
    return out
