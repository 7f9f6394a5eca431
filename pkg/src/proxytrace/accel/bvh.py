"""Triangle BVHs, the rank-local two-level structure, and braided box splitting."""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .aabb import Aabb

LEAF_SIZE = 4


@dataclass
class Hit:
    t: float
    instance_id: int
    primitive_id: int
    normal: np.ndarray
    barycentrics: tuple[float, float]


def triangle_arrays(vertices: np.ndarray, triangles: np.ndarray):
    """Return (v0, e1, e2) arrays as consumed by the intersection kernels."""
    v = vertices[triangles]
    v0 = np.ascontiguousarray(v[:, 0])
    return v0, np.ascontiguousarray(v[:, 1] - v0), np.ascontiguousarray(v[:, 2] - v0)


def triangle_boxes(vertices: np.ndarray, triangles: np.ndarray):
    v = vertices[triangles]
    return np.ascontiguousarray(v.min(axis=1)), np.ascontiguousarray(v.max(axis=1))


@dataclass(eq=False)
class BvhNodes:
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    prim: np.ndarray

    @classmethod
    def build(cls, prim_lo, prim_hi, leaf_size: int = LEAF_SIZE) -> BvhNodes:
        out = K.build_bvh(np.ascontiguousarray(prim_lo, dtype=np.float64),
                          np.ascontiguousarray(prim_hi, dtype=np.float64), leaf_size)
        return cls(*out)

    def __len__(self):
        return len(self.lo)

    def leaves(self):
        return np.flatnonzero(self.left < 0)

    def root_bounds(self) -> Aabb:
        return Aabb(self.lo[0], self.hi[0])

    def as_tuple(self):
        return self.lo, self.hi, self.left, self.right, self.start, self.count, self.prim


_IDENTITY_INV = np.hstack([np.eye(3), np.zeros((3, 1))])[None]


class TriBvh:
    """BVH over one triangle set in its own coordinate frame."""

    def __init__(self, vertices, triangles, instance_id: int = 0):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) == 0:
            raise ValueError("TriBvh needs at least one triangle")
        self.instance_id = instance_id
        self.v0, self.e1, self.e2 = triangle_arrays(self.vertices, self.triangles)
        lo, hi = triangle_boxes(self.vertices, self.triangles)
        self.nodes = BvhNodes.build(lo, hi)
        # a single identity entry turns this into a degenerate two-level structure
        tl = BvhNodes.build(self.nodes.lo[:1], self.nodes.hi[:1], 1)
        self._G = tl.as_tuple() + (
            np.zeros(1, np.int64), _IDENTITY_INV.copy(), np.array([instance_id], np.int64),
        ) + self.nodes.as_tuple() + (self.v0, self.e1, self.e2, np.arange(len(self.triangles), dtype=np.int64))

    @property
    def bounds(self) -> Aabb:
        return self.nodes.root_bounds()

    def intersect(self, origin, direction, tmin: float = 0.0, tmax: float = np.inf) -> Hit | None:
        o = np.asarray(origin, float)
        d = np.asarray(direction, float)
        if not np.any(d):
            raise ValueError("ray direction must be non-zero")
        st1 = np.empty(K.STACK_SIZE, np.int64)
        st2 = np.empty(K.STACK_SIZE, np.int64)
        found, t, _, prim, u, v = K.closest_hit(self._G, o[0], o[1], o[2], d[0], d[1], d[2],
                                                float(tmin), float(tmax), True, st1, st2)
        if not found:
            return None
        n = np.cross(self.e1[prim], self.e2[prim])
        return Hit(float(t), self.instance_id, int(prim), n / np.linalg.norm(n), (float(u), float(v)))

    def occluded(self, origin, direction, tmin: float = 0.0, tmax: float = np.inf) -> bool:
        o = np.asarray(origin, float)
        d = np.asarray(direction, float)
        st1 = np.empty(K.STACK_SIZE, np.int64)
        st2 = np.empty(K.STACK_SIZE, np.int64)
        return bool(K.any_hit(self._G, o[0], o[1], o[2], d[0], d[1], d[2], float(tmin), float(tmax), st1, st2))

    def intersect_batch(self, org, dirs, tmin=None, tmax=None):
        n = len(org)
        tmin = np.zeros(n) if tmin is None else np.asarray(tmin, float)
        tmax = np.full(n, np.inf) if tmax is None else np.asarray(tmax, float)
        return K.closest_hit_batch(self._G, np.ascontiguousarray(org, float), np.ascontiguousarray(dirs, float),
                                   tmin, tmax, np.ones(n, np.bool_))


def build_tri_bvh(mesh) -> TriBvh:
    return TriBvh(mesh.vertices, mesh.triangles)


def braid_split(vertices, triangles, max_boxes: int) -> list[tuple[Aabb, np.ndarray]]:
    """Split a triangle set into at most ``max_boxes`` tight, disjoint groups.

    Runs the same top-down splitter the BVH builder uses, always refining the
    group whose box has the largest surface area (ties: earliest group).
    Returns ``(box, triangle indices)`` pairs.
    """
    if max_boxes < 1:
        raise ValueError("max_boxes must be >= 1")
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    lo, hi = triangle_boxes(vertices, triangles)
    order = np.arange(len(triangles))

    def box_of(s, e):
        idx = order[s:e]
        return Aabb(lo[idx].min(axis=0), hi[idx].max(axis=0))

    # heap of (-area, sequence, start, end); sequence gives the tie-break
    seq = 0
    root = box_of(0, len(order))
    heap = [(-root.surface_area(), seq, 0, len(order))]
    done = []
    while heap and len(heap) + len(done) < max_boxes:
        _, _, s, e = heapq.heappop(heap)
        if e - s < 2:
            done.append((s, e))
            continue
        mid = K.split_range(lo, hi, order, s, e)
        for a, b in ((s, mid), (mid, e)):
            seq += 1
            heapq.heappush(heap, (-box_of(a, b).surface_area(), seq, a, b))
    ranges = sorted(done + [(s, e) for _, _, s, e in heap])
    return [(box_of(s, e), np.sort(order[s:e])) for s, e in ranges]
