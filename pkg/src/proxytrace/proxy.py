"""Proxies, the proxy BVH and the distributed forwarding operator.

A proxy is a world-space box plus a bit-mask of the ranks that hold content
inside it. Proxies may overlap freely. The forwarding operator picks, among
the proxies a ray pierces, the closest one none of whose owners the ray has
visited yet, and forwards to one owner of it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .accel import kernels as K
from .accel.aabb import Aabb
from .accel.bvh import BvhNodes
from .rng import pick_seed

MASK64 = (1 << 64) - 1


class ProtocolViolation(RuntimeError):
    """Ranks disagreed about a ray's history (replay could not reach self)."""


# ----------------------------------------------------------------- rank masks

def mask_of(ranks) -> int:
    m = 0
    for r in ranks:
        m |= 1 << int(r)
    return m


def ranks_of(mask: int) -> list[int]:
    mask = int(mask) & MASK64
    return [i for i in range(64) if mask >> i & 1]


def to_i64(mask: int) -> int:
    """Reinterpret a 64-bit mask as the signed value stored in int64 arrays."""
    mask &= MASK64
    return mask - (1 << 64) if mask >> 63 else mask


def from_i64(v) -> int:
    return int(v) & MASK64


@njit(cache=True, nogil=True)
def popcount(m):
    c = 0
    for i in range(64):
        c += (m >> i) & 1
    return c


@njit(cache=True, nogil=True)
def nth_set_bit(m, n):
    """Index of the n-th (0-based, ascending) set bit, or -1."""
    for i in range(64):
        if (m >> i) & 1:
            if n == 0:
                return i
            n -= 1
    return -1


@njit(cache=True, nogil=True)
def pick_owner(owners, seed):
    return nth_set_bit(owners, seed % popcount(owners))


# ----------------------------------------------------------------- proxy sets

def _round_out_f32(lo: np.ndarray, hi: np.ndarray):
    """Round box corners to float32 outward so the box never shrinks."""
    lo32 = lo.astype(np.float32)
    hi32 = hi.astype(np.float32)
    down = lo32.astype(np.float64) > lo
    lo32[down] = np.nextafter(lo32[down], np.float32(-np.inf))
    up = hi32.astype(np.float64) < hi
    hi32[up] = np.nextafter(hi32[up], np.float32(np.inf))
    return lo32.astype(np.float64), hi32.astype(np.float64)


@dataclass(frozen=True)
class Proxy:
    bounds: Aabb
    owners: int


class ProxySet:
    """Ordered proxy list; index order is the tie-break order everywhere."""

    RECORD = struct.Struct("<3f3fQ")

    def __init__(self, lo, hi, owners):
        lo = np.asarray(lo, np.float64).reshape(-1, 3)
        hi = np.asarray(hi, np.float64).reshape(-1, 3)
        self.lo, self.hi = _round_out_f32(lo, hi)
        self.owners = np.array([to_i64(int(o)) for o in owners], np.int64)
        if len(self.owners) != len(self.lo):
            raise ValueError("one owner mask per proxy required")
        if np.any(self.owners == 0):
            raise ValueError("every proxy needs at least one owner")
        if np.any(self.lo > self.hi):
            raise ValueError("proxy boxes must be non-empty")

    @classmethod
    def from_proxies(cls, proxies: list[Proxy]) -> ProxySet:
        return cls([p.bounds.lo for p in proxies], [p.bounds.hi for p in proxies], [p.owners for p in proxies])

    def __len__(self):
        return len(self.owners)

    def __getitem__(self, i) -> Proxy:
        return Proxy(Aabb(self.lo[i], self.hi[i]), from_i64(self.owners[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def owned_by(self, rank: int) -> np.ndarray:
        return np.flatnonzero((self.owners >> rank) & 1)

    def encode(self) -> bytes:
        out = [struct.pack("<I", len(self))]
        for i in range(len(self)):
            out.append(self.RECORD.pack(*self.lo[i].astype(np.float32), *self.hi[i].astype(np.float32),
                                        from_i64(self.owners[i])))
        return b"".join(out)

    @classmethod
    def decode(cls, buf: bytes) -> ProxySet:
        (n,) = struct.unpack_from("<I", buf, 0)
        if len(buf) != 4 + n * cls.RECORD.size:
            raise ValueError(f"proxy set buffer has {len(buf)} bytes, expected {4 + n * cls.RECORD.size}")
        recs = [cls.RECORD.unpack_from(buf, 4 + i * cls.RECORD.size) for i in range(n)]
        return cls([r[0:3] for r in recs], [r[3:6] for r in recs], [r[6] for r in recs])

    def __eq__(self, other):
        return (isinstance(other, ProxySet) and np.array_equal(self.lo, other.lo)
                and np.array_equal(self.hi, other.hi) and np.array_equal(self.owners, other.owners))


# ------------------------------------------------------------------ selection

@njit(cache=True, nogil=True)
def select_proxy(PB, plo, phi, powners, o0, o1, o2, d0, d1, d2, tmin, tmax, culling, visited, stack):
    """Index of the closest eligible proxy, or -1.

    Eligible: pierced within (tmin, tmax] (tmax ignored without culling) and
    no owner in ``visited``. Closest by entry distance max(t_near, tmin);
    equal entries go to the lower index.
    """
    nlo, nhi, nleft, nright, nstart, ncount, nprim = PB
    if nprim.shape[0] == 0:
        return -1
    tend = tmax if culling else np.inf
    best = np.inf
    best_i = -1
    sp = 1
    stack[0] = 0
    while sp > 0:
        sp -= 1
        n = stack[sp]
        limit = best if best < tend else tend
        ok, _ = K._box_hit_conservative(nlo, nhi, n, o0, o1, o2, d0, d1, d2, tmin, limit)
        if not ok:
            continue
        if nleft[n] >= 0:
            stack[sp] = nright[n]
            stack[sp + 1] = nleft[n]
            sp += 2
            continue
        for k in range(nstart[n], nstart[n] + ncount[n]):
            p = nprim[k]
            if powners[p] & visited:
                continue
            t0, t1 = K.box_interval(plo, phi, p, o0, o1, o2, d0, d1, d2)
            if t0 > t1 or t1 <= tmin or t0 > tend:
                continue
            entry = t0 if t0 > tmin else tmin
            if entry < best or (entry == best and p < best_i):
                best = entry
                best_i = p
    return best_i


@njit(cache=True, nogil=True)
def next_rank(PB, plo, phi, powners, o0, o1, o2, d0, d1, d2, tmin, tmax, culling, visited, pixel, bounce, stack):
    p = select_proxy(PB, plo, phi, powners, o0, o1, o2, d0, d1, d2, tmin, tmax, culling, visited, stack)
    if p < 0:
        return -1
    return pick_owner(powners[p], pick_seed(pixel, bounce, popcount(visited)))


@njit(cache=True, nogil=True)
def replay_mask(PB, plo, phi, powners, o0, o1, o2, d0, d1, d2, tmin, origin_rank, self_rank, rank_count,
                pixel, bounce, stack):
    """Reconstruct the visited mask up to and including ``self_rank``.

    Returns (mask, ok); ok is False when the walk ends or exceeds
    ``rank_count`` steps without reaching ``self_rank``.
    """
    visited = np.int64(1) << origin_rank
    if origin_rank == self_rank:
        return visited, True
    for _ in range(rank_count):
        r = next_rank(PB, plo, phi, powners, o0, o1, o2, d0, d1, d2, tmin, np.inf, False, visited,
                      pixel, bounce, stack)
        if r < 0:
            return visited, False
        visited |= np.int64(1) << r
        if r == self_rank:
            return visited, True
    return visited, False


class ProxyBvh:
    """BVH over a proxy set; built identically from identical input on every rank."""

    def __init__(self, proxies: ProxySet, leaf_size: int = 2):
        self.proxies = proxies
        self.nodes = BvhNodes.build(proxies.lo, proxies.hi, leaf_size)
        self.PB = self.nodes.as_tuple()
        self._stack = np.empty(K.STACK_SIZE, np.int64)

    def closest_proxy(self, origin, direction, visited: int = 0, tmin: float = 0.0, tmax: float = np.inf,
                      culling: bool = True) -> int | None:
        o, d = np.asarray(origin, float), np.asarray(direction, float)
        p = select_proxy(self.PB, self.proxies.lo, self.proxies.hi, self.proxies.owners, o[0], o[1], o[2],
                         d[0], d[1], d[2], float(tmin), float(tmax), bool(culling), to_i64(visited), self._stack)
        return None if p < 0 else int(p)


def select_next_rank(origin, direction, visited: int, proxy_bvh: ProxyBvh, tmax_culling: bool, pick: int,
                     tmin: float = 0.0, tmax: float = np.inf) -> int | None:
    """Next rank for a ray, or None when its distributed traversal is complete.

    ``pick`` chooses among the chosen proxy's owners: the ``pick % popcount``-th
    set bit.
    """
    d = np.asarray(direction, float)
    if not np.any(d):
        raise ValueError("ray direction must be non-zero")
    p = proxy_bvh.closest_proxy(origin, d, visited, tmin, tmax, tmax_culling)
    if p is None:
        return None
    return int(pick_owner(proxy_bvh.proxies.owners[p], int(pick) & 0xFFFFFFFF))


def replay_visited(origin, direction, origin_rank: int, self_rank: int, proxy_bvh: ProxyBvh, rank_count: int,
                   pixel: int, bounce: int, tmin: float = 0.0) -> int:
    """Recompute the visited mask of a ray that arrived at ``self_rank``."""
    o, d = np.asarray(origin, float), np.asarray(direction, float)
    pr = proxy_bvh.proxies
    mask, ok = replay_mask(proxy_bvh.PB, pr.lo, pr.hi, pr.owners, o[0], o[1], o[2], d[0], d[1], d[2],
                           float(tmin), origin_rank, self_rank, rank_count, pixel, bounce, proxy_bvh._stack)
    if not ok:
        raise ProtocolViolation(f"replay from rank {origin_rank} never reached rank {self_rank}")
    return from_i64(mask)
