"""Scene partitioners, the blended SAH/memory cost, and proxy construction.

Every strategy starts from one part holding the whole scene and repeatedly
splits the part with the largest memory estimate in two. Multi-instance
objects contribute their instances as items, single-instance objects are
broken into their meshes; ``best`` additionally braids large meshes into
fragments before partitioning.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .accel.aabb import Aabb, union_all
from .accel.bvh import braid_split
from .proxy import ProxySet, mask_of, ranks_of

STRATEGIES = ("spatial-simple", "spatial-sah", "object-naive", "object-proxies", "bvh-style", "best")
SPATIAL = ("spatial-simple", "spatial-sah")
OBJECT = ("object-naive", "object-proxies")
DEFAULT_PROXY_MODE = {
    "spatial-simple": "domain-boxes",
    "spatial-sah": "domain-boxes",
    "object-naive": "item-boxes",
    "object-proxies": "braided",
    "bvh-style": "item-boxes",
    "best": "item-boxes",
}
N_PLANES = 7
PAD_REL = 1e-6


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryModel:
    bytes_per_triangle: float = 24.0
    bytes_per_vertex: float = 24.0
    bytes_per_instance: float = 64.0
    bytes_per_mesh: float = 128.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v > 0:
                raise ValueError(f"{k} must be positive")


@dataclass(frozen=True)
class PartitionOptions:
    replication_cap: float = 0.05
    max_fragments: int = 64
    presplit_area_frac: float = 0.25   # of scene area / rankCount
    presplit_extent_frac: float = 0.25  # of scene diagonal
    braid_boxes: int = 64
    proxy_mode: str | None = None


@dataclass(eq=False)
class Item:
    """Smallest assignable piece: an instance, a mesh of a single-instance
    object, or a braided fragment of such a mesh."""

    instance: int
    object: int
    mesh: int = -1
    fragment: int = -1
    tris: np.ndarray | None = None  # object-local triangle ids; None = whole object
    bounds: Aabb = field(default_factory=Aabb.empty)
    tri_count: int = 0
    vert_count: int = 0

    @property
    def kind(self) -> str:
        if self.mesh < 0:
            return "instance"
        return "mesh" if self.fragment < 0 else "fragment"

    def to_json(self) -> dict:
        d = {"kind": self.kind, "instance": self.instance, "object": self.object}
        if self.mesh >= 0:
            d["mesh"] = self.mesh
        if self.fragment >= 0:
            d["fragment"] = self.fragment
        return d


def _pad(box: Aabb, pad: float) -> Aabb:
    return Aabb(box.lo - pad, box.hi + pad)


def build_items(scene, presplit=None) -> list[Item]:
    """Items in declaration order; ``presplit(item) -> max fragments`` (or 0)."""
    counts = scene.instance_counts()
    items = []
    for i, inst in enumerate(scene.instances):
        obj = scene.objects[inst.object]
        if counts[inst.object] > 1:
            items.append(Item(i, inst.object, bounds=scene.instance_bounds(i), tri_count=obj.tri_count,
                              vert_count=sum(m.vertex_count for m in obj.meshes)))
            continue
        for mi, m in enumerate(obj.meshes):
            off = obj.mesh_tri_offsets[mi]
            world = scene.world_vertices(i, mi)
            item = Item(i, inst.object, mi, tris=np.arange(off, off + m.tri_count),
                        bounds=Aabb.from_points(world[np.unique(m.triangles)]), tri_count=m.tri_count,
                        vert_count=m.vertex_count)
            k = presplit(item) if presplit else 0
            if k > 1:
                for f, (box, sub) in enumerate(braid_split(world, m.triangles, k)):
                    items.append(Item(i, inst.object, mi, f, tris=off + sub, bounds=box, tri_count=len(sub),
                                      vert_count=len(np.unique(m.triangles[sub]))))
            else:
                items.append(item)
    return items


class MemoryTally:
    """Memory estimate over unique meshes plus instances.

    Fragments of one mesh that share a part count as a single mesh holding
    the union of their triangles and referenced vertices, so splitting a
    mesh into fragments never changes the whole-scene estimate.
    """

    def __init__(self, scene, items: list[Item], model: MemoryModel):
        self.model = model
        self.scene = scene
        self.keys = []
        self.frag_verts = {}
        for i, it in enumerate(items):
            if it.mesh < 0:
                self.keys.append([(it.object, m) for m in range(len(scene.objects[it.object].meshes))])
            else:
                self.keys.append([(it.object, it.mesh)])
                if it.fragment >= 0:
                    obj = scene.objects[it.object]
                    local = obj.meshes[it.mesh].triangles[it.tris - obj.mesh_tri_offsets[it.mesh]]
                    bits = 0
                    for v in np.unique(local).tolist():
                        bits |= 1 << v
                    self.frag_verts[i] = bits
        self.tris = [it.tri_count for it in items]
        self.inst = [it.instance for it in items]

    def _mesh_bytes(self, tris, verts):
        m = self.model
        return tris * m.bytes_per_triangle + verts * m.bytes_per_vertex + m.bytes_per_mesh

    def estimate(self, item_ids) -> float:
        whole = set()
        partial = {}
        insts = set()
        for i in item_ids:
            insts.add(self.inst[i])
            if i in self.frag_verts:
                key = self.keys[i][0]
                tris, bits = partial.get(key, (0, 0))
                partial[key] = (tris + self.tris[i], bits | self.frag_verts[i])
            else:
                whole.update(self.keys[i])
        total = 0.0
        for o, m in whole:
            mesh = self.scene.objects[o].meshes[m]
            total += self._mesh_bytes(mesh.tri_count, mesh.vertex_count)
        for (o, m), (tris, bits) in partial.items():
            mesh = self.scene.objects[o].meshes[m]
            verts = mesh.vertex_count if tris == mesh.tri_count else bits.bit_count()
            total += self._mesh_bytes(tris, verts)
        return total + len(insts) * self.model.bytes_per_instance


def memory_estimate(scene, items: list[Item], model: MemoryModel = MemoryModel()) -> float:
    return MemoryTally(scene, items, model).estimate(range(len(items)))


# -------------------------------------------------------------------- costing

def sah_term(box_l: Aabb, n_l: int, box_r: Aabb, n_r: int, box_all: Aabb, n_all: int) -> float:
    whole = box_all.surface_area() * n_all
    if whole <= 0:
        return 1.0
    return (box_l.surface_area() * n_l + box_r.surface_area() * n_r) / whole


def split_cost(box_l, n_l, mem_l, box_r, n_r, mem_r, box_all, n_all, mem_all) -> float:
    """0.5 * SAH(L, R) / SAH(whole) + 0.5 * (mem(L) + mem(R)) / mem(whole); inf if a side is empty."""
    if n_l == 0 or n_r == 0:
        return np.inf
    return 0.5 * sah_term(box_l, n_l, box_r, n_r, box_all, n_all) + 0.5 * (mem_l + mem_r) / mem_all


def candidate_planes(centroids: np.ndarray) -> list[tuple[int, float]]:
    """3 x 7 equidistant interior planes over the centroid bounds."""
    lo = centroids.min(axis=0)
    hi = centroids.max(axis=0)
    out = []
    for axis in range(3):
        for i in range(1, N_PLANES + 1):
            out.append((axis, lo[axis] + (hi[axis] - lo[axis]) * i / (N_PLANES + 1)))
    return out


# ----------------------------------------------------------------- partitions

@dataclass(eq=False)
class Part:
    units: list[int]  # indices into the unit list
    memory: float
    domain: Aabb | None = None


@dataclass(eq=False)
class PartitionPlan:
    strategy: str
    rank_count: int
    items: list[Item]
    owners: list[int]            # per item rank mask
    parts: list[Part]
    units: list[list[int]]       # unit -> item ids
    proxy_mode: str
    proxies: ProxySet
    replicated: list[int]
    replication_cap: float
    memory: list[float]          # per rank estimate

    def items_of(self, rank: int) -> list[int]:
        return [i for i, m in enumerate(self.owners) if m >> rank & 1]

    def pieces(self, rank: int):
        """(instance, object-local triangles or None, owner mask) per held item."""
        return [(self.items[i].instance, self.items[i].tris, self.owners[i]) for i in self.items_of(rank)]

    @property
    def replication_fraction(self) -> float:
        return len(self.replicated) / max(1, len(self.items))

    @property
    def max_part(self) -> float:
        return max(self.memory)

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "rankCount": self.rank_count,
            "proxyMode": self.proxy_mode,
            "replicationCap": self.replication_cap,
            "replicated": list(self.replicated),
            "memory": list(self.memory),
            "items": [dict(it.to_json(), ranks=ranks_of(m)) for it, m in zip(self.items, self.owners)],
            "domains": [None if p.domain is None else [p.domain.lo.tolist(), p.domain.hi.tolist()]
                        for p in self.parts],
        }

    def digest(self) -> bytes:
        h = hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode())
        h.update(self.proxies.encode())
        return h.digest()


class _Splitter:
    def __init__(self, scene, strategy, model, opts, rank_count):
        self.scene = scene
        self.strategy = strategy
        self.opts = opts
        self.pad = PAD_REL * max(scene.bounds.diagonal, 1e-12)
        presplit = self._presplit_rule(rank_count) if strategy == "best" else None
        self.items = build_items(scene, presplit)
        self.tally = MemoryTally(scene, self.items, model)
        if strategy in OBJECT:
            groups = {}
            counts = scene.instance_counts()
            self.units = []
            for i, it in enumerate(self.items):
                if counts[it.object] > 1:
                    if it.object not in groups:
                        groups[it.object] = len(self.units)
                        self.units.append([])
                    self.units[groups[it.object]].append(i)
                else:
                    self.units.append([i])
        else:
            self.units = [[i] for i in range(len(self.items))]
        self.unit_box = [union_all(self.items[i].bounds for i in u) for u in self.units]
        self.unit_centroid = np.array([b.centroid for b in self.unit_box]).reshape(-1, 3)
        self.budget = int(np.floor(opts.replication_cap * len(self.items) + 1e-9)) if strategy == "best" else 0
        self.replicated = set()

    def _presplit_rule(self, rank_count):
        area = self.scene.bounds.surface_area()
        diag = self.scene.bounds.diagonal

        def rule(item):
            b = item.bounds
            big = (b.surface_area() > self.opts.presplit_area_frac * area / rank_count
                   or float(np.max(b.extent)) > self.opts.presplit_extent_frac * diag)
            return self.opts.max_fragments if big else 0
        return rule

    def items_of_units(self, units):
        return [i for u in units for i in self.units[u]]

    def mem(self, units) -> float:
        return self.tally.estimate(self.items_of_units(units))

    def box(self, units) -> Aabb:
        return union_all(self.unit_box[u] for u in units)

    def root(self) -> Part:
        units = list(range(len(self.units)))
        dom = _pad(self.scene.bounds, self.pad) if self.strategy in SPATIAL else None
        return Part(units, self.mem(units), dom)

    def splittable(self, part: Part) -> bool:
        if self.strategy in SPATIAL:
            return float(np.max(part.domain.extent)) > 0
        return len(part.units) >= 2

    # spatial -------------------------------------------------------------
    def _spatial_sides(self, part, axis, pos):
        lo_half = Aabb(part.domain.lo, np.where(np.arange(3) == axis, pos, part.domain.hi))
        hi_half = Aabb(np.where(np.arange(3) == axis, pos, part.domain.lo), part.domain.hi)
        out = []
        for half in (lo_half, hi_half):
            units = [u for u in part.units if self.unit_box[u].overlaps(half)]
            content = self.box(units).intersection(half) if units else Aabb.empty()
            out.append((units, content))
        return out

    def split_spatial(self, part: Part):
        dom = part.domain
        best = None
        if self.strategy == "spatial-sah":
            n = len(part.units)
            for axis, pos in candidate_planes(self.unit_centroid[part.units]):
                if not dom.lo[axis] < pos < dom.hi[axis]:
                    continue
                (ul, bl), (ur, br) = self._spatial_sides(part, axis, pos)
                c = split_cost(bl, len(ul), self.mem(ul), br, len(ur), self.mem(ur), dom, n, part.memory)
                if best is None or c < best[0]:
                    best = (c, axis, pos)
        if best is None or not np.isfinite(best[0]):
            axis = int(np.argmax(dom.extent))
            pos = 0.5 * (dom.lo[axis] + dom.hi[axis])
        else:
            _, axis, pos = best
        children = []
        for units, content in self._spatial_sides(part, axis, pos):
            children.append(Part(units, self.mem(units), content))
        return children

    # object / hybrid -------------------------------------------------------
    def _sides(self, units, axis, pos):
        left = [u for u in units if self.unit_centroid[u, axis] < pos]
        right = [u for u in units if not self.unit_centroid[u, axis] < pos]
        return left, right

    def _cost(self, left, right, part_box, n, mem_all, extra_l=None, extra_r=None):
        bl = self.box(left)
        br = self.box(right)
        if extra_l is not None:
            bl = bl.union(extra_l)
        if extra_r is not None:
            br = br.union(extra_r)
        nl = len(left) + (extra_l is not None)
        nr = len(right) + (extra_r is not None)
        return split_cost(bl, nl, self.mem(left), br, nr, self.mem(right), part_box, n, mem_all)

    def split_object(self, part: Part):
        units = part.units
        pbox = self.box(units)
        n = len(units)
        best = None
        for axis, pos in candidate_planes(self.unit_centroid[units]):
            left, right = self._sides(units, axis, pos)
            c = self._cost(left, right, pbox, n, part.memory)
            if best is None or c < best[0]:
                best = (c, axis, pos)
        if not np.isfinite(best[0]):
            # all centroids coincide on every candidate: median by sorted centroid
            axis = int(np.argmax(np.ptp(self.unit_centroid[units], axis=0)))
            order = sorted(units, key=lambda u: (self.unit_centroid[u, axis], u))
            left, right = sorted(order[: n // 2]), sorted(order[n // 2:])
        else:
            _, axis, pos = best
            left, right = self._sides(units, axis, pos)
            if self.strategy == "best" and self.budget > len(self.replicated):
                left, right = self._replicate(left, right, pbox, n, part.memory, axis, pos)
        return [Part(left, self.mem(left)), Part(right, self.mem(right))]

    def _replicate(self, left, right, pbox, n, mem_all, axis, pos):
        """Greedily duplicate straddling items when that lowers the split cost.

        A duplicated item's box enters each side clipped at the plane: each
        copy only needs to serve its own half-space.
        """
        left, right = list(left), list(right)
        straddling = [u for u in left + right
                      if self.unit_box[u].lo[axis] < pos < self.unit_box[u].hi[axis] and u not in self.replicated]
        for u in sorted(straddling):
            if len(self.replicated) >= self.budget:
                break
            box = self.unit_box[u]
            lo_clip = box.split(axis, pos)[0]
            hi_clip = box.split(axis, pos)[1]
            others_l = [x for x in left if x != u]
            others_r = [x for x in right if x != u]
            forced_l = self._cost(others_l + [u], others_r, pbox, n, mem_all)
            forced_r = self._cost(others_l, others_r + [u], pbox, n, mem_all)
            bl = self.box(others_l).union(lo_clip)
            br = self.box(others_r).union(hi_clip)
            dup = split_cost(bl, len(others_l) + 1, self.mem(others_l + [u]), br, len(others_r) + 1,
                             self.mem(others_r + [u]), pbox, n, mem_all)
            if dup < min(forced_l, forced_r):
                left = sorted(others_l + [u])
                right = sorted(others_r + [u])
                self.replicated.add(u)
        return left, right

    def split(self, part: Part):
        if self.strategy in SPATIAL:
            return self.split_spatial(part)
        return self.split_object(part)

    def run(self, n_parts: int):
        """Yield the part list after each split, starting with the root."""
        parts = [self.root()]
        yield parts
        while len(parts) < n_parts:
            cand = [i for i, p in enumerate(parts) if self.splittable(p)]
            if not cand:
                return
            k = min(cand, key=lambda i: (-parts[i].memory, i))
            left, right = self.split(parts[k])
            parts = parts[:k] + [left] + parts[k + 1:] + [right]
            yield parts


def partition(scene, rank_count: int, strategy: str, model: MemoryModel = MemoryModel(),
              options: PartitionOptions = PartitionOptions()) -> PartitionPlan:
    if strategy not in STRATEGIES:
        raise PartitionError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")
    if rank_count < 1:
        raise PartitionError("rank count must be >= 1")
    if rank_count > 64:
        raise PartitionError("at most 64 ranks are supported")
    sp = _Splitter(scene, strategy, model, options, rank_count)
    if rank_count > len(sp.items):
        raise PartitionError(f"{rank_count} ranks but only {len(sp.items)} partitionable items")
    parts = None
    for parts in sp.run(rank_count):
        pass
    if len(parts) < rank_count:
        raise PartitionError(f"could only form {len(parts)} parts for {rank_count} ranks")
    return _finish(sp, parts, rank_count, options)


def _finish(sp: _Splitter, parts, rank_count, options) -> PartitionPlan:
    owners = [0] * len(sp.items)
    for r, p in enumerate(parts):
        for i in sp.items_of_units(p.units):
            owners[i] |= 1 << r
    mode = options.proxy_mode or DEFAULT_PROXY_MODE[sp.strategy]
    proxies = build_proxy_set(sp, parts, owners, mode, options.braid_boxes)
    replicated = sorted(i for i, m in enumerate(owners) if bin(m).count("1") > 1)
    return PartitionPlan(sp.strategy, rank_count, sp.items, owners, parts, sp.units, mode, proxies,
                         replicated, options.replication_cap, [p.memory for p in parts])


def build_proxy_set(sp: _Splitter, parts, owners, mode: str, braid_boxes: int = 64) -> ProxySet:
    lo, hi, own = [], [], []

    def add(box, mask):
        lo.append(box.lo)
        hi.append(box.hi)
        own.append(mask)

    if mode == "domain-boxes":
        if parts[0].domain is None:
            raise PartitionError("domain-boxes proxies need a spatial partition")
        for r, p in enumerate(parts):
            add(p.domain, 1 << r)
    elif mode == "item-boxes":
        for u, ids in enumerate(sp.units):
            add(_pad(sp.unit_box[u], sp.pad), owners[ids[0]] if len(ids) == 1 else _common_mask(owners, ids))
    elif mode == "braided":
        for i, it in enumerate(sp.items):
            if it.mesh < 0:
                add(_pad(it.bounds, sp.pad), owners[i])
                continue
            m = sp.scene.objects[it.object].meshes[it.mesh]
            off = sp.scene.objects[it.object].mesh_tri_offsets[it.mesh]
            world = sp.scene.world_vertices(it.instance, it.mesh)
            for box, _ in braid_split(world, m.triangles[it.tris - off], braid_boxes):
                add(_pad(box, sp.pad), owners[i])
    else:
        raise PartitionError(f"unknown proxy mode {mode!r}")
    return ProxySet(lo, hi, own)


def _common_mask(owners, ids):
    m = 0
    for i in ids:
        m |= owners[i]
    return m


def max_part_size_curve(scene, strategy: str, model: MemoryModel = MemoryModel(), n_max: int = 32,
                        options: PartitionOptions = PartitionOptions()) -> list[tuple[int, float]]:
    """Largest part estimate for N = 1..n_max; once no part can split, the value holds."""
    if n_max < 1:
        raise PartitionError("n_max must be >= 1")
    if strategy == "best":
        # pre-splitting depends on the part count, so each N is its own run
        out = []
        for n in range(1, n_max + 1):
            sp = _Splitter(scene, strategy, model, options, n)
            parts = None
            for parts in sp.run(n):
                pass
            out.append((n, max(p.memory for p in parts)))
        return out
    sp = _Splitter(scene, strategy, model, options, n_max)
    seq = [max(p.memory for p in parts) for parts in sp.run(n_max)]
    seq += [seq[-1]] * (n_max - len(seq))
    return [(n + 1, v) for n, v in enumerate(seq)]


# ------------------------------------------------------------------- dumping

def proxies_to_ply(proxies: ProxySet) -> str:
    """ASCII PLY of proxy boxes, coloured by lowest owner rank."""
    palette = np.array([(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
                        (145, 30, 180), (70, 240, 240), (240, 50, 230)])
    corners = [(i & 1, i >> 1 & 1, i >> 2 & 1) for i in range(8)]
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    lines = ["ply", "format ascii 1.0", f"element vertex {8 * len(proxies)}", "property float x",
             "property float y", "property float z", "property uchar red", "property uchar green",
             "property uchar blue", f"element face {6 * len(proxies)}", "property list uchar int vertex_indices",
             "end_header"]
    for p in proxies:
        c = palette[ranks_of(p.owners)[0] % len(palette)]
        for cx, cy, cz in corners:
            x = p.bounds.hi[0] if cx else p.bounds.lo[0]
            y = p.bounds.hi[1] if cy else p.bounds.lo[1]
            z = p.bounds.hi[2] if cz else p.bounds.lo[2]
            lines.append(f"{x:.6g} {y:.6g} {z:.6g} {c[0]} {c[1]} {c[2]}")
    for k in range(len(proxies)):
        for q in quads:
            lines.append("4 " + " ".join(str(8 * k + v) for v in q))
    return "\n".join(lines) + "\n"


def proxies_to_json(proxies: ProxySet) -> list[dict]:
    return [{"lo": p.bounds.lo.tolist(), "hi": p.bounds.hi.tolist(), "owners": ranks_of(p.owners)}
            for p in proxies]


__all__ = [
    "STRATEGIES", "MemoryModel", "PartitionOptions", "PartitionError", "Item", "Part", "PartitionPlan",
    "build_items", "memory_estimate", "split_cost", "candidate_planes", "partition", "max_part_size_curve",
    "build_proxy_set", "proxies_to_ply", "proxies_to_json", "mask_of",
]
