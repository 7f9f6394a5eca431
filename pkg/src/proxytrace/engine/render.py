"""Per-rank wavefront path tracer and the frame driver."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..accel.geometry import LocalGeometry, SceneGeometry
from ..metrics import FrameStats, forwards_from_matrices
from ..proxy import ProtocolViolation, ProxyBvh
from ..rng import sample_seed
from ..transport.group import RankGroup, tile_rows
from ..transport.inproc import run_ranks
from ..transport.wire import FLAG_COMPLETE, FLAG_SHADOW, PIXEL_MASK, RayBatch, WireFormat, quantize_f32, quantize_half
from . import kernels as EK

log = logging.getLogger(__name__)

SHADOW_SHORTEN = 1e-3
OFFSET_REL = 1e-5


class InvariantViolation(RuntimeError):
    """A distributed traversal broke the no-revisit / round-bound guarantee."""


@dataclass(frozen=True)
class RenderConfig:
    width: int = 128
    height: int = 128
    spp: int = 1
    max_bounce: int = 4
    seed: int = 0
    mask: str = "bitmask8"          # bitmask8 | bitmask64 | replay
    tmax_culling: bool = True       # ignored (forced off) in replay mode
    roulette_q: float = 0.1
    retrace_tol: float = 1e-4
    log_arrivals: bool = False

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.width * self.height > PIXEL_MASK + 1:
            raise ValueError("image size must be positive and fit 28-bit pixel ids")
        if self.spp < 1 or self.max_bounce < 0:
            raise ValueError("spp must be >= 1 and bounces >= 0")

    @property
    def culling(self) -> bool:
        return self.tmax_culling and self.mask != "replay"

    def wire(self, rank_count: int) -> WireFormat:
        return WireFormat.named(self.mask, rank_count)


@dataclass
class RankFrame:
    """What one rank holds after a frame."""

    rank: int
    partial: np.ndarray                   # H x W x 3 float32, this rank's contributions
    tile: np.ndarray                      # composited rows of this rank's tile
    tile_rows: tuple[int, int]
    stats: FrameStats
    arrivals: list = field(default_factory=list)
    image: np.ndarray | None = None       # assembled accumulation on the master
    ldr: np.ndarray | None = None         # assembled tone-mapped RGB8 on the master
    local_stats: FrameStats | None = None  # this rank's own record (stats is merged on the master)


def scene_geometry(scene) -> SceneGeometry:
    return SceneGeometry(scene)


def geometry_arrays(geo: SceneGeometry):
    return (geo.tri_material, geo.tri_normals, geo.tri_has_normals, geo.obj_tri_offset, geo.inst_object,
            geo.inst_xf, geo.inst_normal, geo.mat_albedo, geo.mat_emission, geo.mat_emissive)


def light_arrays(geo: SceneGeometry):
    return (geo.light_v0, geo.light_e1, geo.light_e2, geo.light_emission, geo.light_area, geo.light_normal,
            geo.light_centroid, geo.light_power)


def make_primaries(camera, cfg: RenderConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Quantized origins and directions of every pixel's primary ray."""
    right, up, fwd = camera.basis()
    tan_half = np.tan(np.radians(camera.fov_y) / 2)
    dirs = EK.camera_rays(cfg.width, cfg.height, seed, np.asarray(camera.pos, float), right, up, fwd, tan_half)
    org = np.broadcast_to(quantize_f32(np.asarray(camera.pos, float)), dirs.shape).copy()
    return org, quantize_half(dirs)


class Shader:
    """Shading shared by the distributed renderer and the single-node reference."""

    def __init__(self, scene, geo: SceneGeometry, local: LocalGeometry, cfg: RenderConfig, npix: int):
        self.geo_arrays = geometry_arrays(geo)
        self.light_arrays = light_arrays(geo)
        self.env = np.asarray(scene.environment, float)
        self.local = local
        self.cfg = cfg
        self.eps = OFFSET_REL * max(scene.bounds.diagonal, 1e-6)
        self.fb = np.zeros((npix, 3))
        self.dropped = 0
        self.misses = 0

    def shade(self, q: RayBatch, seed: int, bounce: int, rank: int) -> RayBatch:
        if len(q):
            q = q.take(np.lexsort((q.is_shadow, q.pixel)))
        cfg = self.cfg
        (p_org, p_dir, p_thr, p_ok, s_org, s_dir, s_thr, s_end, s_ok, misses) = EK.shade(
            self.local.G, self.geo_arrays, self.light_arrays, self.env, q.org, q.dir, q.thr, q.tmax, q.flags,
            q.hit, self.fb, seed, bounce, cfg.max_bounce, self.eps, cfg.roulette_q, cfg.retrace_tol)
        self.misses += int(misses)
        pix = q.pixel
        out = []
        for ok, o, d, t, shadow in ((p_ok, p_org, p_dir, p_thr, False), (s_ok, s_org, s_dir, s_thr, True)):
            idx = np.flatnonzero(ok)
            o = quantize_f32(o[idx])
            d = quantize_half(d[idx])
            t = quantize_half(t[idx])
            keep = np.all(np.isfinite(t), axis=1) & np.all(np.isfinite(d), axis=1)
            self.dropped += int((~keep).sum())
            keep &= np.any(t > 0, axis=1) & np.any(d != 0, axis=1)
            n = int(keep.sum())
            if shadow:
                # stop just short of the sampled light point, measured along the quantized direction
                dd = d[keep]
                tm = (1.0 - SHADOW_SHORTEN) * np.einsum("ij,ij->i", s_end[idx][keep] - o[keep], dd) / np.einsum(
                    "ij,ij->i", dd, dd)
                tmax = quantize_f32(tm)
                flags = pix[idx][keep] | FLAG_SHADOW
            else:
                tmax = np.full(n, np.inf)
                flags = pix[idx][keep]
            me = np.int64(1) << rank
            out.append(RayBatch(o[keep], d[keep], t[keep], tmax, flags.astype(np.int64), np.full(n, me),
                                np.zeros(n, np.int64), np.full(n, rank, np.int64)))
        nxt = RayBatch.concat(out)
        return nxt


class RankRenderer:
    def __init__(self, rank: int, size: int, scene, plan, cfg: RenderConfig, geo: SceneGeometry | None = None,
                 camera=None):
        self.rank = rank
        self.size = size
        self.scene = scene
        self.plan = plan
        self.cfg = cfg
        self.camera = camera or scene.camera
        self.geo = geo or SceneGeometry(scene)
        self.local = LocalGeometry(self.geo, plan.pieces(rank))
        self.ent_owners = self.local.ent_owners
        self.pbvh = ProxyBvh(plan.proxies)
        pr = plan.proxies
        self.PB = (self.pbvh.PB, pr.lo, pr.hi, pr.owners)
        self.npix = cfg.width * cfg.height
        self.shader = Shader(scene, self.geo, self.local, cfg, self.npix)
        self.stats = FrameStats(rank_count=size, per_rank_memory=list(plan.memory))
        self.arrivals = []
        self.rays_traced = 0

    # -- stages ---------------------------------------------------------------
    def primaries(self, seed: int) -> RayBatch:
        org, dirs = make_primaries(self.camera, self.cfg, seed)
        PB, lo, hi, owners = self.PB
        keep = np.flatnonzero(EK.primary_owner(PB, lo, hi, owners, org, dirs, self.size) == self.rank)
        n = len(keep)
        return RayBatch(org[keep], dirs[keep], np.ones((n, 3)), np.full(n, np.inf), keep.astype(np.int64),
                        np.full(n, np.int64(1) << self.rank), np.zeros(n, np.int64),
                        np.full(n, self.rank, np.int64))

    def traverse(self, group: RankGroup, queue: RayBatch, bounce: int, sample: int) -> RayBatch:
        """Move one wavefront until every ray sits on a rank that can shade it."""
        PB, lo, hi, owners = self.PB
        seen = np.zeros(2 * self.npix, np.bool_)
        arrivals = queue
        to_shade = []
        rounds = 0
        while True:
            traversing = (arrivals.flags & FLAG_COMPLETE) == 0
            if rounds and self.cfg.mask == "replay" and len(arrivals):
                visited, ok = EK.replay(PB, lo, hi, owners, arrivals.org, arrivals.dir, arrivals.flags,
                                        arrivals.origin_rank, self.rank, self.size, bounce)
                if not ok.all():
                    raise ProtocolViolation(f"rank {self.rank}: replay failed for {int((~ok).sum())} rays")
                arrivals.visited = np.where(traversing, visited, arrivals.visited)
            if rounds and self.cfg.log_arrivals:
                idx = np.flatnonzero(traversing)
                self.arrivals.append(np.stack([np.full(len(idx), sample), np.full(len(idx), bounce),
                                               arrivals.flags[idx], np.full(len(idx), self.rank),
                                               arrivals.visited[idx]], axis=1))
            key = 2 * arrivals.pixel[traversing] + arrivals.is_shadow[traversing]
            self.stats.revisits += int(seen[key].sum()) + (len(key) - len(np.unique(key)))
            seen[key] = True
            self.rays_traced += int(traversing.sum())

            EK.trace(self.local.G, self.ent_owners, arrivals.org, arrivals.dir, arrivals.tmax, arrivals.flags,
                     arrivals.hit)
            dest = EK.route(PB, lo, hi, owners, arrivals.org, arrivals.dir, arrivals.tmax, arrivals.flags,
                            arrivals.visited, arrivals.hit, self.rank, self.cfg.culling, bounce)
            to_shade.append(arrivals.take(np.flatnonzero(dest < 0)))
            order = np.argsort(dest, kind="stable")
            sorted_dest = dest[order]
            buckets = []
            for j in range(self.size):
                a, b = np.searchsorted(sorted_dest, [j, j + 1])
                buckets.append(arrivals.take(order[a:b]))
            counts = [len(b) for b in buckets]
            sent = sum(counts)
            self.stats.forwards_total += sent
            self.stats.shade_returns += int(((arrivals.flags & FLAG_COMPLETE) != 0).sum())
            mat = group.exchange_counts(counts)
            if not mat.any():
                break
            rounds += 1
            self.stats.forwards_per_round.append(int(mat.sum()))
            if rounds > self.size:
                raise InvariantViolation(f"rank {self.rank}: {rounds} exchange rounds with {self.size} ranks")
            arrivals = group.exchange_rays(buckets)
        self.stats.rounds_per_wavefront.append(rounds)
        return RayBatch.concat(to_shade)

    def render(self, group: RankGroup) -> RankFrame:
        cfg = self.cfg
        for s in range(cfg.spp):
            seed = sample_seed(cfg.seed, s)
            queue = self.primaries(seed)
            for bounce in range(cfg.max_bounce + 1):
                shade_q = self.traverse(group, queue, bounce, s)
                queue = self.shader.shade(shade_q, seed, bounce, self.rank)
        return self.finish(group)

    def finish(self, group: RankGroup) -> RankFrame:
        cfg = self.cfg
        partial = self.shader.fb.astype(np.float32).reshape(cfg.height, cfg.width, 3)
        tile = group.exchange_frame_tiles(partial)
        st = self.stats
        st.dropped_nonfinite = self.shader.dropped
        st.retrace_misses = self.shader.misses
        st.per_rank_ray_counts = [self.rays_traced]
        st.bytes_rays = int(group.stats.bytes_rays)
        st.bytes_tiles = int(group.stats.bytes_tiles)
        st.matrix_forwards = forwards_from_matrices(group.stats.count_matrices)
        frame = RankFrame(self.rank, partial, tile, tile_rows(cfg.height, self.size, self.rank), st,
                          self.arrivals, local_stats=st)
        # master assembly: composited tiles plus merged statistics
        tiles = group.gather(tile.tobytes(), root=0)
        stats = group.gather(st.to_json().encode(), root=0)
        if group.rank == 0:
            img = np.zeros((cfg.height, cfg.width, 3), np.float32)
            for r, buf in enumerate(tiles):
                r0, r1 = tile_rows(cfg.height, self.size, r)
                img[r0:r1] = np.frombuffer(buf, np.float32).reshape(r1 - r0, cfg.width, 3)
            frame.image = img
            frame.ldr = tone_map(img, cfg.spp)
            frame.stats = FrameStats.merge([FrameStats.from_json(b.decode()) for b in stats])
        return frame


def tone_map(accum: np.ndarray, spp: int, exposure: float = 1.0, gamma: float = 2.2) -> np.ndarray:
    x = np.clip(accum.astype(np.float64) / spp * exposure, 0.0, 1.0)
    return np.round(255.0 * x ** (1.0 / gamma)).astype(np.uint8)


@dataclass
class FrameResult:
    image: np.ndarray        # H x W x 3 float32 accumulation (sum over spp)
    ldr: np.ndarray          # H x W x 3 uint8
    stats: FrameStats
    frames: list             # per-rank RankFrame


def render_rank(group: RankGroup, scene, plan, cfg: RenderConfig, geo=None, camera=None) -> RankFrame:
    """Entry point for one rank of a group (any backend)."""
    if plan.rank_count != group.size:
        raise ValueError(f"plan is for {plan.rank_count} ranks, group has {group.size}")
    group.check_digest(plan.digest() + scene.digest())
    return RankRenderer(group.rank, group.size, scene, plan, cfg, geo, camera).render(group)


def render_inproc(scene, plan, cfg: RenderConfig, camera=None, geo=None, timeout: float = 600.0) -> FrameResult:
    """Render a frame with every rank as a thread of this process."""
    geo = geo or SceneGeometry(scene)
    size = plan.rank_count
    frames = run_ranks(size, lambda g: render_rank(g, scene, plan, cfg, geo, camera), cfg.wire(size), timeout)
    master = frames[0]
    return FrameResult(master.image, master.ldr, master.stats, frames)
