"""Single-node oracle renderer and brute-force oracles for tests.

The renderer shares the camera, tracing and shading kernels with the
distributed engine; only the routing and the transport are absent. The
forwarding and intersection oracles are plain-Python scans that do not
touch any acceleration structure.
"""

from __future__ import annotations

import numpy as np

from .accel.geometry import LocalGeometry, SceneGeometry
from .engine import kernels as EK
from .engine.render import RenderConfig, Shader, make_primaries
from .rng import sample_seed
from .transport.wire import RayBatch


def render_reference(scene, camera=None, seed: int = 0, spp: int = 1, max_bounce: int = 4, width: int = 128,
                     height: int = 128, cfg: RenderConfig | None = None, geo=None) -> np.ndarray:
    """Ground-truth H x W x 3 float32 accumulation (sum over samples)."""
    cfg = cfg or RenderConfig(width=width, height=height, spp=spp, max_bounce=max_bounce, seed=seed)
    camera = camera or scene.camera
    geo = geo or SceneGeometry(scene)
    local = LocalGeometry(geo, [(i, None, 1) for i in range(len(scene.instances))])
    npix = cfg.width * cfg.height
    shader = Shader(scene, geo, local, cfg, npix)
    for s in range(cfg.spp):
        sseed = sample_seed(cfg.seed, s)
        org, dirs = make_primaries(camera, cfg, sseed)
        queue = RayBatch(org, dirs, np.ones((npix, 3)), np.full(npix, np.inf), np.arange(npix, dtype=np.int64),
                         np.ones(npix, np.int64), np.zeros(npix, np.int64), np.zeros(npix, np.int64))
        for bounce in range(cfg.max_bounce + 1):
            EK.trace(local.G, local.ent_owners, queue.org, queue.dir, queue.tmax, queue.flags, queue.hit)
            queue = shader.shade(queue, sseed, bounce, 0)
    return shader.fb.astype(np.float32).reshape(cfg.height, cfg.width, 3)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Per-pixel relative difference: max over channels of |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    err = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return err.max(axis=-1) if err.ndim == 3 else err


# ---------------------------------------------------------------- forwarding

def slab_interval(lo, hi, o, d):
    """Exact ray/box parameter interval, same arithmetic as the jitted test."""
    t0, t1 = -np.inf, np.inf
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                return np.inf, -np.inf
            continue
        ta = (lo[a] - o[a]) / d[a]
        tb = (hi[a] - o[a]) / d[a]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    return t0, t1


def forward_oracle(origin, direction, visited: int, proxies, tmax_culling: bool, pick: int, tmin: float = 0.0,
                   tmax: float = np.inf) -> int | None:
    """Linear scan implementing the next-rank rule; ``proxies`` is [(lo, hi, owners)]."""
    o = [float(x) for x in origin]
    d = [float(x) for x in direction]
    tend = tmax if tmax_culling else np.inf
    best, best_i = np.inf, None
    for i, (lo, hi, owners) in enumerate(proxies):
        if owners & visited:
            continue
        t0, t1 = slab_interval([float(x) for x in lo], [float(x) for x in hi], o, d)
        if t0 > t1 or t1 <= tmin or t0 > tend:
            continue
        entry = max(t0, tmin)
        if entry < best:
            best, best_i = entry, i
    if best_i is None:
        return None
    owners = proxies[best_i][2]
    ranks = [r for r in range(64) if owners >> r & 1]
    return ranks[(pick & 0xFFFFFFFF) % len(ranks)]


# -------------------------------------------------------------- intersection

def brute_force_hit(v0, e1, e2, origin, direction, tmin: float = 0.0, tmax: float = np.inf):
    """Closest triangle by scanning all of them: (t, index) or None.

    Vectorized Moller-Trumbore with the same epsilon and float32 distance
    rounding as the kernels; ties go to the lower index.
    """
    o = np.asarray(origin, float)
    d = np.asarray(direction, float)
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) >= 1e-7
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - v0
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = (q @ d) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    t = t.astype(np.float32).astype(np.float64)
    ok &= (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > tmin) & (t <= tmax)
    if not ok.any():
        return None
    idx = np.flatnonzero(ok)
    k = idx[np.argmin(t[idx])]
    return float(t[k]), int(k)
