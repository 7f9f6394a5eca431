"""Jitted per-ray stages of the wavefront loop: camera, trace, route, shade."""

import math

import numpy as np
from numba import njit

from ..accel import kernels as K
from ..proxy import next_rank, pick_owner, popcount, replay_mask, select_proxy
from ..rng import (STREAM_BSDF_U, STREAM_BSDF_V, STREAM_JITTER_X, STREAM_JITTER_Y, STREAM_LIGHT_U, STREAM_LIGHT_V,
                   STREAM_RESERVOIR, STREAM_ROULETTE, pick_seed, uniform)

PIXEL_MASK = (1 << 28) - 1
FLAG_SHADOW = 1 << 28
FLAG_COMPLETE = 1 << 30
INV_PI = 1.0 / math.pi


@njit(cache=True, nogil=True)
def camera_rays(width, height, seed, pos, right, up, fwd, tan_half):
    """One jittered pinhole ray per pixel, pixel id = y * width + x (row 0 on top)."""
    n = width * height
    dirs = np.empty((n, 3))
    aspect = width / height
    for p in range(n):
        x = p % width
        y = p // width
        sx = (2.0 * (x + uniform(seed, p, 0, STREAM_JITTER_X)) / width - 1.0) * tan_half * aspect
        sy = (1.0 - 2.0 * (y + uniform(seed, p, 0, STREAM_JITTER_Y)) / height) * tan_half
        d0 = fwd[0] + sx * right[0] + sy * up[0]
        d1 = fwd[1] + sx * right[1] + sy * up[1]
        d2 = fwd[2] + sx * right[2] + sy * up[2]
        inv = 1.0 / math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        dirs[p, 0] = d0 * inv
        dirs[p, 1] = d1 * inv
        dirs[p, 2] = d2 * inv
    return dirs


@njit(cache=True, nogil=True)
def primary_owner(PB, plo, phi, powners, org, dirs, rank_count):
    """Rank that keeps each primary ray: an owner of its closest proxy, picked by pixel id."""
    n = org.shape[0]
    out = np.empty(n, np.int64)
    stack = np.empty(K.STACK_SIZE, np.int64)
    for i in range(n):
        p = select_proxy(PB, plo, phi, powners, org[i, 0], org[i, 1], org[i, 2], dirs[i, 0], dirs[i, 1],
                         dirs[i, 2], 0.0, np.inf, True, np.int64(0), stack)
        if p < 0:
            out[i] = i % rank_count
        else:
            out[i] = pick_owner(powners[p], i)
    return out


@njit(cache=True, nogil=True)
def trace(G, ent_owners, org, dirs, tmax, flags, hit):
    """Local intersection, in place: closest hit for paths, any hit for shadow rays.

    A path that already carries a hit keeps it on an exactly equal distance, so
    the first-found surface wins ties deterministically.
    """
    st_tl = np.empty(K.STACK_SIZE, np.int64)
    st_bl = np.empty(K.STACK_SIZE, np.int64)
    for i in range(org.shape[0]):
        f = flags[i]
        if f & FLAG_COMPLETE:
            continue
        if f & FLAG_SHADOW:
            if tmax[i] < 0.0:
                continue
            if K.any_hit(G, org[i, 0], org[i, 1], org[i, 2], dirs[i, 0], dirs[i, 1], dirs[i, 2], 0.0, tmax[i],
                         st_tl, st_bl):
                tmax[i] = -1.0
            continue
        found, t, e, p, u, v = K.closest_hit(G, org[i, 0], org[i, 1], org[i, 2], dirs[i, 0], dirs[i, 1],
                                             dirs[i, 2], 0.0, tmax[i], hit[i] == 0, st_tl, st_bl)
        if found:
            tmax[i] = t
            hit[i] = ent_owners[e]


@njit(cache=True, nogil=True)
def route(PB, plo, phi, powners, org, dirs, tmax, flags, visited, hit, self_rank, culling, bounce):
    """Forwarding decision per ray; returns the destination (-1: shade here).

    Updates ``visited`` to include this rank (and the destination, for
    traversal forwards) and sets the complete flag on rays sent away only to
    be shaded.
    """
    n = org.shape[0]
    dest = np.full(n, -1, np.int64)
    stack = np.empty(K.STACK_SIZE, np.int64)
    me = np.int64(1) << self_rank
    for i in range(n):
        f = flags[i]
        if f & FLAG_COMPLETE:
            flags[i] = f & ~FLAG_COMPLETE
            continue
        v = visited[i] | me
        visited[i] = v
        shadow = (f & FLAG_SHADOW) != 0
        if shadow and tmax[i] < 0.0:
            continue
        pixel = f & PIXEL_MASK
        r = next_rank(PB, plo, phi, powners, org[i, 0], org[i, 1], org[i, 2], dirs[i, 0], dirs[i, 1], dirs[i, 2],
                      0.0, tmax[i], culling, v, pixel, bounce, stack)
        if r >= 0:
            dest[i] = r
            visited[i] = v | (np.int64(1) << r)
        elif not shadow and hit[i] != 0 and (hit[i] & me) == 0:
            dest[i] = pick_owner(hit[i], pick_seed(pixel, bounce, popcount(v)))
            flags[i] = f | FLAG_COMPLETE
    return dest


@njit(cache=True, nogil=True)
def replay(PB, plo, phi, powners, org, dirs, flags, origin_rank, self_rank, rank_count, bounce):
    """Recompute visited masks of arriving rays; ok[i] False signals a protocol violation."""
    n = org.shape[0]
    out = np.zeros(n, np.int64)
    ok = np.ones(n, np.bool_)
    stack = np.empty(K.STACK_SIZE, np.int64)
    for i in range(n):
        if flags[i] & FLAG_COMPLETE:
            continue
        m, good = replay_mask(PB, plo, phi, powners, org[i, 0], org[i, 1], org[i, 2], dirs[i, 0], dirs[i, 1],
                              dirs[i, 2], 0.0, origin_rank[i], self_rank, rank_count, flags[i] & PIXEL_MASK,
                              bounce, stack)
        out[i] = m
        ok[i] = good
    return out, ok


# ------------------------------------------------------------------- shading

@njit(cache=True, nogil=True)
def _onb(n0, n1, n2):
    if n2 < -0.9999999:
        return 0.0, -1.0, 0.0, -1.0, 0.0, 0.0
    a = 1.0 / (1.0 + n2)
    b = -n0 * n1 * a
    return 1.0 - n0 * n0 * a, b, -n0, b, 1.0 - n1 * n1 * a, -n1


@njit(cache=True, nogil=True)
def _norm(x, y, z):
    inv = 1.0 / math.sqrt(x * x + y * y + z * z)
    return x * inv, y * inv, z * inv


@njit(cache=True, nogil=True)
def select_light(light_power, light_centroid, px, py, pz, seed, pixel, bounce):
    """Weighted reservoir over all lights, weight = power / squared distance.

    One pass, one uniform per light; returns (index, probability) or (-1, 0).
    """
    wsum = 0.0
    chosen = -1
    wc = 0.0
    for i in range(light_power.shape[0]):
        dx = light_centroid[i, 0] - px
        dy = light_centroid[i, 1] - py
        dz = light_centroid[i, 2] - pz
        d2 = dx * dx + dy * dy + dz * dz
        if d2 < 1e-12:
            d2 = 1e-12
        w = light_power[i] / d2
        if not w > 0.0:
            continue
        wsum += w
        if uniform(seed, pixel, bounce, STREAM_RESERVOIR + i) * wsum < w:
            chosen = i
            wc = w
    if chosen < 0:
        return -1, 0.0
    return chosen, wc / wsum


@njit(cache=True, nogil=True)
def shade(G, geo, lights, env, org, dirs, thr, tmax, flags, hit, fb, seed, bounce, max_bounce, eps, q,
          retrace_tol):
    """Shade one wavefront's locally shadeable rays.

    Contributions go to ``fb`` in queue order. Returns the spawned
    continuation and shadow rays (unquantized) plus counters.
    """
    (tri_material, tri_normals, tri_has_normals, obj_tri_offset, inst_object, inst_xf, inst_normal,
     mat_albedo, mat_emission, mat_emissive) = geo
    light_v0, light_e1, light_e2, light_emission, light_area, light_normal, light_centroid, light_power = lights
    tri_v0, tri_e1, tri_e2 = G[17], G[18], G[19]
    ent_inst = G[9]
    n = org.shape[0]
    p_org = np.zeros((n, 3))
    p_dir = np.zeros((n, 3))
    p_thr = np.zeros((n, 3))
    p_ok = np.zeros(n, np.bool_)
    s_org = np.zeros((n, 3))
    s_dir = np.zeros((n, 3))
    s_thr = np.zeros((n, 3))
    s_end = np.zeros((n, 3))
    s_ok = np.zeros(n, np.bool_)
    misses = 0
    st_tl = np.empty(K.STACK_SIZE, np.int64)
    st_bl = np.empty(K.STACK_SIZE, np.int64)
    for i in range(n):
        f = flags[i]
        pixel = f & PIXEL_MASK
        t0, t1, t2 = thr[i, 0], thr[i, 1], thr[i, 2]
        if f & FLAG_SHADOW:
            if tmax[i] >= 0.0:
                fb[pixel, 0] += t0
                fb[pixel, 1] += t1
                fb[pixel, 2] += t2
            continue
        o0, o1, o2 = org[i, 0], org[i, 1], org[i, 2]
        d0, d1, d2 = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        escaped = hit[i] == 0
        if not escaped:
            found, t, e, prim, u, v = K.closest_hit(G, o0, o1, o2, d0, d1, d2, 0.0,
                                                    tmax[i] * (1.0 + retrace_tol), True, st_tl, st_bl)
            if not found or abs(t - tmax[i]) > retrace_tol * tmax[i]:
                misses += 1
                escaped = True
        if escaped:
            fb[pixel, 0] += t0 * env[0]
            fb[pixel, 1] += t1 * env[1]
            fb[pixel, 2] += t2 * env[2]
            continue
        inst = ent_inst[e]
        gtri = obj_tri_offset[inst_object[inst]] + prim
        mat = tri_material[gtri]
        if mat_emissive[mat]:
            if bounce == 0:
                fb[pixel, 0] += t0 * mat_emission[mat, 0]
                fb[pixel, 1] += t1 * mat_emission[mat, 1]
                fb[pixel, 2] += t2 * mat_emission[mat, 2]
            continue
        if bounce >= max_bounce:
            continue
        # geometry at the hit, world space, facing the incoming ray
        a = tri_e1[gtri]
        b = tri_e2[gtri]
        nm0 = a[1] * b[2] - a[2] * b[1]
        nm1 = a[2] * b[0] - a[0] * b[2]
        nm2 = a[0] * b[1] - a[1] * b[0]
        N = inst_normal[inst]
        g0, g1, g2 = _norm(N[0, 0] * nm0 + N[0, 1] * nm1 + N[0, 2] * nm2,
                           N[1, 0] * nm0 + N[1, 1] * nm1 + N[1, 2] * nm2,
                           N[2, 0] * nm0 + N[2, 1] * nm1 + N[2, 2] * nm2)
        if g0 * d0 + g1 * d1 + g2 * d2 > 0.0:
            g0, g1, g2 = -g0, -g1, -g2
        s0, s1, s2 = g0, g1, g2
        if tri_has_normals[gtri]:
            w = 1.0 - u - v
            tn = tri_normals[gtri]
            m0 = w * tn[0, 0] + u * tn[1, 0] + v * tn[2, 0]
            m1 = w * tn[0, 1] + u * tn[1, 1] + v * tn[2, 1]
            m2 = w * tn[0, 2] + u * tn[1, 2] + v * tn[2, 2]
            x0 = N[0, 0] * m0 + N[0, 1] * m1 + N[0, 2] * m2
            x1 = N[1, 0] * m0 + N[1, 1] * m1 + N[1, 2] * m2
            x2 = N[2, 0] * m0 + N[2, 1] * m1 + N[2, 2] * m2
            if x0 * x0 + x1 * x1 + x2 * x2 > 0.0:
                s0, s1, s2 = _norm(x0, x1, x2)
                if s0 * g0 + s1 * g1 + s2 * g2 < 0.0:
                    s0, s1, s2 = -s0, -s1, -s2
        px = o0 + t * d0 + eps * g0
        py = o1 + t * d1 + eps * g1
        pz = o2 + t * d2 + eps * g2
        al0, al1, al2 = mat_albedo[mat, 0], mat_albedo[mat, 1], mat_albedo[mat, 2]

        # next-event estimation towards one reservoir-selected light
        li, pl = select_light(light_power, light_centroid, px, py, pz, seed, pixel, bounce)
        if li >= 0:
            su = math.sqrt(uniform(seed, pixel, bounce, STREAM_LIGHT_U))
            uv = uniform(seed, pixel, bounce, STREAM_LIGHT_V)
            bu = su * (1.0 - uv)
            bv = su * uv
            lx = light_v0[li, 0] + bu * light_e1[li, 0] + bv * light_e2[li, 0]
            ly = light_v0[li, 1] + bu * light_e1[li, 1] + bv * light_e2[li, 1]
            lz = light_v0[li, 2] + bu * light_e1[li, 2] + bv * light_e2[li, 2]
            vx, vy, vz = lx - px, ly - py, lz - pz
            d2l = vx * vx + vy * vy + vz * vz
            if d2l > 0.0:
                dist = math.sqrt(d2l)
                lx0, lx1, lx2 = vx / dist, vy / dist, vz / dist
                cos_s = s0 * lx0 + s1 * lx1 + s2 * lx2
                cos_g = g0 * lx0 + g1 * lx1 + g2 * lx2
                cos_l = abs(light_normal[li, 0] * lx0 + light_normal[li, 1] * lx1 + light_normal[li, 2] * lx2)
                if cos_s > 0.0 and cos_g > 0.0 and cos_l > 0.0:
                    k = INV_PI * cos_s * cos_l * light_area[li] / (d2l * pl)
                    s_thr[i, 0] = t0 * al0 * light_emission[li, 0] * k
                    s_thr[i, 1] = t1 * al1 * light_emission[li, 1] * k
                    s_thr[i, 2] = t2 * al2 * light_emission[li, 2] * k
                    s_org[i, 0], s_org[i, 1], s_org[i, 2] = px, py, pz
                    s_dir[i, 0], s_dir[i, 1], s_dir[i, 2] = lx0, lx1, lx2
                    s_end[i, 0], s_end[i, 1], s_end[i, 2] = lx, ly, lz
                    s_ok[i] = True

        # cosine-weighted continuation with throughput-based rejection
        n0 = t0 * al0
        n1 = t1 * al1
        n2 = t2 * al2
        mx = max(n0, max(n1, n2))
        pr = mx / q
        if pr > 1.0:
            pr = 1.0
        if not pr > 0.0 or uniform(seed, pixel, bounce, STREAM_ROULETTE) >= pr:
            continue
        r1 = uniform(seed, pixel, bounce, STREAM_BSDF_U)
        r2 = uniform(seed, pixel, bounce, STREAM_BSDF_V)
        rr = math.sqrt(r1)
        phi = 2.0 * math.pi * r2
        lxl = rr * math.cos(phi)
        lyl = rr * math.sin(phi)
        lzl = math.sqrt(max(0.0, 1.0 - r1))
        b00, b01, b02, b10, b11, b12 = _onb(s0, s1, s2)
        w0 = lxl * b00 + lyl * b10 + lzl * s0
        w1 = lxl * b01 + lyl * b11 + lzl * s1
        w2 = lxl * b02 + lyl * b12 + lzl * s2
        if w0 * g0 + w1 * g1 + w2 * g2 <= 0.0:
            continue
        p_org[i, 0], p_org[i, 1], p_org[i, 2] = px, py, pz
        p_dir[i, 0], p_dir[i, 1], p_dir[i, 2] = _norm(w0, w1, w2)
        p_thr[i, 0], p_thr[i, 1], p_thr[i, 2] = n0 / pr, n1 / pr, n2 / pr
        p_ok[i] = True
    return p_org, p_dir, p_thr, p_ok, s_org, s_dir, s_thr, s_end, s_ok, misses
