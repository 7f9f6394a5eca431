"""Jitted BVH construction and traversal kernels.

Boxes and triangles travel as plain arrays. A BVH is the tuple
``(lo, hi, left, right, start, count, prim)``: ``left < 0`` marks a leaf whose
primitives are ``prim[start:start + count]``.

Box-versus-ray tests come in two flavours. ``box_interval`` is exact and is the
one the forwarding rule is defined with; ``_box_hit_conservative`` widens the
interval slightly and is only used to prune BVH nodes, where a false positive
costs time but a false negative would lose a hit.
"""

import numpy as np
from numba import njit

NUM_BINS = 16
DET_EPS = 1e-7
_WIDEN_REL = 1e-9
_WIDEN_ABS = 1e-12
STACK_SIZE = 128


# ---------------------------------------------------------------- construction

@njit(cache=True, nogil=True)
def _bin_of(c, cmin, ext):
    b = int(NUM_BINS * ((c - cmin) / ext))
    if b >= NUM_BINS:
        b = NUM_BINS - 1
    if b < 0:
        b = 0
    return b


@njit(cache=True, nogil=True)
def _area(lo0, lo1, lo2, hi0, hi1, hi2):
    if lo0 > hi0:
        return 0.0
    e0 = hi0 - lo0
    e1 = hi1 - lo1
    e2 = hi2 - lo2
    return 2.0 * (e0 * e1 + e1 * e2 + e2 * e0)


@njit(cache=True, nogil=True)
def split_range(prim_lo, prim_hi, order, start, end):
    """Partition ``order[start:end]`` in place; return the split index.

    Binned SAH over centroids; falls back to an index median when every axis
    has a zero centroid spread.
    """
    cmin = np.full(3, np.inf)
    cmax = np.full(3, -np.inf)
    for k in range(start, end):
        p = order[k]
        for a in range(3):
            c = 0.5 * (prim_lo[p, a] + prim_hi[p, a])
            if c < cmin[a]:
                cmin[a] = c
            if c > cmax[a]:
                cmax[a] = c

    best_cost = np.inf
    best_axis = -1
    best_bin = -1
    cnt = np.zeros(NUM_BINS, np.int64)
    blo = np.empty((NUM_BINS, 3))
    bhi = np.empty((NUM_BINS, 3))
    right_area = np.zeros(NUM_BINS)
    right_cnt = np.zeros(NUM_BINS, np.int64)
    for a in range(3):
        ext = cmax[a] - cmin[a]
        if not ext > 0.0:
            continue
        cnt[:] = 0
        blo[:] = np.inf
        bhi[:] = -np.inf
        for k in range(start, end):
            p = order[k]
            b = _bin_of(0.5 * (prim_lo[p, a] + prim_hi[p, a]), cmin[a], ext)
            cnt[b] += 1
            for q in range(3):
                if prim_lo[p, q] < blo[b, q]:
                    blo[b, q] = prim_lo[p, q]
                if prim_hi[p, q] > bhi[b, q]:
                    bhi[b, q] = prim_hi[p, q]
        # sweep from the right: right_*[i] describes bins i..NUM_BINS-1
        r0 = np.inf
        r1 = np.inf
        r2 = np.inf
        s0 = -np.inf
        s1 = -np.inf
        s2 = -np.inf
        n = 0
        for i in range(NUM_BINS - 1, 0, -1):
            n += cnt[i]
            r0 = min(r0, blo[i, 0])
            r1 = min(r1, blo[i, 1])
            r2 = min(r2, blo[i, 2])
            s0 = max(s0, bhi[i, 0])
            s1 = max(s1, bhi[i, 1])
            s2 = max(s2, bhi[i, 2])
            right_cnt[i] = n
            right_area[i] = _area(r0, r1, r2, s0, s1, s2)
        l0 = np.inf
        l1 = np.inf
        l2 = np.inf
        m0 = -np.inf
        m1 = -np.inf
        m2 = -np.inf
        n = 0
        for i in range(1, NUM_BINS):
            n += cnt[i - 1]
            l0 = min(l0, blo[i - 1, 0])
            l1 = min(l1, blo[i - 1, 1])
            l2 = min(l2, blo[i - 1, 2])
            m0 = max(m0, bhi[i - 1, 0])
            m1 = max(m1, bhi[i - 1, 1])
            m2 = max(m2, bhi[i - 1, 2])
            if n == 0 or right_cnt[i] == 0:
                continue
            cost = _area(l0, l1, l2, m0, m1, m2) * n + right_area[i] * right_cnt[i]
            if cost < best_cost:
                best_cost = cost
                best_axis = a
                best_bin = i

    if best_axis < 0:
        return (start + end) // 2

    a = best_axis
    ext = cmax[a] - cmin[a]
    i = start
    j = end - 1
    while i <= j:
        p = order[i]
        if _bin_of(0.5 * (prim_lo[p, a] + prim_hi[p, a]), cmin[a], ext) < best_bin:
            i += 1
        else:
            order[i] = order[j]
            order[j] = p
            j -= 1
    return i


@njit(cache=True, nogil=True)
def build_bvh(prim_lo, prim_hi, leaf_size):
    n = prim_lo.shape[0]
    cap = max(1, 2 * n - 1)
    lo = np.empty((cap, 3))
    hi = np.empty((cap, 3))
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    start = np.zeros(cap, np.int64)
    count = np.zeros(cap, np.int64)
    order = np.arange(n)
    if n == 0:
        lo[0, :] = np.inf
        hi[0, :] = -np.inf
        return lo, hi, left, right, start, count, order

    stack = np.empty(cap, np.int64)
    nodes = 1
    start[0] = 0
    count[0] = n
    sp = 1
    stack[0] = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        e = s + count[node]
        for a in range(3):
            lo[node, a] = np.inf
            hi[node, a] = -np.inf
        for k in range(s, e):
            p = order[k]
            for a in range(3):
                if prim_lo[p, a] < lo[node, a]:
                    lo[node, a] = prim_lo[p, a]
                if prim_hi[p, a] > hi[node, a]:
                    hi[node, a] = prim_hi[p, a]
        if e - s <= leaf_size:
            continue
        mid = split_range(prim_lo, prim_hi, order, s, e)
        l = nodes
        r = nodes + 1
        nodes += 2
        left[node] = l
        right[node] = r
        start[l] = s
        count[l] = mid - s
        start[r] = mid
        count[r] = e - mid
        stack[sp] = r
        stack[sp + 1] = l
        sp += 2
    return lo[:nodes].copy(), hi[:nodes].copy(), left[:nodes].copy(), right[:nodes].copy(), \
        start[:nodes].copy(), count[:nodes].copy(), order


# ------------------------------------------------------------------ ray / box

@njit(cache=True, nogil=True)
def box_interval(lo, hi, i, o0, o1, o2, d0, d1, d2):
    """Exact slab test of box ``i``; returns ``(t0, t1)``, empty when t0 > t1."""
    t0 = -np.inf
    t1 = np.inf
    if d0 == 0.0:
        if o0 < lo[i, 0] or o0 > hi[i, 0]:
            return np.inf, -np.inf
    else:
        ta = (lo[i, 0] - o0) / d0
        tb = (hi[i, 0] - o0) / d0
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    if d1 == 0.0:
        if o1 < lo[i, 1] or o1 > hi[i, 1]:
            return np.inf, -np.inf
    else:
        ta = (lo[i, 1] - o1) / d1
        tb = (hi[i, 1] - o1) / d1
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    if d2 == 0.0:
        if o2 < lo[i, 2] or o2 > hi[i, 2]:
            return np.inf, -np.inf
    else:
        ta = (lo[i, 2] - o2) / d2
        tb = (hi[i, 2] - o2) / d2
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    return t0, t1


@njit(cache=True, nogil=True)
def _box_hit_conservative(lo, hi, i, o0, o1, o2, d0, d1, d2, tmin, tmax):
    t0, t1 = box_interval(lo, hi, i, o0, o1, o2, d0, d1, d2)
    if t0 > t1:
        return False, 0.0
    t0 = t0 - _WIDEN_REL * abs(t0) - _WIDEN_ABS
    t1 = t1 + _WIDEN_REL * abs(t1) + _WIDEN_ABS
    if t1 <= tmin or t0 > tmax:
        return False, 0.0
    return True, t0


# ------------------------------------------------------------------- triangles

@njit(cache=True, nogil=True)
def tri_hit(v0, e1, e2, k, o0, o1, o2, d0, d1, d2):
    """Moller-Trumbore; returns (hit, t rounded to float32, u, v)."""
    p0 = d1 * e2[k, 2] - d2 * e2[k, 1]
    p1 = d2 * e2[k, 0] - d0 * e2[k, 2]
    p2 = d0 * e2[k, 1] - d1 * e2[k, 0]
    det = e1[k, 0] * p0 + e1[k, 1] * p1 + e1[k, 2] * p2
    if abs(det) < DET_EPS:
        return False, 0.0, 0.0, 0.0
    inv = 1.0 / det
    s0 = o0 - v0[k, 0]
    s1 = o1 - v0[k, 1]
    s2 = o2 - v0[k, 2]
    u = (s0 * p0 + s1 * p1 + s2 * p2) * inv
    if u < 0.0 or u > 1.0:
        return False, 0.0, 0.0, 0.0
    q0 = s1 * e1[k, 2] - s2 * e1[k, 1]
    q1 = s2 * e1[k, 0] - s0 * e1[k, 2]
    q2 = s0 * e1[k, 1] - s1 * e1[k, 0]
    v = (d0 * q0 + d1 * q1 + d2 * q2) * inv
    if v < 0.0 or u + v > 1.0:
        return False, 0.0, 0.0, 0.0
    t = (e2[k, 0] * q0 + e2[k, 1] * q1 + e2[k, 2] * q2) * inv
    return True, float(np.float32(t)), u, v


# ------------------------------------------------------------ two-level trace
#
# G = (tl_lo, tl_hi, tl_left, tl_right, tl_start, tl_count, tl_prim,
#      ent_root, ent_inv, ent_inst,
#      bl_lo, bl_hi, bl_left, bl_right, bl_start, bl_count, bl_prim,
#      tri_v0, tri_e1, tri_e2, tri_local)

@njit(cache=True, nogil=True)
def _better(t, inst, prim, best_t, have, best_inst, best_prim, inclusive):
    if t < best_t:
        return True
    if t == best_t:
        if have:
            return inst < best_inst or (inst == best_inst and prim < best_prim)
        return inclusive
    return False


@njit(cache=True, nogil=True)
def closest_hit(G, o0, o1, o2, d0, d1, d2, tmin, tmax, inclusive, st_tl, st_bl):
    """Closest hit in (tmin, tmax]; ties resolved by lower (instance, primitive).

    With ``inclusive`` false a hit exactly at ``tmax`` does not count; that is
    what lets a carried hit from another rank keep priority on equal distance.
    Returns (found, t, entry, local primitive id, u, v).
    """
    (tl_lo, tl_hi, tl_left, tl_right, tl_start, tl_count, tl_prim,
     ent_root, ent_inv, ent_inst,
     bl_lo, bl_hi, bl_left, bl_right, bl_start, bl_count, bl_prim,
     tri_v0, tri_e1, tri_e2, tri_local) = G
    best_t = tmax
    have = False
    best_e = -1
    best_inst = -1
    best_prim = -1
    best_u = 0.0
    best_v = 0.0
    if tl_prim.shape[0] == 0:
        return False, best_t, -1, -1, 0.0, 0.0
    sp = 1
    st_tl[0] = 0
    while sp > 0:
        sp -= 1
        n = st_tl[sp]
        ok, _ = _box_hit_conservative(tl_lo, tl_hi, n, o0, o1, o2, d0, d1, d2, tmin, best_t)
        if not ok:
            continue
        if tl_left[n] >= 0:
            st_tl[sp] = tl_right[n]
            st_tl[sp + 1] = tl_left[n]
            sp += 2
            continue
        for kk in range(tl_start[n], tl_start[n] + tl_count[n]):
            e = tl_prim[kk]
            m = ent_inv[e]
            mo0 = m[0, 0] * o0 + m[0, 1] * o1 + m[0, 2] * o2 + m[0, 3]
            mo1 = m[1, 0] * o0 + m[1, 1] * o1 + m[1, 2] * o2 + m[1, 3]
            mo2 = m[2, 0] * o0 + m[2, 1] * o1 + m[2, 2] * o2 + m[2, 3]
            md0 = m[0, 0] * d0 + m[0, 1] * d1 + m[0, 2] * d2
            md1 = m[1, 0] * d0 + m[1, 1] * d1 + m[1, 2] * d2
            md2 = m[2, 0] * d0 + m[2, 1] * d1 + m[2, 2] * d2
            inst = ent_inst[e]
            bsp = 1
            st_bl[0] = ent_root[e]
            while bsp > 0:
                bsp -= 1
                b = st_bl[bsp]
                ok, _ = _box_hit_conservative(bl_lo, bl_hi, b, mo0, mo1, mo2, md0, md1, md2, tmin, best_t)
                if not ok:
                    continue
                if bl_left[b] >= 0:
                    st_bl[bsp] = bl_right[b]
                    st_bl[bsp + 1] = bl_left[b]
                    bsp += 2
                    continue
                for q in range(bl_start[b], bl_start[b] + bl_count[b]):
                    tri = bl_prim[q]
                    hit, t, u, v = tri_hit(tri_v0, tri_e1, tri_e2, tri, mo0, mo1, mo2, md0, md1, md2)
                    if not hit or not t > tmin:
                        continue
                    prim = tri_local[tri]
                    if _better(t, inst, prim, best_t, have, best_inst, best_prim, inclusive):
                        have = True
                        best_t = t
                        best_e = e
                        best_inst = inst
                        best_prim = prim
                        best_u = u
                        best_v = v
    return have, best_t, best_e, best_prim, best_u, best_v


@njit(cache=True, nogil=True)
def any_hit(G, o0, o1, o2, d0, d1, d2, tmin, tmax, st_tl, st_bl):
    (tl_lo, tl_hi, tl_left, tl_right, tl_start, tl_count, tl_prim,
     ent_root, ent_inv, ent_inst,
     bl_lo, bl_hi, bl_left, bl_right, bl_start, bl_count, bl_prim,
     tri_v0, tri_e1, tri_e2, tri_local) = G
    if tl_prim.shape[0] == 0:
        return False
    sp = 1
    st_tl[0] = 0
    while sp > 0:
        sp -= 1
        n = st_tl[sp]
        ok, _ = _box_hit_conservative(tl_lo, tl_hi, n, o0, o1, o2, d0, d1, d2, tmin, tmax)
        if not ok:
            continue
        if tl_left[n] >= 0:
            st_tl[sp] = tl_right[n]
            st_tl[sp + 1] = tl_left[n]
            sp += 2
            continue
        for kk in range(tl_start[n], tl_start[n] + tl_count[n]):
            e = tl_prim[kk]
            m = ent_inv[e]
            mo0 = m[0, 0] * o0 + m[0, 1] * o1 + m[0, 2] * o2 + m[0, 3]
            mo1 = m[1, 0] * o0 + m[1, 1] * o1 + m[1, 2] * o2 + m[1, 3]
            mo2 = m[2, 0] * o0 + m[2, 1] * o1 + m[2, 2] * o2 + m[2, 3]
            md0 = m[0, 0] * d0 + m[0, 1] * d1 + m[0, 2] * d2
            md1 = m[1, 0] * d0 + m[1, 1] * d1 + m[1, 2] * d2
            md2 = m[2, 0] * d0 + m[2, 1] * d1 + m[2, 2] * d2
            bsp = 1
            st_bl[0] = ent_root[e]
            while bsp > 0:
                bsp -= 1
                b = st_bl[bsp]
                ok, _ = _box_hit_conservative(bl_lo, bl_hi, b, mo0, mo1, mo2, md0, md1, md2, tmin, tmax)
                if not ok:
                    continue
                if bl_left[b] >= 0:
                    st_bl[bsp] = bl_right[b]
                    st_bl[bsp + 1] = bl_left[b]
                    bsp += 2
                    continue
                for q in range(bl_start[b], bl_start[b] + bl_count[b]):
                    hit, t, u, v = tri_hit(tri_v0, tri_e1, tri_e2, bl_prim[q], mo0, mo1, mo2, md0, md1, md2)
                    if hit and t > tmin and t <= tmax:
                        return True
    return False


@njit(cache=True, nogil=True)
def closest_hit_batch(G, org, dirs, tmin, tmax, inclusive):
    n = org.shape[0]
    out_t = np.empty(n)
    out_e = np.full(n, -1, np.int64)
    out_p = np.full(n, -1, np.int64)
    out_u = np.zeros(n)
    out_v = np.zeros(n)
    st_tl = np.empty(STACK_SIZE, np.int64)
    st_bl = np.empty(STACK_SIZE, np.int64)
    for i in range(n):
        found, t, e, p, u, v = closest_hit(G, org[i, 0], org[i, 1], org[i, 2], dirs[i, 0], dirs[i, 1], dirs[i, 2],
                                           tmin[i], tmax[i], inclusive[i], st_tl, st_bl)
        out_t[i] = t
        if found:
            out_e[i] = e
            out_p[i] = p
            out_u[i] = u
            out_v[i] = v
    return out_t, out_e, out_p, out_u, out_v


@njit(cache=True, nogil=True)
def any_hit_batch(G, org, dirs, tmin, tmax):
    n = org.shape[0]
    out = np.zeros(n, np.bool_)
    st_tl = np.empty(STACK_SIZE, np.int64)
    st_bl = np.empty(STACK_SIZE, np.int64)
    for i in range(n):
        out[i] = any_hit(G, org[i, 0], org[i, 1], org[i, 2], dirs[i, 0], dirs[i, 1], dirs[i, 2],
                         tmin[i], tmax[i], st_tl, st_bl)
    return out
