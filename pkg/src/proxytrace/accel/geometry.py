"""Flattened scene arrays and the per-rank two-level acceleration structure."""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .aabb import Aabb
from .bvh import LEAF_SIZE, BvhNodes, triangle_arrays, triangle_boxes


class SceneGeometry:
    """Scene-wide triangle, material, instance and light arrays.

    Triangles are stored once per object in model space; a rank references the
    subset it owns through its BLASes, so two ranks holding the same triangle
    intersect exactly the same numbers.
    """

    def __init__(self, scene):
        self.scene = scene
        v0s, e1s, e2s, los, his, local, mats, tri_n, has_n = [], [], [], [], [], [], [], [], []
        self.materials = []
        mat_index = {}
        offsets = [0]
        for obj in scene.objects:
            for m in obj.meshes:
                v0, e1, e2 = triangle_arrays(m.vertices, m.triangles)
                lo, hi = triangle_boxes(m.vertices, m.triangles)
                v0s.append(v0)
                e1s.append(e1)
                e2s.append(e2)
                los.append(lo)
                his.append(hi)
                if m.material not in mat_index:
                    mat_index[m.material] = len(self.materials)
                    self.materials.append(m.material)
                mats.append(np.full(m.tri_count, mat_index[m.material], np.int64))
                if m.normals is not None:
                    tri_n.append(m.normals[m.triangles])
                    has_n.append(np.ones(m.tri_count, np.bool_))
                else:
                    tri_n.append(np.zeros((m.tri_count, 3, 3)))
                    has_n.append(np.zeros(m.tri_count, np.bool_))
            local.append(np.arange(obj.tri_count, dtype=np.int64))
            offsets.append(offsets[-1] + obj.tri_count)
        self.obj_tri_offset = np.array(offsets, np.int64)

        def cat(parts, shape, dtype=np.float64):
            return np.ascontiguousarray(np.concatenate(parts) if parts else np.zeros(shape, dtype))

        self.tri_v0 = cat(v0s, (0, 3))
        self.tri_e1 = cat(e1s, (0, 3))
        self.tri_e2 = cat(e2s, (0, 3))
        self.tri_lo = cat(los, (0, 3))
        self.tri_hi = cat(his, (0, 3))
        self.tri_local = cat(local, (0,), np.int64)
        self.tri_material = cat(mats, (0,), np.int64)
        self.tri_normals = cat(tri_n, (0, 3, 3))
        self.tri_has_normals = cat(has_n, (0,), np.bool_)

        self.mat_albedo = np.array([m.albedo for m in self.materials], np.float64).reshape(-1, 3)
        self.mat_emission = np.array([m.emission for m in self.materials], np.float64).reshape(-1, 3)
        self.mat_emissive = np.array([m.is_emissive for m in self.materials], np.bool_)

        n_inst = len(scene.instances)
        self.inst_object = np.array([i.object for i in scene.instances], np.int64)
        self.inst_xf = np.array([i.transform for i in scene.instances], np.float64).reshape(n_inst, 3, 4)
        self.inst_inv = np.empty((n_inst, 3, 4))
        self.inst_normal = np.empty((n_inst, 3, 3))
        for k in range(n_inst):
            a_inv = np.linalg.inv(self.inst_xf[k, :, :3])
            self.inst_inv[k, :, :3] = a_inv
            self.inst_inv[k, :, 3] = -a_inv @ self.inst_xf[k, :, 3]
            self.inst_normal[k] = a_inv.T
        self._build_lights()

    def object_triangles(self, obj: int) -> np.ndarray:
        """Global triangle ids of an object."""
        return np.arange(self.obj_tri_offset[obj], self.obj_tri_offset[obj + 1])

    def world_triangle_vertices(self, inst: int, local_tris=None) -> np.ndarray:
        """(n, 3, 3) world-space corners of an instance's triangles."""
        g = self.object_triangles(self.inst_object[inst])
        if local_tris is not None:
            g = g[np.asarray(local_tris, np.int64)]
        v = np.stack([self.tri_v0[g], self.tri_v0[g] + self.tri_e1[g], self.tri_v0[g] + self.tri_e2[g]], axis=1)
        xf = self.inst_xf[inst]
        return v @ xf[:, :3].T + xf[:, 3]

    def _build_lights(self):
        v0s, e1s, e2s, em = [], [], [], []
        for inst in range(len(self.inst_object)):
            g = self.object_triangles(self.inst_object[inst])
            emissive = self.mat_emissive[self.tri_material[g]]
            if not emissive.any():
                continue
            idx = np.flatnonzero(emissive)
            w = self.world_triangle_vertices(inst, idx)
            v0s.append(w[:, 0])
            e1s.append(w[:, 1] - w[:, 0])
            e2s.append(w[:, 2] - w[:, 0])
            em.append(self.mat_emission[self.tri_material[g[idx]]])
        if v0s:
            self.light_v0 = np.ascontiguousarray(np.concatenate(v0s))
            self.light_e1 = np.ascontiguousarray(np.concatenate(e1s))
            self.light_e2 = np.ascontiguousarray(np.concatenate(e2s))
            self.light_emission = np.ascontiguousarray(np.concatenate(em))
        else:
            self.light_v0 = np.zeros((0, 3))
            self.light_e1 = np.zeros((0, 3))
            self.light_e2 = np.zeros((0, 3))
            self.light_emission = np.zeros((0, 3))
        cr = np.cross(self.light_e1, self.light_e2)
        self.light_area = 0.5 * np.linalg.norm(cr, axis=1)
        self.light_normal = cr / np.maximum(2.0 * self.light_area, 1e-300)[:, None]
        self.light_centroid = self.light_v0 + (self.light_e1 + self.light_e2) / 3.0
        lum = self.light_emission @ np.array([0.2126, 0.7152, 0.0722])
        self.light_power = np.ascontiguousarray(lum * self.light_area * np.pi)


class LocalGeometry:
    """Two-level BVH over the geometry one rank holds.

    ``pieces`` is a list of ``(instance, local_tris_or_None, owners_mask)``;
    ``None`` means the instance's whole object. Each piece becomes one
    top-level entry carrying the owner mask reported as a hit's node mask.
    """

    def __init__(self, geo: SceneGeometry, pieces):
        self.geo = geo
        blas_index = {}
        nodes = []
        node_base = []
        prim_base = []
        n_nodes = 0
        n_prims = 0
        ent_root, ent_inst, ent_owners, ent_lo, ent_hi = [], [], [], [], []
        for inst, tris, owners in pieces:
            obj = int(geo.inst_object[inst])
            gtri = geo.object_triangles(obj)
            if tris is None:
                key = (obj, None)
            else:
                tris = np.unique(np.asarray(tris, np.int64))
                gtri = gtri[tris]
                key = (obj, tris.tobytes())
            if key not in blas_index:
                bvh = BvhNodes.build(geo.tri_lo[gtri], geo.tri_hi[gtri], LEAF_SIZE)
                bvh.prim = gtri[bvh.prim]
                blas_index[key] = len(nodes)
                nodes.append(bvh)
                node_base.append(n_nodes)
                prim_base.append(n_prims)
                n_nodes += len(bvh)
                n_prims += len(bvh.prim)
            b = blas_index[key]
            ent_root.append(node_base[b])
            ent_inst.append(inst)
            ent_owners.append(owners)
            w = geo.world_triangle_vertices(inst, None if tris is None else tris).reshape(-1, 3)
            ent_lo.append(w.min(axis=0))
            ent_hi.append(w.max(axis=0))

        def cat(field, dtype, shape):
            if not nodes:
                return np.zeros(shape, dtype)
            return np.ascontiguousarray(np.concatenate([getattr(n, field) for n in nodes]), dtype=dtype)

        bl_lo = cat("lo", np.float64, (0, 3))
        bl_hi = cat("hi", np.float64, (0, 3))
        bl_left = cat("left", np.int64, (0,))
        bl_right = cat("right", np.int64, (0,))
        bl_start = cat("start", np.int64, (0,))
        bl_count = cat("count", np.int64, (0,))
        bl_prim = cat("prim", np.int64, (0,))
        for b, n in enumerate(nodes):
            s, e = node_base[b], node_base[b] + len(n)
            inner = bl_left[s:e] >= 0
            bl_left[s:e][inner] += s
            bl_right[s:e][inner] += s
            bl_start[s:e] += prim_base[b]

        self.n_entries = len(ent_root)
        self.ent_inst = np.array(ent_inst, np.int64)
        self.ent_owners = np.array(ent_owners, np.uint64).view(np.int64) if ent_owners else np.zeros(0, np.int64)
        self.ent_lo = np.array(ent_lo, np.float64).reshape(-1, 3)
        self.ent_hi = np.array(ent_hi, np.float64).reshape(-1, 3)
        ent_inv = np.ascontiguousarray(geo.inst_inv[self.ent_inst]) if self.n_entries else np.zeros((0, 3, 4))
        tl = BvhNodes.build(self.ent_lo, self.ent_hi, 2)
        self.blas_count = len(nodes)
        self.G = tl.as_tuple() + (np.array(ent_root, np.int64), ent_inv, self.ent_inst,
                                  bl_lo, bl_hi, bl_left, bl_right, bl_start, bl_count, bl_prim,
                                  geo.tri_v0, geo.tri_e1, geo.tri_e2, geo.tri_local)

    def bounds(self) -> Aabb:
        if not self.n_entries:
            return Aabb.empty()
        return Aabb(self.ent_lo.min(axis=0), self.ent_hi.max(axis=0))

    def closest(self, org, dirs, tmin, tmax, inclusive):
        return K.closest_hit_batch(self.G, org, dirs, tmin, tmax, inclusive)

    def occluded(self, org, dirs, tmin, tmax):
        return K.any_hit_batch(self.G, org, dirs, tmin, tmax)
