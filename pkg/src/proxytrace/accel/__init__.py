from .aabb import Aabb, union_all
from .bvh import Hit, TriBvh, braid_split, build_tri_bvh
from .geometry import LocalGeometry, SceneGeometry

__all__ = ["Aabb", "union_all", "Hit", "TriBvh", "braid_split", "build_tri_bvh", "LocalGeometry", "SceneGeometry"]
