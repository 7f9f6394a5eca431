"""Scene model, JSON/OBJ ingestion and procedural test scenes."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .accel.aabb import Aabb, union_all


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Material:
    kind: str = "diffuse"
    albedo: tuple[float, float, float] = (0.7, 0.7, 0.7)
    emission: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("diffuse", "emissive"):
            raise SceneError(f"unknown material kind {self.kind!r}")
        if self.kind == "diffuse":
            if any(not (0.0 <= a < 1.0) for a in self.albedo):
                raise SceneError(f"diffuse albedo must lie in [0, 1): {self.albedo}")
        else:
            if any(e < 0.0 for e in self.emission):
                raise SceneError(f"emission must be non-negative: {self.emission}")
            # emitters terminate paths, so they never reflect
            object.__setattr__(self, "albedo", (0.0, 0.0, 0.0))

    @property
    def is_emissive(self) -> bool:
        return self.kind == "emissive"

    def to_json(self) -> dict:
        if self.is_emissive:
            return {"kind": "emissive", "emission": list(self.emission)}
        return {"kind": "diffuse", "albedo": list(self.albedo)}

    @classmethod
    def from_json(cls, d: dict, where: str = "material") -> Material:
        kind = d.get("kind", "diffuse")
        try:
            if kind == "emissive":
                return cls(kind="emissive", albedo=(0.0, 0.0, 0.0),
                           emission=tuple(float(x) for x in d["emission"]))
            return cls(kind="diffuse", albedo=tuple(float(x) for x in d.get("albedo", (0.7, 0.7, 0.7))))
        except (KeyError, TypeError) as e:
            raise SceneError(f"{where}: malformed material ({e})") from None


@dataclass(eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    material: Material = field(default_factory=Material)
    normals: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.vertices):
                raise SceneError(f"mesh {self.name!r}: normal count != vertex count")
        if len(self.triangles) == 0:
            raise SceneError(f"mesh {self.name!r} has zero triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise SceneError(f"mesh {self.name!r}: triangle index out of range")

    @property
    def tri_count(self) -> int:
        return len(self.triangles)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    def bounds(self) -> Aabb:
        return Aabb.from_points(self.vertices[np.unique(self.triangles)])


@dataclass(eq=False)
class Object:
    id: str
    meshes: list[Mesh]

    def __post_init__(self):
        if not self.meshes:
            raise SceneError(f"object {self.id!r} has no meshes")
        counts = [m.tri_count for m in self.meshes]
        self.mesh_tri_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    @property
    def tri_count(self) -> int:
        return int(self.mesh_tri_offsets[-1])

    def bounds(self) -> Aabb:
        return union_all(m.bounds() for m in self.meshes)

    def mesh_of_triangle(self, tri: int) -> int:
        return int(np.searchsorted(self.mesh_tri_offsets, tri, side="right") - 1)


def apply_transform(xf: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ xf[:, :3].T + xf[:, 3]


@dataclass(eq=False)
class Instance:
    object: int
    transform: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))

    def __post_init__(self):
        self.transform = np.ascontiguousarray(self.transform, dtype=np.float64).reshape(3, 4)
        if abs(np.linalg.det(self.transform[:, :3])) < 1e-12:
            raise SceneError("instance transform is singular")


@dataclass(frozen=True)
class Camera:
    pos: tuple[float, float, float] = (0.0, 0.0, 5.0)
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov_y: float = 40.0

    def basis(self):
        """Return (right, up, forward) unit vectors."""
        f = np.asarray(self.look_at, float) - np.asarray(self.pos, float)
        f /= np.linalg.norm(f)
        r = np.cross(f, np.asarray(self.up, float))
        if np.linalg.norm(r) < 1e-12:
            raise SceneError("camera up vector is parallel to the view direction")
        r /= np.linalg.norm(r)
        u = np.cross(r, f)
        return r, u, f

    def to_json(self) -> dict:
        return {"pos": list(self.pos), "lookAt": list(self.look_at), "up": list(self.up), "fovY": self.fov_y}

    @classmethod
    def from_json(cls, d: dict) -> Camera:
        try:
            return cls(pos=tuple(map(float, d["pos"])), look_at=tuple(map(float, d["lookAt"])),
                       up=tuple(map(float, d.get("up", (0, 1, 0)))), fov_y=float(d.get("fovY", 40.0)))
        except (KeyError, TypeError, ValueError) as e:
            raise SceneError(f"camera: malformed field ({e})") from None


@dataclass(eq=False)
class Scene:
    objects: list[Object]
    instances: list[Instance]
    camera: Camera = field(default_factory=Camera)
    environment: tuple[float, float, float] = (0.0, 0.0, 0.0)
    name: str = "scene"

    def __post_init__(self):
        for i, inst in enumerate(self.instances):
            if not 0 <= inst.object < len(self.objects):
                raise SceneError(f"instances[{i}]: unknown object index {inst.object}")
        self.environment = tuple(float(x) for x in self.environment)
        self._world_bounds = [self._instance_bounds(inst) for inst in self.instances]
        self.bounds = union_all(self._world_bounds)
        if not self.has_lights() and max(self.environment) <= 0.0:
            raise SceneError("scene has neither emissive geometry nor environment light")

    def _instance_bounds(self, inst: Instance) -> Aabb:
        obj = self.objects[inst.object]
        pts = np.concatenate([m.vertices for m in obj.meshes])
        return Aabb.from_points(apply_transform(inst.transform, pts))

    def instance_bounds(self, i: int) -> Aabb:
        return self._world_bounds[i]

    def instances_of(self, obj: int) -> list[int]:
        return [i for i, inst in enumerate(self.instances) if inst.object == obj]

    def instance_counts(self) -> np.ndarray:
        counts = np.zeros(len(self.objects), dtype=np.int64)
        for inst in self.instances:
            counts[inst.object] += 1
        return counts

    def has_lights(self) -> bool:
        return any(m.material.is_emissive for inst in self.instances for m in self.objects[inst.object].meshes)

    def world_vertices(self, inst: int, mesh: int) -> np.ndarray:
        m = self.objects[self.instances[inst].object].meshes[mesh]
        return apply_transform(self.instances[inst].transform, m.vertices)

    def to_json(self) -> dict:
        objs = []
        for o in self.objects:
            meshes = []
            for m in o.meshes:
                inline = {"vertices": m.vertices.tolist(), "triangles": m.triangles.tolist()}
                if m.normals is not None:
                    inline["normals"] = m.normals.tolist()
                entry = {"inline": inline, "material": m.material.to_json()}
                if m.name:
                    entry["name"] = m.name
                meshes.append(entry)
            objs.append({"id": o.id, "meshes": meshes})
        return {
            "camera": self.camera.to_json(),
            "environment": list(self.environment),
            "objects": objs,
            "instances": [{"object": self.objects[i.object].id, "transform": i.transform.reshape(-1).tolist()}
                          for i in self.instances],
        }

    def digest(self) -> bytes:
        """sha256 over the canonical JSON form."""
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).digest()


def save_scene(scene: Scene, path, obj_dir: str | None = None) -> None:
    """Write the scene as JSON; with ``obj_dir`` the meshes go to OBJ files next to it.

    OBJ export keeps positions and faces only, so stored shading normals are dropped.
    """
    path = Path(path)
    doc = scene.to_json()
    if obj_dir is not None:
        (path.parent / obj_dir).mkdir(parents=True, exist_ok=True)
        for od in doc["objects"]:
            for mi, md in enumerate(od["meshes"]):
                rel = f"{obj_dir}/{od['id']}_{mi}.obj"
                inl = md.pop("inline")
                lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in inl["vertices"]]
                lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in inl["triangles"]]
                (path.parent / rel).write_text("\n".join(lines) + "\n")
                md["obj"] = rel
    path.write_text(json.dumps(doc, indent=1))


# --------------------------------------------------------------------- loading

def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``v`` and ``f`` records; polygons are fan-triangulated."""
    verts, tris = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        k = int(tok.split("/")[0])
                        idx.append(k - 1 if k > 0 else len(verts) + k)
                    for j in range(1, len(idx) - 1):
                        tris.append([idx[0], idx[j], idx[j + 1]])
            except (ValueError, IndexError) as e:
                raise SceneError(f"{path}:{lineno}: malformed record ({e})") from None
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3)


def _require(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise SceneError(f"{where}: missing field {key!r}")
    return d[key]


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SceneError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    return scene_from_json(doc, base_dir=path.parent, name=path.stem)


def scene_from_json(doc: dict, base_dir=".", name: str = "scene") -> Scene:
    base_dir = Path(base_dir)
    objects, ids = [], {}
    for oi, od in enumerate(_require(doc, "objects", "scene")):
        where = f"objects[{oi}]"
        oid = str(_require(od, "id", where))
        if oid in ids:
            raise SceneError(f"{where}: duplicate object id {oid!r}")
        default_mat = Material.from_json(od["material"], f"{where}.material") if "material" in od else Material()
        meshes = []
        for mi, md in enumerate(_require(od, "meshes", where)):
            mwhere = f"{where}.meshes[{mi}]"
            mat = Material.from_json(md["material"], f"{mwhere}.material") if "material" in md else default_mat
            normals = None
            if "obj" in md:
                obj_path = base_dir / md["obj"]
                if not obj_path.exists():
                    raise SceneError(f"{mwhere}: missing OBJ file {obj_path}")
                v, t = load_obj(obj_path)
            elif "inline" in md:
                inl = md["inline"]
                v = np.asarray(_require(inl, "vertices", mwhere), dtype=np.float64)
                t = np.asarray(_require(inl, "triangles", mwhere), dtype=np.int64)
                if "normals" in inl:
                    normals = np.asarray(inl["normals"], dtype=np.float64)
            else:
                raise SceneError(f"{mwhere}: needs either 'obj' or 'inline'")
            try:
                meshes.append(Mesh(v, t, mat, normals, name=md.get("name", f"{oid}.{mi}")))
            except SceneError as e:
                raise SceneError(f"{mwhere}: {e}") from None
        ids[oid] = len(objects)
        objects.append(Object(oid, meshes))

    instances = []
    for ii, idoc in enumerate(_require(doc, "instances", "scene")):
        where = f"instances[{ii}]"
        ref = str(_require(idoc, "object", where))
        if ref not in ids:
            raise SceneError(f"{where}: unknown object {ref!r}")
        xf = np.asarray(idoc.get("transform", [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0]), dtype=np.float64)
        if xf.size != 12:
            raise SceneError(f"{where}: transform needs 12 floats, got {xf.size}")
        instances.append(Instance(ids[ref], xf.reshape(3, 4)))

    camera = Camera.from_json(doc["camera"]) if "camera" in doc else Camera()
    env = tuple(float(x) for x in doc.get("environment", (0.0, 0.0, 0.0)))
    return Scene(objects, instances, camera, env, name=name)


# ------------------------------------------------------------------ generators

def _revolve(profile, segments: int) -> tuple[np.ndarray, np.ndarray]:
    """Surface of revolution around +y. Profile points with radius 0 become poles."""
    verts, rings = [], []
    for r, y in profile:
        if r == 0.0:
            rings.append([len(verts)])
            verts.append((0.0, y, 0.0))
        else:
            ring = []
            for s in range(segments):
                a = 2.0 * math.pi * s / segments
                ring.append(len(verts))
                verts.append((r * math.cos(a), y, r * math.sin(a)))
            rings.append(ring)
    tris = []
    for a, b in zip(rings[:-1], rings[1:]):
        for s in range(segments):
            s1 = (s + 1) % segments
            if len(a) == 1 and len(b) == 1:
                continue
            if len(a) == 1:
                tris.append((a[0], b[s1], b[s]))
            elif len(b) == 1:
                tris.append((a[s], a[s1], b[0]))
            else:
                tris.append((a[s], a[s1], b[s1]))
                tris.append((a[s], b[s1], b[s]))
    return np.array(verts), np.array(tris)


def _box_faces(lo, hi, n: int, faces=("-x", "+x", "-y", "+y", "-z", "+z")):
    """Tessellated faces of an axis-aligned box; each face is an n x n grid."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    verts, tris = [], []
    for f in faces:
        axis = "xyz".index(f[1])
        u_ax, v_ax = [a for a in range(3) if a != axis]
        fixed = hi[axis] if f[0] == "+" else lo[axis]
        base = len(verts)
        for j in range(n + 1):
            for i in range(n + 1):
                p = np.zeros(3)
                p[axis] = fixed
                p[u_ax] = lo[u_ax] + (hi[u_ax] - lo[u_ax]) * i / n
                p[v_ax] = lo[v_ax] + (hi[v_ax] - lo[v_ax]) * j / n
                verts.append(p)
        for j in range(n):
            for i in range(n):
                a = base + j * (n + 1) + i
                tris.append((a, a + 1, a + n + 2))
                tris.append((a, a + n + 2, a + n + 1))
    return np.array(verts), np.array(tris)


def _grid_mesh(xs, zs, height, rows: slice):
    """Heightfield triangles for grid rows ``rows`` (each row is one strip of quads)."""
    r0, r1 = rows.start, rows.stop
    nx = len(xs)
    verts = []
    for j in range(r0, r1 + 1):
        for i in range(nx):
            verts.append((xs[i], height(xs[i], zs[j]), zs[j]))
    tris = []
    for j in range(r1 - r0):
        for i in range(nx - 1):
            a = j * nx + i
            tris.append((a, a + nx, a + 1))
            tris.append((a + 1, a + nx, a + nx + 1))
    return np.array(verts), np.array(tris)


ISLAND_HALF = 50.0
ISLAND_VIEWS = {
    "default": Camera((0.0, 38.0, 88.0), (0.0, 2.0, 0.0), (0.0, 1.0, 0.0), 45.0),
    "beach": Camera((62.0, 7.0, 40.0), (-5.0, 3.0, -5.0), (0.0, 1.0, 0.0), 50.0),
    "top": Camera((0.0, 150.0, 1.0), (0.0, 0.0, 0.0), (0.0, 0.0, -1.0), 40.0),
}


def _height_a(x, z):
    return (7.0 * math.exp(-((x + 15.0) ** 2 + (z - 8.0) ** 2) / 450.0)
            + 1.6 * math.sin(x / 9.0) * math.cos(z / 11.0) + 1.0)


def _height_b(x, z):
    return 1.4 + 2.2 * math.sin(0.22 * x + 0.13 * z) * math.cos(0.07 * z)


def _tree_c() -> list[Mesh]:
    bark = Material(albedo=(0.35, 0.25, 0.15))
    needles = Material(albedo=(0.1, 0.35, 0.12))
    trunk_v, trunk_t = _revolve([(0.0, 0.0), (0.3, 0.0), (0.25, 1.6), (0.0, 1.6)], 12)
    prof = [(0.0, 1.2)]
    tiers = 4
    for k in range(tiers):
        y0 = 1.2 + 1.3 * k
        r0 = 2.4 * (1.0 - k / (tiers + 0.5))
        # each tier is a flared cone, tessellated along its slant
        for s in range(10):
            f = s / 9.0
            prof.append((r0 * (1.0 - 0.75 * f) + 1e-3, y0 + 1.6 * f))
    prof.append((0.0, 1.2 + 1.3 * (tiers - 1) + 1.7))
    canopy_v, canopy_t = _revolve(prof, 40)
    return [Mesh(trunk_v, trunk_t, bark, name="C.trunk"), Mesh(canopy_v, canopy_t, needles, name="C.canopy")]


def _tree_d() -> list[Mesh]:
    bark = Material(albedo=(0.4, 0.3, 0.2))
    leaves = Material(albedo=(0.2, 0.5, 0.15))
    lamp = Material(kind="emissive", emission=(9.0, 6.0, 2.5))
    trunk_v, trunk_t = _revolve([(0.0, 0.0), (0.35, 0.0), (0.28, 2.4), (0.0, 2.4)], 12)
    rings = 32
    prof = [(2.1 * math.sin(math.pi * k / rings), 4.2 - 2.1 * math.cos(math.pi * k / rings)) for k in range(rings + 1)]
    prof[0] = (0.0, prof[0][1])
    prof[-1] = (0.0, prof[-1][1])
    canopy_v, canopy_t = _revolve(prof, 48)
    oct_v = np.array([(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)], float) * 0.3
    oct_v += (2.5, 2.6, 0.0)
    oct_t = np.array([(0, 2, 4), (2, 1, 4), (1, 3, 4), (3, 0, 4), (2, 0, 5), (1, 2, 5), (3, 1, 5), (0, 3, 5)])
    return [Mesh(trunk_v, trunk_t, bark, name="D.trunk"), Mesh(canopy_v, canopy_t, leaves, name="D.canopy"),
            Mesh(oct_v, oct_t, lamp, name="D.lantern")]


def _rot_y_scale(angle: float, scale: float, pos) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    m = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]) * scale
    return np.hstack([m, np.asarray(pos, float).reshape(3, 1)])


def generate_mini_island(ground_resolution: int = 8, tree_counts=(3, 4), seed: int = 42,
                         bands: int = 4) -> Scene:
    """A small 3D analogue of an island-style production scene.

    Two large interleaved ground objects (each split into ``bands`` strip
    meshes) plus two tree objects instanced ``tree_counts`` times.
    """
    if ground_resolution < 2:
        raise ValueError("ground_resolution must be >= 2")
    if min(tree_counts) < 1:
        raise ValueError("tree_counts must be >= (1, 1)")
    rng = np.random.default_rng(seed)
    L = ISLAND_HALF
    xs = np.linspace(-L, L, ground_resolution + 1)
    zs = np.linspace(-L, L, ground_resolution + 1)
    bands = max(1, min(bands, ground_resolution))
    cuts = np.linspace(0, ground_resolution, bands + 1).round().astype(int)

    objects = []
    for oid, height, mat in (("A", _height_a, Material(albedo=(0.32, 0.42, 0.22))),
                             ("B", _height_b, Material(albedo=(0.76, 0.68, 0.5)))):
        meshes = []
        for b in range(bands):
            v, t = _grid_mesh(xs, zs, height, slice(int(cuts[b]), int(cuts[b + 1])))
            meshes.append(Mesh(v, t, mat, name=f"{oid}.band{b}"))
        objects.append(Object(oid, meshes))
    objects.append(Object("C", _tree_c()))
    objects.append(Object("D", _tree_d()))

    instances = [Instance(0), Instance(1)]
    for obj, count in ((2, tree_counts[0]), (3, tree_counts[1])):
        for _ in range(count):
            x, z = rng.uniform(-0.85 * L, 0.85 * L, size=2)
            y = max(_height_a(x, z), _height_b(x, z)) - 0.2
            xf = _rot_y_scale(rng.uniform(0, 2 * math.pi), rng.uniform(0.8, 1.4), (x, y, z))
            instances.append(Instance(obj, xf))
    return Scene(objects, instances, ISLAND_VIEWS["default"], (0.55, 0.65, 0.85), name="mini-island")


def generate_stress_island(seed: int = 7) -> Scene:
    """The heavily instanced variant used for the part-size and forwarding experiments."""
    return generate_mini_island(ground_resolution=64, tree_counts=(100, 100), seed=seed)


def generate_box_room(tessellation: int = 6) -> Scene:
    """Closed-on-five-sides room with two boxes and a ceiling light; nothing instanced twice."""
    n = tessellation
    white = Material(albedo=(0.73, 0.73, 0.73))
    walls = []
    for name, lo, hi, face, mat in (
        ("floor", (-1, -1, -1), (1, -1, 1), "+y", white),
        ("ceiling", (-1, 1, -1), (1, 1, 1), "-y", white),
        ("back", (-1, -1, -1), (1, 1, -1), "+z", white),
        ("left", (-1, -1, -1), (-1, 1, 1), "+x", Material(albedo=(0.63, 0.06, 0.05))),
        ("right", (1, -1, -1), (1, 1, 1), "-x", Material(albedo=(0.14, 0.45, 0.09))),
    ):
        v, t = _box_faces(lo, hi, n, faces=(face,))
        walls.append(Mesh(v, t, mat, name=f"room.{name}"))
    objects = [Object("room", walls)]
    instances = [Instance(0)]
    for oid, (lo, hi), angle, pos in (
        ("tall", ((-0.3, 0.0, -0.3), (0.3, 1.2, 0.3)), 0.3, (-0.35, -1.0, -0.3)),
        ("short", ((-0.3, 0.0, -0.3), (0.3, 0.6, 0.3)), -0.3, (0.4, -1.0, 0.3)),
    ):
        sv, st = _box_faces(lo, hi, max(1, n // 2), faces=("-x", "+x", "-z", "+z"))
        tv, tt = _box_faces(lo, hi, max(1, n // 2), faces=("+y",))
        objects.append(Object(oid, [Mesh(sv, st, white, name=f"{oid}.sides"),
                                    Mesh(tv, tt, white, name=f"{oid}.top")]))
        instances.append(Instance(len(objects) - 1, _rot_y_scale(angle, 1.0, pos)))
    lv, lt = _box_faces((-0.3, 0.98, -0.3), (0.3, 0.98, 0.3), 1, faces=("-y",))
    objects.append(Object("light", [Mesh(lv, lt, Material(kind="emissive", emission=(14.0, 12.0, 9.0)),
                                         name="light.quad")]))
    instances.append(Instance(len(objects) - 1))
    cam = Camera((0.13, 0.07, 3.6), (0.03, -0.05, 0.0), (0.0, 1.0, 0.0), 40.0)
    return Scene(objects, instances, cam, (0.02, 0.02, 0.02), name="box-room")
