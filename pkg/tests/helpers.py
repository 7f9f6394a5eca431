"""Small scene builders shared by the tests."""

import numpy as np

from proxytrace.scene import Camera, Instance, Material, Mesh, Object, Scene


def quad(lo, hi, axis: int, flip: bool = False):
    """Axis-aligned quad at lo[axis] spanning the other two axes; two triangles."""
    a, b = [k for k in range(3) if k != axis]
    v = np.zeros((4, 3))
    v[:, axis] = lo[axis]
    for i, (ca, cb) in enumerate(((0, 0), (1, 0), (1, 1), (0, 1))):
        v[i, a] = hi[a] if ca else lo[a]
        v[i, b] = hi[b] if cb else lo[b]
    t = np.array([[0, 1, 2], [0, 2, 3]])
    return v, (t[:, ::-1].copy() if flip else t)


def single_mesh_scene(vertices, triangles, env=(0.5, 0.5, 0.5), camera=None, material=None):
    mesh = Mesh(np.asarray(vertices, float), np.asarray(triangles, np.int64), material or Material())
    return Scene([Object("m", [mesh])], [Instance(0)], camera or Camera(), env)


def random_soup(rng, n, spread=4.0, size=0.6):
    """n random triangles as (vertices, triangles)."""
    centers = rng.uniform(-spread, spread, (n, 1, 3))
    v = (centers + rng.uniform(-size, size, (n, 3, 3))).reshape(-1, 3)
    return v, np.arange(3 * n).reshape(n, 3)


def random_rays(rng, n, spread=6.0):
    org = rng.uniform(-spread, spread, (n, 3))
    target = rng.uniform(-spread / 2, spread / 2, (n, 3))
    d = target - org
    return org, d / np.linalg.norm(d, axis=1, keepdims=True)


def shadow_locality_scene():
    """Floor with a low slab hovering over it and a light above, plus a far wall.

    The slab and the floor are one object so any object partitioner keeps them
    on one rank; the wall is a second object for a second rank.
    """
    floor_v, floor_t = quad((-2, 0, -2), (2, 0, 2), 1)
    slab_v, slab_t = quad((-1, 0.3, -1), (1, 0.3, 1), 1, flip=True)
    wall_v, wall_t = quad((-2, 0, -6), (2, 3, -6), 2)
    light_v, light_t = quad((-0.5, 2.0, -0.5), (0.5, 2.0, 0.5), 1, flip=True)
    white = Material(albedo=(0.7, 0.7, 0.7))
    objects = [
        Object("ground", [Mesh(floor_v, floor_t, white), Mesh(slab_v, slab_t, white)]),
        Object("wall", [Mesh(wall_v, wall_t, white)]),
        Object("light", [Mesh(light_v, light_t, Material(kind="emissive", emission=(10.0, 10.0, 10.0)))]),
    ]
    cam = Camera((0.0, 0.15, 3.0), (0.0, 0.1, 0.0), (0.0, 1.0, 0.0), 50.0)
    return Scene(objects, [Instance(0), Instance(1), Instance(2)], cam, (0.0, 0.0, 0.0))


# acceptance results, printed by the terminal summary hook in conftest
ACCEPTANCE: dict = {}


def report(number: int, title: str, ok: bool, detail: str = ""):
    line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    ACCEPTANCE[number] = line
    print(line)
    return ok
