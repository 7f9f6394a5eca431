import json

import numpy as np
import pytest

from helpers import single_mesh_scene
from proxytrace.scene import (Camera, Instance, Material, Mesh, Object, Scene, SceneError, apply_transform,
                              generate_mini_island, load_obj, load_scene, save_scene, scene_from_json)


def write_scene(tmp_path, doc, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def tri_doc(**extra):
    doc = {
        "camera": {"pos": [0, 0, 5], "lookAt": [0, 0, 0], "up": [0, 1, 0], "fovY": 40},
        "environment": [0.5, 0.5, 0.5],
        "objects": [{"id": "t", "meshes": [{"inline": {"vertices": [[0, 0, 0], [1, 0, 0], [0, 2, 0]],
                                                       "triangles": [[0, 1, 2]]}}]}],
        "instances": [{"object": "t", "transform": [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0]}],
    }
    doc.update(extra)
    return doc


def test_single_triangle_bounds(tmp_path):
    s = load_scene(write_scene(tmp_path, tri_doc()))
    assert np.array_equal(s.bounds.lo, [0, 0, 0])
    assert np.array_equal(s.bounds.hi, [1, 2, 0])
    assert s.camera.fov_y == 40


def test_missing_obj_names_path(tmp_path):
    doc = tri_doc(objects=[{"id": "t", "meshes": [{"obj": "nowhere/tree.obj"}]}])
    with pytest.raises(SceneError, match="nowhere/tree.obj"):
        load_scene(write_scene(tmp_path, doc))


def test_zero_triangle_mesh_rejected(tmp_path):
    doc = tri_doc(objects=[{"id": "t", "meshes": [{"inline": {"vertices": [[0, 0, 0]], "triangles": []}}]}])
    with pytest.raises(SceneError, match="meshes\\[0\\]"):
        load_scene(write_scene(tmp_path, doc))


def test_parse_error_has_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"objects": [\n  {"id": }\n]}')
    with pytest.raises(SceneError, match="line 2"):
        load_scene(p)


@pytest.mark.parametrize("doc,msg", [
    ({"instances": []}, "objects"),
    ({"objects": [], "instances": [{"object": "x"}]}, "unknown object"),
    ({"objects": [{"id": "a", "meshes": [{}]}], "instances": []}, "obj"),
])
def test_field_errors(doc, msg):
    with pytest.raises(SceneError, match=msg):
        scene_from_json(dict(doc, environment=[1, 1, 1]))


def test_scene_needs_light():
    with pytest.raises(SceneError, match="light"):
        single_mesh_scene([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], env=(0, 0, 0))


def test_obj_fans_and_ignores_other_records(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nusemtl x\nf 1/1/1 2/2/1 3/3/1 4/4/1\n"
                 "f -4 -3 -2\n")
    v, t = load_obj(p)
    assert v.shape == (4, 3)
    assert t.tolist() == [[0, 1, 2], [0, 2, 3], [0, 1, 2]]


def test_obj_resolved_relative_to_scene(tmp_path):
    (tmp_path / "meshes").mkdir()
    (tmp_path / "meshes" / "t.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    doc = tri_doc(objects=[{"id": "t", "meshes": [{"obj": "meshes/t.obj"}]}])
    s = load_scene(write_scene(tmp_path, doc))
    assert s.objects[0].meshes[0].tri_count == 1


def test_mini_island_layout(island):
    counts = island.instance_counts()
    assert len(island.objects) == 4
    assert sorted(counts.tolist()) == [1, 1, 3, 4]
    assert sum(c for c in counts if c > 1) == 7


def test_mini_island_deterministic():
    a = generate_mini_island(8, (3, 4), 42)
    b = generate_mini_island(8, (3, 4), 42)
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())
    assert a.digest() == b.digest()
    assert generate_mini_island(8, (3, 4), 43).digest() != a.digest()


def test_stress_scene_instance_count(stress):
    assert len(stress.instances) >= 200


@pytest.mark.parametrize("args", [(1, (3, 4), 0), (8, (0, 4), 0)])
def test_mini_island_rejects_bad_args(args):
    with pytest.raises(ValueError):
        generate_mini_island(*args)


def test_world_bounds_contain_every_vertex(island):
    for i, inst in enumerate(island.instances):
        b = island.instance_bounds(i)
        for m in island.objects[inst.object].meshes:
            w = apply_transform(inst.transform, m.vertices)
            assert np.all(w >= b.lo) and np.all(w <= b.hi)


@pytest.mark.parametrize("obj_dir", [None, "meshes"])
def test_save_load_round_trip(tmp_path, box_room, obj_dir):
    p = tmp_path / "room.json"
    save_scene(box_room, p, obj_dir=obj_dir)
    again = load_scene(p)
    assert len(again.instances) == len(box_room.instances)
    for o1, o2 in zip(box_room.objects, again.objects):
        for m1, m2 in zip(o1.meshes, o2.meshes):
            assert np.array_equal(m1.vertices, m2.vertices)
            assert np.array_equal(m1.triangles, m2.triangles)
            assert m1.material == m2.material
    if obj_dir is None:
        assert again.digest() == box_room.digest()


def test_load_is_deterministic(tmp_path, island):
    p = tmp_path / "island.json"
    save_scene(island, p)
    assert load_scene(p).digest() == load_scene(p).digest() == island.digest()


def test_invalid_material_and_transform():
    with pytest.raises(SceneError):
        Material(albedo=(1.2, 0, 0))
    with pytest.raises(SceneError):
        Instance(0, np.zeros((3, 4)))
    with pytest.raises(SceneError):
        Camera(pos=(0, 5, 0), look_at=(0, 0, 0), up=(0, 1, 0)).basis()


def test_instances_share_mesh_objects():
    m = Mesh(np.eye(3), np.array([[0, 1, 2]]), Material(kind="emissive", emission=(1, 1, 1)))
    s = Scene([Object("a", [m])], [Instance(0), Instance(0, np.hstack([np.eye(3), np.ones((3, 1))]))])
    assert s.instances_of(0) == [0, 1]
    assert np.allclose(s.bounds.hi, [2, 2, 2])
