from dataclasses import replace

import numpy as np
import pytest

from helpers import shadow_locality_scene
from proxytrace.engine import RankRenderer, RenderConfig, make_primaries, render_inproc, tone_map
from proxytrace.engine import kernels as EK
from proxytrace.partition import STRATEGIES, PartitionPlan, partition
from proxytrace.proxy import ProxySet
from proxytrace.reference import brute_force_hit, forward_oracle, relative_error, render_reference
from proxytrace.rng import sample_seed
from proxytrace.scene import Camera, Instance, Material, Mesh, Object, Scene
from proxytrace.transport.wire import FLAG_SHADOW, PIXEL_MASK

SMALL = RenderConfig(width=40, height=32, spp=2, max_bounce=3, seed=11)


def reference(scene, cfg, geo=None):
    return render_reference(scene, cfg=cfg, geo=geo)


def test_single_rank_is_bit_identical(island, island_geo):
    plan = partition(island, 1, "best")
    res = render_inproc(island, plan, SMALL, geo=island_geo)
    assert np.array_equal(res.image, reference(island, SMALL, island_geo))
    assert res.stats.forwards_total == 0 and res.stats.max_rounds == 0


@pytest.mark.parametrize("strategy", STRATEGIES)
@pytest.mark.parametrize("ranks", [3, 5])
def test_matches_reference(island, island_geo, strategy, ranks):
    ref = reference(island, SMALL, island_geo)
    res = render_inproc(island, partition(island, ranks, strategy), SMALL, geo=island_geo)
    assert relative_error(res.image, ref).max() <= 1e-4
    st = res.stats
    assert st.revisits == 0 and st.max_rounds <= ranks
    assert st.forwards_total == st.matrix_forwards
    assert np.all(np.isfinite(res.image)) and np.all(res.image >= 0)


@pytest.mark.parametrize("mask", ["bitmask64", "replay"])
def test_box_room_mask_modes(box_room, box_geo, mask):
    cfg = replace(SMALL, mask=mask)
    ref = reference(box_room, cfg, box_geo)
    res = render_inproc(box_room, partition(box_room, 4, "object-naive"), cfg, geo=box_geo)
    assert relative_error(res.image, ref).max() <= 1e-4


def world_triangles(scene):
    v0, e1, e2, emissive, emission = [], [], [], [], []
    for inst in scene.instances:
        for m in scene.objects[inst.object].meshes:
            w = m.vertices[m.triangles]
            w = np.einsum("ij,ntj->nti", inst.transform[:, :3], w) + inst.transform[:, 3]
            v0.append(w[:, 0])
            e1.append(w[:, 1] - w[:, 0])
            e2.append(w[:, 2] - w[:, 0])
            emissive += [m.material.kind == "emissive"] * len(w)
            emission += [m.material.emission] * len(w)
    return np.concatenate(v0), np.concatenate(e1), np.concatenate(e2), emissive, np.array(emission, float)


def test_zero_bounces_is_direct_visibility():
    scene = shadow_locality_scene()
    scene = Scene(scene.objects, scene.instances, scene.camera, (0.2, 0.3, 0.4))
    cfg = RenderConfig(width=24, height=20, spp=1, max_bounce=0, seed=5)
    res = render_inproc(scene, partition(scene, 2, "object-naive"), cfg)
    v0, e1, e2, emissive, emission = world_triangles(scene)
    org, dirs = make_primaries(scene.camera, cfg, sample_seed(cfg.seed, 0))
    expect = np.zeros((cfg.width * cfg.height, 3))
    for p in range(len(org)):
        hit = brute_force_hit(v0, e1, e2, org[p], dirs[p])
        if hit is None:
            expect[p] = scene.environment
        elif emissive[hit[1]]:
            expect[p] = emission[hit[1]]
    got = res.image.reshape(-1, 3)
    assert np.array_equal(got, expect.astype(np.float32))
    assert (expect.sum(axis=1) == 0).any() and (expect[:, 2] == 0.4).any()


def test_empty_scene_is_environment():
    scene = Scene([], [], Camera(), (0.5, 0.5, 0.5))
    img = render_reference(scene, width=8, height=6, spp=3)
    assert np.allclose(img, 1.5)
    assert np.all(tone_map(img, 3) == round(255 * 0.5 ** (1 / 2.2)))


@pytest.mark.parametrize("strategy", ["object-naive", "bvh-style", "object-proxies", "best"])
def test_shadow_rays_stay_with_their_occluder(strategy):
    scene = shadow_locality_scene()
    cfg = RenderConfig(width=48, height=32, spp=2, max_bounce=1, seed=2, log_arrivals=True)
    plan = partition(scene, 2, strategy)
    ground = {plan.owners[i] for i, it in enumerate(plan.items) if it.object == 0}
    assert len(ground) == 1 and ground.pop() in (1, 2)
    ground_rank = next(r for r in range(2) if plan.owners[0] >> r & 1)
    res = render_inproc(scene, plan, cfg)
    arrivals = np.concatenate([a for f in res.frames for a in f.arrivals])
    shadow = arrivals[(arrivals[:, 2] & FLAG_SHADOW) != 0]
    # shadow rays spawned on the ground (floor + slab) rank never reach the wall rank
    assert not np.any(shadow[:, 3] != ground_rank)
    assert res.stats.forwards_total > 0  # paths do travel: the wall lives elsewhere
    assert relative_error(res.image, reference(scene, replace(cfg, log_arrivals=False))).max() <= 1e-4


def expected_primary_owner(plan, org, dirs, pixel, n):
    proxies = [(plan.proxies.lo[k], plan.proxies.hi[k], int(plan.proxies.owners[k]) & ((1 << 64) - 1))
               for k in range(len(plan.proxies))]
    r = forward_oracle(org, dirs, 0, proxies, True, pixel)
    return pixel % n if r is None else r


@pytest.mark.parametrize("strategy", ["spatial-simple", "object-proxies", "best"])
def test_primary_ownership_partition(island, island_geo, strategy):
    cfg = RenderConfig(width=24, height=16)
    n = 4
    plan = partition(island, n, strategy)
    kept = [RankRenderer(r, n, island, plan, cfg, island_geo).primaries(7).pixel for r in range(n)]
    allp = np.concatenate(kept)
    assert len(allp) == len(np.unique(allp)) == cfg.width * cfg.height
    org, dirs = make_primaries(island.camera, cfg, 7)
    for r, px in enumerate(kept):
        for p in px[::5]:
            assert expected_primary_owner(plan, org[p], dirs[p], int(p), n) == r


def replicated_plan(scene, n=2):
    """Every item on both ranks behind one shared proxy."""
    base = partition(scene, n, "object-naive")
    full = (1 << n) - 1
    box = scene.bounds
    return replace(base, owners=[full] * len(base.items), proxies=ProxySet([box.lo], [box.hi], [full]),
                   memory=[max(base.memory)] * n)


def test_replicated_proxy_checkerboard(box_room, box_geo):
    plan = replicated_plan(box_room)
    assert isinstance(plan, PartitionPlan)
    cfg = RenderConfig(width=15, height=9, spp=1, max_bounce=2)
    kept = [RankRenderer(r, 2, box_room, plan, cfg, box_geo).primaries(1).pixel for r in range(2)]
    assert np.array_equal(kept[0], np.arange(0, 135, 2)) and np.array_equal(kept[1], np.arange(1, 135, 2))
    res = render_inproc(box_room, plan, cfg, geo=box_geo)
    assert relative_error(res.image, reference(box_room, cfg, box_geo)).max() <= 1e-4


def test_replay_visited_equals_bitmask(island, island_geo):
    plan = partition(island, 4, "object-proxies")
    logs = {}
    for mask in ("bitmask8", "replay"):
        cfg = replace(SMALL, mask=mask, tmax_culling=False, log_arrivals=True)
        res = render_inproc(island, plan, cfg, geo=island_geo)
        a = np.concatenate([x for f in res.frames for x in f.arrivals])
        logs[mask] = a[np.lexsort(a.T[::-1])]
    assert len(logs["replay"]) > 100
    assert np.array_equal(logs["bitmask8"], logs["replay"])


def test_reservoir_selects_by_weight():
    power = np.array([3.0, 1.0])
    cent = np.array([[0.0, 5.0, 0.0], [0.0, -5.0, 0.0]])
    picks = np.array([EK.select_light(power, cent, 0.0, 0.0, 0.0, 99, p, 1)[0] for p in range(10000)])
    frac = (picks == 0).mean()
    assert abs(frac - 0.75) <= 3 * np.sqrt(0.75 * 0.25 / 10000)
    one = [EK.select_light(power[:1], cent[:1], 1.0, 2.0, 3.0, 5, p, 0) for p in range(50)]
    assert all(i == 0 and pr == 1.0 for i, pr in one)
    assert EK.select_light(np.zeros(0), np.zeros((0, 3)), 0.0, 0.0, 0.0, 1, 1, 1) == (-1, 0.0)


def test_non_finite_throughput_is_dropped():
    scene = shadow_locality_scene()
    hot = Material(kind="emissive", emission=(1e8, 1e8, 1e8))
    light = scene.objects[2]
    objs = scene.objects[:2] + [Object("light", [Mesh(light.meshes[0].vertices, light.meshes[0].triangles, hot)])]
    scene = Scene(objs, scene.instances, scene.camera, scene.environment)
    cfg = RenderConfig(width=24, height=16, spp=1, max_bounce=2)
    res = render_inproc(scene, partition(scene, 2, "object-naive"), cfg)
    assert res.stats.dropped_nonfinite > 0
    assert np.all(np.isfinite(res.image)) and np.all(res.image >= 0)


def test_config_validation():
    with pytest.raises(ValueError):
        RenderConfig(width=0)
    with pytest.raises(ValueError):
        RenderConfig(spp=0)
    with pytest.raises(ValueError):
        RenderConfig(width=1 << 15, height=1 << 14)
    assert not RenderConfig(mask="replay").culling


def test_plan_rank_mismatch(island):
    from proxytrace.engine import render_rank
    from proxytrace.transport import run_ranks
    plan = partition(island, 2, "best")
    with pytest.raises(ValueError, match="plan is for 2"):
        run_ranks(3, lambda g: render_rank(g, island, plan, SMALL))


def test_tone_map():
    acc = np.array([[[0.0, 2.0, 8.0]]], np.float32)
    assert tone_map(acc, 2).tolist() == [[[0, 255, 255]]]
    assert tone_map(np.full((1, 1, 3), 0.5), 1)[0, 0, 0] == round(255 * 0.5 ** (1 / 2.2))
    assert (PIXEL_MASK + 1) == 1 << 28
