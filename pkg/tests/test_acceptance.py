"""The ten acceptance criteria, each reported as one PASS/FAIL line."""

import threading
from collections import Counter

import numpy as np
import pytest

from helpers import report, shadow_locality_scene
from proxytrace.accel.aabb import Aabb
from proxytrace.engine import RankRenderer, RenderConfig, make_primaries, render_inproc
from proxytrace.engine.kernels import FLAG_SHADOW
from proxytrace.metrics import tabulate_forwards
from proxytrace.partition import OBJECT, STRATEGIES, PartitionOptions, max_part_size_curve, partition
from proxytrace.proxy import ProxyBvh, ProxySet, from_i64, mask_of, ranks_of, select_next_rank, select_proxy
from proxytrace.reference import forward_oracle, relative_error, render_reference
from proxytrace.scene import ISLAND_VIEWS, Camera, Instance, Material, Mesh, Object, Scene
from proxytrace.transport import RayBatch, SocketGroup, WireFormat, encode, free_ports, run_ranks
from proxytrace.transport.wire import PIXEL_MASK

pytestmark = pytest.mark.slow

RANKS = (1, 2, 4, 8)
MASKS = ("bitmask8", "bitmask64", "replay")
ORACLE_CFG = RenderConfig(width=128, height=128, spp=4, max_bounce=4, seed=0)


@pytest.fixture(scope="module")
def grid(island, island_geo, box_room, box_geo):
    """Every scene x strategy x rank count x mask run of criterion 1."""
    from dataclasses import replace

    runs = []
    for name, scene, geo in (("mini-island", island, island_geo), ("box-room", box_room, box_geo)):
        ref = render_reference(scene, cfg=ORACLE_CFG, geo=geo)
        for strategy in STRATEGIES:
            for n in RANKS:
                plan = partition(scene, n, strategy)
                for mask in MASKS:
                    res = render_inproc(scene, plan, replace(ORACLE_CFG, mask=mask), geo=geo)
                    err = float(relative_error(res.image, ref).max())
                    runs.append(dict(scene=name, strategy=strategy, ranks=n, mask=mask, err=err,
                                     revisits=res.stats.revisits, rounds=res.stats.max_rounds,
                                     misses=res.stats.retrace_misses))
    return runs


def test_c1_oracle_image_equivalence(grid):
    worst = max(grid, key=lambda r: r["err"])
    bad = [r for r in grid if not r["err"] <= 1e-4]
    ok = report(1, "oracle image equivalence", not bad,
                f"{len(grid)} configurations, worst relative error {worst['err']:.2e} "
                f"({worst['scene']}/{worst['strategy']}/{worst['ranks']}/{worst['mask']}), {len(bad)} over 1e-4, "
                f"{sum(r['misses'] for r in grid)} re-trace misses")
    assert ok


def test_c2_forwarding_oracle():
    rng = np.random.default_rng(2024)
    mismatches = 0
    cases = 0
    for _ in range(500):
        n = int(rng.integers(1, 33))
        c = rng.uniform(-5, 5, (n, 3))
        h = rng.uniform(0.1, 2.5, (n, 3))
        owners = [mask_of(rng.choice(8, size=int(rng.integers(1, 4)), replace=False)) for _ in range(n)]
        ps = ProxySet(c - h, c + h, owners)
        bvh = ProxyBvh(ps)
        plist = [(ps.lo[i], ps.hi[i], from_i64(ps.owners[i])) for i in range(n)]
        for _ in range(10):
            o = rng.uniform(-8, 8, 3)
            d = rng.normal(size=3)
            if rng.random() < 0.15:
                d[rng.integers(3)] = 0.0
            if not d.any():
                d[0] = 1.0
            visited = int(rng.integers(0, 256))
            tmax = float(rng.choice([np.inf, rng.uniform(0, 12)]))
            pick = int(rng.integers(0, 2**32))
            for culling in (True, False):
                cases += 1
                got = select_next_rank(o, d, visited, bvh, culling, pick, 0.0, tmax)
                mismatches += got != forward_oracle(o, d, visited, plist, culling, pick, 0.0, tmax)
    ok = report(2, "forwarding operator vs linear scan", mismatches == 0 and cases == 10000,
                f"{cases} cases, {mismatches} mismatches")
    assert ok


def test_c3_no_revisit_and_round_bound(grid):
    revisits = sum(r["revisits"] for r in grid)
    over = [r for r in grid if r["rounds"] > r["ranks"]]
    ok = report(3, "no revisits, rounds <= rank count", revisits == 0 and not over,
                f"{revisits} revisits, max rounds/ranks "
                f"{max(r['rounds'] / r['ranks'] for r in grid):.2f} over {len(grid)} runs")
    assert ok


def test_c4_replay_equivalence(island, island_geo):
    from dataclasses import replace

    cfg = RenderConfig(width=128, height=128, spp=1, max_bounce=4, tmax_culling=False, log_arrivals=True)
    total, bad = 0, []
    for strategy in ("spatial-simple", "object-proxies", "best"):
        for n in (4, 8):
            plan = partition(island, n, strategy)
            logs = {}
            for mask in ("bitmask8", "replay"):
                res = render_inproc(island, plan, replace(cfg, mask=mask), geo=island_geo)
                a = np.concatenate([x for f in res.frames for x in f.arrivals])
                logs[mask] = a[np.lexsort(a.T[::-1])]
            total += len(logs["replay"])
            if not np.array_equal(logs["bitmask8"], logs["replay"]):
                bad.append((strategy, n))
    ok = report(4, "replay visited sets equal bitmask visited sets", not bad and total > 0,
                f"{total} forwarded-ray arrivals compared, mismatching runs {bad}")
    assert ok


def test_c5_forwarding_trend(stress):
    rows, cells = tabulate_forwards(stress, ISLAND_VIEWS, ["object-naive", "object-proxies", "best"], 4,
                                    RenderConfig(width=128, height=128, max_bounce=4))
    wins = sum(r["best"] < r["object-naive"] and r["object-proxies"] < r["object-naive"] for r in rows)
    consistent = all(st.forwards_total == st.matrix_forwards for st in cells.values())
    table = "; ".join(f"{r['view']} naive {r['object-naive']} proxies {r['object-proxies']} best {r['best']}"
                      for r in rows)
    ok = report(5, "forwards: best and object-proxies below object-naive", wins >= 2 and consistent,
                f"{wins}/3 views ({table})")
    assert ok


def test_c6_max_part_trend(stress):
    curves = {s: [v for _, v in max_part_size_curve(stress, s, n_max=16)] for s in STRATEGIES}
    monotone = {s: all(b <= a for a, b in zip(curves[s], curves[s][1:])) for s in OBJECT if s != "best"}
    spatial16 = curves["spatial-simple"][15]
    obj4 = curves["object-naive"][3]
    ok = report(6, "max-part curves", all(monotone.values()) and obj4 <= spatial16,
                f"object modes monotone {monotone}; object(N=4) {obj4:.0f} vs spatial-simple(N=16) "
                f"{spatial16:.0f}")
    assert ok


def test_c7_wire_format():
    from pathlib import Path

    from test_wire import GOLDEN, fixture_records
    from proxytrace.transport.wire import decode_records, encode_records

    data = Path(__file__).parent / "data"
    golden = all(encode_records(fixture_records(), f) == (data / f"paths_{n}.bin").read_bytes()
                 for n, f in GOLDEN.items())
    ident = all(encode_records(decode_records(encode_records(fixture_records(), f), f), f)
                == encode_records(fixture_records(), f) for f in GOLDEN.values())
    size = WireFormat(8).record_size
    ok = report(7, "wire format", golden and ident and size == 36,
                f"golden match {golden}, decode/encode identity {ident}, 8-rank record {size} bytes")
    assert ok


def _fuzz_body(rounds, fmt, seed, sent_log, got_log):
    def body(g):
        rng = np.random.default_rng(seed * 100 + g.rank)
        for _ in range(rounds):
            buckets = []
            for _dst in range(g.size):
                k = int(rng.integers(0, 6))
                b = RayBatch(rng.normal(size=(k, 3)), rng.normal(size=(k, 3)), rng.uniform(0, 2, (k, 3)),
                             rng.uniform(0, 50, k), rng.integers(0, PIXEL_MASK, k),
                             rng.integers(0, 256, k), rng.integers(0, 256, k), np.full(k, g.rank)).quantize()
                buckets.append(b)
            g.exchange_counts([len(b) for b in buckets])
            got = g.exchange_rays(buckets)
            sent_log[g.rank].append(b"".join(encode(b, fmt) for b in buckets))
            got_log[g.rank].append(encode(got, fmt))
        frame = rng.uniform(0, 1, (9, 7, 3)).astype(np.float32)
        tile = g.exchange_frame_tiles(frame)
        return frame, tile
    return body


def _records(blobs, size):
    return Counter(b[i:i + size] for b in blobs for i in range(0, len(b), size))


def test_c8_transport_conservation():
    size, rounds, fmt = 4, 1000, WireFormat(8)
    verdicts = []
    for backend in ("inproc", "socket"):
        sent_log = [[] for _ in range(size)]
        got_log = [[] for _ in range(size)]
        body = _fuzz_body(rounds, fmt, 1 if backend == "inproc" else 2, sent_log, got_log)
        if backend == "inproc":
            out = run_ranks(size, body, fmt)
        else:
            addrs = [("127.0.0.1", p) for p in free_ports(size)]
            out, errs = [None] * size, []

            def run(r):
                try:
                    g = SocketGroup(r, addrs, fmt, b"fuzz", 60.0)
                    try:
                        out[r] = body(g)
                    finally:
                        g.close()
                except BaseException as e:  # noqa: BLE001
                    errs.append(e)
            threads = [threading.Thread(target=run, args=(r,)) for r in range(size)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert not errs, errs
        conserved = _records([b for log in sent_log for b in log], 36) == _records(
            [b for log in got_log for b in log], 36)
        oracle = out[0][0].copy()
        for f, _ in out[1:]:
            oracle = oracle + f
        assembled = np.array_equal(np.concatenate([t for _, t in out]), oracle)
        verdicts.append((backend, conserved, assembled))
    ok = report(8, "transport conservation and compositing", all(c and a for _, c, a in verdicts),
                ", ".join(f"{b}: multiset {'equal' if c else 'DIFFERS'}, tiles {'exact' if a else 'DIFFER'}"
                          for b, c, a in verdicts) + f" ({rounds} rounds x {size} ranks)")
    assert ok


def test_c9_shadow_locality():
    scene = shadow_locality_scene()
    cfg = RenderConfig(width=64, height=48, spp=2, max_bounce=2, log_arrivals=True)
    details, ok = [], True
    for strategy in ("object-naive", "object-proxies", "best"):
        plan = partition(scene, 2, strategy)
        ground_rank = next(r for r in range(2) if plan.owners[0] >> r & 1)
        res = render_inproc(scene, plan, cfg)
        a = np.concatenate([x for f in res.frames for x in f.arrivals])
        away = int((((a[:, 2] & FLAG_SHADOW) != 0) & (a[:, 3] != ground_rank)).sum())
        ok &= away == 0
        details.append(f"{strategy} {away}")
    ok = report(9, "shadow rays stay with a co-resident occluder", ok,
                "shadow forwards off the ground rank: " + ", ".join(details))
    assert ok


def bar_scene():
    rng = np.random.default_rng(4)
    objs = []
    for cx in (-10.0, 10.0):
        for k in range(4):
            v = rng.uniform(-1, 1, (30, 3)) + [cx, 0, 0.5 * k]
            objs.append(Object(f"c{cx}_{k}", [Mesh(v, rng.integers(0, 30, (40, 3)), Material())]))
    bar_v = np.array([[-11, -1.0, 0.7], [11, -1.0, 0.7], [11, 1.0, 0.7]], float)
    objs.append(Object("bar", [Mesh(bar_v, np.array([[0, 1, 2]]), Material())]))
    cam = Camera((0.0, 0.0, 10.0), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 60.0)
    return Scene(objs, [Instance(i) for i in range(len(objs))], cam, (1.0, 1.0, 1.0))


def test_c10_primary_ownership(island, island_geo):
    cfg = RenderConfig(width=64, height=48)
    npix = cfg.width * cfg.height
    exact = True
    for strategy in STRATEGIES:
        plan = partition(island, 4, strategy)
        kept = np.concatenate([RankRenderer(r, 4, island, plan, cfg, island_geo).primaries(3).pixel
                               for r in range(4)])
        exact &= len(kept) == npix and len(np.unique(kept)) == npix

    scene = bar_scene()
    plan = partition(scene, 2, "best", options=PartitionOptions(replication_cap=0.2))
    shared = [k for k in range(len(plan.proxies)) if len(ranks_of(from_i64(plan.proxies.owners[k]))) > 1]
    org, dirs = make_primaries(scene.camera, cfg, 3)
    pb = ProxyBvh(plan.proxies)
    stack = np.empty(64, np.int64)
    sel = np.array([select_proxy(pb.PB, plan.proxies.lo, plan.proxies.hi, plan.proxies.owners, *org[p], *dirs[p],
                                 0.0, np.inf, True, np.int64(0), stack) for p in range(npix)])
    on_shared = set(np.flatnonzero(np.isin(sel, shared)).tolist())
    kept = [set(RankRenderer(r, 2, scene, plan, cfg).primaries(3).pixel.tolist()) for r in range(2)]
    split_ok = bool(on_shared) and not (kept[0] & kept[1]) and (kept[0] | kept[1]) == set(range(npix))
    for p in on_shared:
        owner = ranks_of(from_i64(plan.proxies.owners[sel[p]]))[p % 2]
        split_ok &= p in kept[owner]
    ok = report(10, "primary rays kept by exactly one rank", exact and split_ok,
                f"all strategies exact {exact}; {len(on_shared)} pixels on a replicated proxy split "
                f"{sum(p % 2 == 0 for p in on_shared)}/{sum(p % 2 for p in on_shared)} by pixel id")
    assert ok
