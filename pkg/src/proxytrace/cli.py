"""Command-line entry points: render, head, partition, experiment, compare, generate.

Exit codes: 0 success, 1 configuration or domain error, 2 transport or
protocol error. Set PROXYTRACE_LOG (e.g. DEBUG, INFO) for log output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .engine import RenderConfig, render_inproc, render_rank, tone_map, write_accum, write_image
from .engine.image import read_accum
from .engine.render import InvariantViolation
from .metrics import FRAME_COLUMNS, FrameStats, tabulate_forwards, tabulate_max_part, write_csv
from .partition import (STRATEGIES, PartitionError, PartitionOptions, partition, proxies_to_json,
                        proxies_to_ply)
from .proxy import ProtocolViolation
from .reference import relative_error
from .scene import (ISLAND_VIEWS, SceneError, generate_box_room, generate_mini_island, generate_stress_island,
                    load_scene, save_scene)
from .transport import OP_GATHER, OP_TILES, HeadNode, SocketGroup, TransportError, tile_rows
from .transport.sockets import free_ports, parse_address
from .transport.wire import WireError

log = logging.getLogger("proxytrace")

EXIT_OK, EXIT_DOMAIN, EXIT_PROTOCOL = 0, 1, 2

GENERATORS = {
    "mini-island": generate_mini_island,
    "box-room": generate_box_room,
    "stress-island": generate_stress_island,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_DOMAIN)


def open_scene(spec: str):
    """A scene file path, or the name of a built-in generator."""
    if Path(spec).exists():
        return load_scene(spec)
    if spec in GENERATORS:
        return GENERATORS[spec]()
    raise SceneError(f"{spec}: no such file or built-in scene ({', '.join(GENERATORS)})")


def parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size expects WxH, got {text!r}") from None
    return w, h


def parse_strategies(text: str) -> list[str]:
    names = list(STRATEGIES) if text == "all" else text.split(",")
    for n in names:
        if n not in STRATEGIES:
            raise UsageError(f"unknown strategy {n!r}; expected 'all' or some of {', '.join(STRATEGIES)}")
    return names


# ----------------------------------------------------------------- rendering

def _config(args) -> RenderConfig:
    w, h = parse_size(args.size)
    return RenderConfig(width=w, height=h, spp=args.spp, max_bounce=args.bounces, seed=args.seed, mask=args.mask,
                        tmax_culling=not args.no_tmax_culling)


def _run_digest(scene, cfg: RenderConfig, args) -> bytes:
    """Handshake digest: scene content plus every flag that shapes the frame."""
    h = hashlib.sha256(scene.digest())
    h.update(json.dumps([asdict(cfg), args.strategy, args.replication_cap, args.ranks], sort_keys=True).encode())
    return h.digest()


def _write_outputs(args, scene, image: np.ndarray, stats: FrameStats, cfg: RenderConfig):
    if args.out:
        write_image(args.out, tone_map(image, cfg.spp))
    if args.dump_accum:
        write_accum(args.dump_accum, image, cfg.spp)
    if args.stats:
        row = stats.row(scene=scene.name, strategy=args.strategy, ranks=args.ranks, mask=cfg.mask, spp=cfg.spp,
                        bounces=cfg.max_bounce, width=cfg.width, height=cfg.height)
        write_csv([row], args.stats, FRAME_COLUMNS)
    if args.stats_json:
        Path(args.stats_json).write_text(stats.to_json())
    log.info("forwards %d, max rounds %d, revisits %d", stats.forwards_total, stats.max_rounds, stats.revisits)


def _plan(scene, args):
    return partition(scene, args.ranks, args.strategy, options=PartitionOptions(replication_cap=args.replication_cap))


def cmd_render(args) -> int:
    scene = open_scene(args.scene)
    cfg = _config(args)
    if args.backend == "inproc":
        res = render_inproc(scene, _plan(scene, args), cfg, timeout=args.timeout)
        _write_outputs(args, scene, res.image, res.stats, cfg)
        return EXIT_OK
    if args.rank_id is not None:
        return _socket_rank(args, scene, cfg)
    return _socket_launch(args, scene, cfg)


def _socket_rank(args, scene, cfg: RenderConfig) -> int:
    if not args.peers or not args.head:
        raise UsageError("--rank-id needs --peers and --head")
    peers = [parse_address(a) for a in args.peers.split(",")]
    if len(peers) != args.ranks:
        raise UsageError(f"--peers lists {len(peers)} addresses for --ranks {args.ranks}")
    group = SocketGroup(args.rank_id, peers, cfg.wire(args.ranks), _run_digest(scene, cfg, args), args.timeout,
                        head=parse_address(args.head))
    try:
        frame = render_rank(group, scene, _plan(scene, args), cfg)
        group.send_to_head(OP_TILES, frame.tile.astype("<f4").tobytes())
        group.send_to_head(OP_GATHER, frame.local_stats.to_json().encode())
    finally:
        group.close()
    return EXIT_OK


def run_head(head: HeadNode, cfg: RenderConfig, rank_count: int) -> tuple[np.ndarray, FrameStats]:
    """Assemble the final frame from per-rank tiles; the head renders nothing."""
    head.accept_all()
    tiles = head.collect(OP_TILES)
    stats = head.collect(OP_GATHER)
    img = np.zeros((cfg.height, cfg.width, 3), np.float32)
    for r, buf in enumerate(tiles):
        r0, r1 = tile_rows(cfg.height, rank_count, r)
        img[r0:r1] = np.frombuffer(buf, "<f4").reshape(r1 - r0, cfg.width, 3)
    return img, FrameStats.merge([FrameStats.from_json(b.decode()) for b in stats])


def _socket_launch(args, scene, cfg: RenderConfig) -> int:
    """Spawn one local process per rank and act as the head."""
    host = "127.0.0.1"
    ports = free_ports(args.ranks + 1, host)
    peers = ",".join(f"{host}:{p}" for p in ports[:-1])
    head_addr = (host, ports[-1])
    head = HeadNode(head_addr, args.ranks, _run_digest(scene, cfg, args), args.timeout)
    base = [sys.executable, "-m", "proxytrace.cli", "render", args.scene, "--backend", "socket",
            "--ranks", str(args.ranks), "--strategy", args.strategy, "--spp", str(args.spp),
            "--bounces", str(args.bounces), "--seed", str(args.seed), "--size", args.size, "--mask", args.mask,
            "--replication-cap", repr(args.replication_cap), "--timeout", repr(args.timeout),
            "--peers", peers, "--head", f"{host}:{ports[-1]}"]
    if args.no_tmax_culling:
        base.append("--no-tmax-culling")
    procs = [subprocess.Popen(base + ["--rank-id", str(r)]) for r in range(args.ranks)]
    try:
        image, stats = run_head(head, cfg, args.ranks)
    finally:
        head.close()
        codes = []
        for p in procs:
            try:
                codes.append(p.wait(timeout=args.timeout))
            except subprocess.TimeoutExpired:
                p.kill()
                codes.append(EXIT_PROTOCOL)
    if any(codes):
        log.error("rank exit codes %s", codes)
        return max(codes)
    _write_outputs(args, scene, image, stats, cfg)
    return EXIT_OK


def cmd_head(args) -> int:
    scene = open_scene(args.scene)
    cfg = _config(args)
    head = HeadNode(parse_address(args.listen), args.ranks, _run_digest(scene, cfg, args), args.timeout)
    try:
        image, stats = run_head(head, cfg, args.ranks)
    finally:
        head.close()
    _write_outputs(args, scene, image, stats, cfg)
    return EXIT_OK


# ------------------------------------------------------------ other commands

def cmd_partition(args) -> int:
    scene = open_scene(args.scene)
    plan = partition(scene, args.ranks, args.strategy,
                     options=PartitionOptions(replication_cap=args.replication_cap, proxy_mode=args.proxy_mode))
    doc = dict(plan.to_json(), proxies=proxies_to_json(plan.proxies))
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    if args.ply:
        Path(args.ply).write_text(proxies_to_ply(plan.proxies))
    return EXIT_OK


def _emit_rows(rows, out):
    if out:
        write_csv(rows, out)
    else:
        write_csv(rows, sys.stdout)


def cmd_experiment(args) -> int:
    scene = open_scene(args.scene)
    strategies = parse_strategies(args.strategies)
    if args.which == "max-part":
        rows = tabulate_max_part(scene, strategies, args.nmax)
    else:
        views = ISLAND_VIEWS if args.views == "island" else {"camera": scene.camera}
        w, h = parse_size(args.size)
        cfg = RenderConfig(width=w, height=h, max_bounce=args.bounces, seed=args.seed)
        rows, _ = tabulate_forwards(scene, views, strategies, args.ranks, cfg)
    _emit_rows(rows, args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    a, spp_a = read_accum(args.a)
    b, spp_b = read_accum(args.b)
    if spp_a != spp_b:
        raise UsageError(f"sample counts differ: {spp_a} vs {spp_b}")
    err = relative_error(a, b)
    bad = int((err > args.tol).sum())
    print(f"max relative error {err.max():.3e}; {bad} of {err.size} pixels above {args.tol:g}")
    return EXIT_OK if bad == 0 else EXIT_DOMAIN


def cmd_generate(args) -> int:
    scene = GENERATORS[args.kind]()
    save_scene(scene, args.out, obj_dir=args.obj_dir)
    return EXIT_OK


# -------------------------------------------------------------------- parser

def _render_flags(p, rank_flags: bool = True):
    p.add_argument("scene", help="scene JSON path or built-in name (mini-island, box-room, stress-island)")
    p.add_argument("--ranks", type=int, default=1)
    p.add_argument("--strategy", choices=STRATEGIES, default="best")
    p.add_argument("--spp", type=int, default=1)
    p.add_argument("--bounces", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="128x128", help="WxH")
    p.add_argument("--mask", choices=("bitmask8", "bitmask64", "replay"), default="bitmask8")
    p.add_argument("--replication-cap", type=float, default=0.05)
    p.add_argument("--no-tmax-culling", action="store_true")
    p.add_argument("--timeout", type=float, default=600.0, help="seconds before a stalled exchange aborts")
    p.add_argument("--out", help="tone-mapped image (.png or .ppm)")
    p.add_argument("--stats", help="per-frame statistics CSV")
    p.add_argument("--stats-json", help="full per-frame statistics as JSON")
    p.add_argument("--dump-accum", help="raw float accumulation buffer for compare")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="proxytrace", description="Distributed path tracing with proxy-based ray forwarding.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("render", help="render a frame")
    _render_flags(p)
    p.add_argument("--backend", choices=("inproc", "socket"), default="inproc")
    p.add_argument("--rank-id", type=int, help="socket mode: run only this rank")
    p.add_argument("--peers", help="socket mode: host:port of every rank, in rank order")
    p.add_argument("--head", help="socket mode: host:port of the head node")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("head", help="socket mode: collect and assemble the frame from --ranks ranks")
    _render_flags(p)
    p.add_argument("--listen", required=True, help="host:port to accept rank connections on")
    p.set_defaults(fn=cmd_head)

    p = sub.add_parser("partition", help="partition a scene and dump the plan")
    p.add_argument("scene")
    p.add_argument("--ranks", type=int, default=2)
    p.add_argument("--strategy", choices=STRATEGIES, default="best")
    p.add_argument("--replication-cap", type=float, default=0.05)
    p.add_argument("--proxy-mode", choices=("domain-boxes", "item-boxes", "braided"))
    p.add_argument("--out", help="plan JSON (default: stdout)")
    p.add_argument("--ply", help="proxy boxes as PLY")
    p.set_defaults(fn=cmd_partition)

    p = sub.add_parser("experiment", help="tabulate an experiment as CSV")
    p.add_argument("which", choices=("max-part", "forwards"))
    p.add_argument("--scene", default="stress-island")
    p.add_argument("--strategies", default="all")
    p.add_argument("--nmax", type=int, default=32)
    p.add_argument("--ranks", type=int, default=4)
    p.add_argument("--views", choices=("island", "scene"), default="island")
    p.add_argument("--size", default="128x128")
    p.add_argument("--bounces", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("compare", help="compare two accumulation dumps")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("generate", help="write a built-in scene as JSON")
    p.add_argument("kind", choices=sorted(GENERATORS))
    p.add_argument("out")
    p.add_argument("--obj-dir", help="store meshes as OBJ files in this directory (relative to the JSON)")
    p.set_defaults(fn=cmd_generate)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("PROXYTRACE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return e.code if isinstance(e.code, int) else EXIT_DOMAIN
    try:
        return args.fn(args)
    except (TransportError, ProtocolViolation, InvariantViolation, ConnectionError, TimeoutError) as e:
        print(f"proxytrace: protocol error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (UsageError, SceneError, PartitionError, WireError, ValueError, OSError) as e:
        print(f"proxytrace: error: {e}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
