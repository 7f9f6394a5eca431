import threading
from collections import Counter

import numpy as np
import pytest

from proxytrace.transport import (OP_TILES, HeadNode, ProtocolError, RayBatch, SocketGroup, TransportError,
                                  WireFormat, encode, free_ports, parse_address, run_ranks, tile_rows)
from proxytrace.transport.wire import PIXEL_MASK


def run_socket(size, fn, digests=None, wire=WireFormat(8), timeout=20.0):
    """Run ``fn(group)`` for ``size`` socket ranks on localhost threads."""
    addrs = [("127.0.0.1", p) for p in free_ports(size)]
    results, errors = [None] * size, [None] * size

    def body(r):
        g = None
        try:
            g = SocketGroup(r, addrs, wire, digest=(digests or [b"d"] * size)[r], timeout=timeout)
            results[r] = fn(g)
        except BaseException as e:  # noqa: BLE001
            errors[r] = e
        finally:
            if g is not None:
                g.close()

    threads = [threading.Thread(target=body, args=(r,)) for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout + 10)
    return results, errors


BACKENDS = ["inproc", "socket"]


def run(backend, size, fn, **kw):
    if backend == "inproc":
        return run_ranks(size, fn, **kw)
    results, errors = run_socket(size, fn, **kw)
    bad = [e for e in errors if e is not None]
    if bad:
        raise bad[0]
    return results


def random_batch(rng, n, src, fmt):
    top = (1 << fmt.mask_bits) - 1 if fmt.mask_bits == 8 else (1 << 62)
    b = RayBatch(rng.normal(size=(n, 3)) * 10, rng.normal(size=(n, 3)), rng.uniform(0, 1, (n, 3)),
                 rng.uniform(0, 100, n), rng.integers(0, PIXEL_MASK, n) | (rng.integers(0, 8, n) << 28),
                 rng.integers(0, top, n), rng.integers(0, top, n), np.full(n, src))
    return b.quantize()


@pytest.mark.parametrize("backend", BACKENDS)
def test_counts_examples(backend):
    def body(g):
        zeros = g.exchange_counts([0, 0])
        g.exchange_rays([RayBatch.empty(), RayBatch.empty()])
        mat = g.exchange_counts([[0, 5], [3, 0]][g.rank])
        return zeros, mat

    for zeros, mat in run(backend, 2, body):
        assert not zeros.any()
        assert mat.tolist() == [[0, 5], [3, 0]]


@pytest.mark.parametrize("backend", BACKENDS)
def test_counts_random_matrix(backend):
    rows = np.random.default_rng(3).integers(0, 100, (4, 4))
    out = run(backend, 4, lambda g: g.exchange_counts(rows[g.rank]))
    for m in out:
        assert np.array_equal(m, rows)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("fmt", [WireFormat(8), WireFormat(64), WireFormat(8, True)], ids=["b8", "b64", "replay"])
@pytest.mark.parametrize("seed", range(3))
def test_conservation(backend, fmt, seed):
    size = 4
    rng = np.random.default_rng(seed)
    sent = [[random_batch(rng, int(rng.integers(0, 30)), s, fmt) for _ in range(size)] for s in range(size)]

    def body(g):
        buckets = sent[g.rank]
        mat = g.exchange_counts([len(b) for b in buckets])
        got = g.exchange_rays(buckets)
        return mat, got, g.stats

    out = run(backend, size, body, wire=fmt)
    for dst, (mat, got, stats) in enumerate(out):
        expect = RayBatch.concat([sent[s][dst] for s in range(size)])  # ascending source order
        assert got.same_as(expect, with_visited=not fmt.replay, with_origin=fmt.replay)
        assert stats.records_to.sum() == mat[dst].sum() - mat[dst, dst]
        assert stats.bytes_rays == stats.records_to.sum() * fmt.record_size
    # global multiset of wire records
    all_sent = Counter(encode(b, fmt)[i:i + fmt.record_size] for row in sent for b in row
                       for i in range(0, len(b) * fmt.record_size, fmt.record_size))
    all_got = Counter(encode(got, fmt)[i:i + fmt.record_size] for _, got, _ in out
                      for i in range(0, len(got) * fmt.record_size, fmt.record_size))
    assert all_sent == all_got


@pytest.mark.parametrize("backend", BACKENDS)
def test_ring(backend):
    size = 5

    def body(g):
        rng = np.random.default_rng(g.rank)
        buckets = [RayBatch.empty() for _ in range(size)]
        b = random_batch(rng, 1, g.rank, g.wire)
        b.flags[:] = g.rank  # source tag in the pixel id
        buckets[(g.rank + 1) % size] = b
        g.exchange_counts([len(b) for b in buckets])
        return g.exchange_rays(buckets)

    for r, got in enumerate(run(backend, size, body)):
        assert len(got) == 1 and got.pixel[0] == (r - 1) % size


def test_empty_exchange():
    def body(g):
        g.exchange_counts([0, 0, 0])
        return g.exchange_rays([RayBatch.empty()] * 3)
    assert all(len(b) == 0 for b in run_ranks(3, body))


@pytest.mark.parametrize("backend", BACKENDS)
def test_tiles(backend):
    size, h, w = 4, 13, 5
    rng = np.random.default_rng(0)
    frames = rng.uniform(0, 1, (size, h, w, 3)).astype(np.float32)
    tiles = run(backend, size, lambda g: g.exchange_frame_tiles(frames[g.rank]))
    oracle = frames[0].copy()
    for f in frames[1:]:
        oracle = oracle + f
    assert np.array_equal(np.concatenate(tiles), oracle)
    assert [t.shape[0] for t in tiles] == [tile_rows(h, size, r)[1] - tile_rows(h, size, r)[0] for r in range(4)]


def test_tiles_examples():
    one = np.random.default_rng(1).uniform(size=(4, 4, 3)).astype(np.float32)
    assert np.array_equal(run_ranks(1, lambda g: g.exchange_frame_tiles(one))[0], one)
    frames = [np.tile(np.float32([1, 0, 0]), (6, 2, 1)), np.tile(np.float32([0, 1, 0]), (6, 2, 1))]
    for t in run_ranks(2, lambda g: g.exchange_frame_tiles(frames[g.rank])):
        assert t.shape == (3, 2, 3) and np.all(t == [1, 1, 0])


@pytest.mark.parametrize("backend", BACKENDS)
def test_tile_dimension_mismatch(backend):
    def body(g):
        return g.exchange_frame_tiles(np.zeros((4 + g.rank, 4, 3)))
    with pytest.raises(ProtocolError, match="frame"):
        run(backend, 2, body)


@pytest.mark.parametrize("backend", BACKENDS)
def test_lockstep_violation(backend):
    def body(g):
        if g.rank == 0:
            g.exchange_counts([0, 0])
        else:
            g.exchange_frame_tiles(np.zeros((2, 2, 3)))
    with pytest.raises(ProtocolError, match="lockstep|expected"):
        run(backend, 2, body)


def test_bucket_size_mismatch():
    def body(g):
        g.exchange_counts([0, 1])
        g.exchange_rays([RayBatch.empty(), RayBatch.empty()])
    with pytest.raises(ProtocolError, match="bucket sizes"):
        run_ranks(2, body, timeout=5)
    with pytest.raises(ProtocolError, match="preceding"):
        run_ranks(1, lambda g: g.exchange_rays([RayBatch.empty()]))


def test_digest_check():
    def body(g):
        g.check_digest(b"same" if g.rank < 2 else b"other")
    with pytest.raises(ProtocolError, match="digest"):
        run_ranks(3, body)
    _, errors = run_socket(2, lambda g: None, digests=[b"aaaa", b"bbbb"], timeout=5)
    assert any(isinstance(e, ProtocolError) for e in errors)


def test_gather_broadcast_allreduce():
    def body(g):
        got = g.gather(bytes([g.rank]), root=1)
        b = g.broadcast(OP_TILES, b"hello" if g.rank == 0 else None)
        s = g.allreduce_sum([g.rank, 1.0])
        return got, b, s
    out = run_ranks(3, body)
    assert out[1][0] == [b"\0", b"\1", b"\2"] and out[0][0] is None
    assert all(o[1] == b"hello" for o in out)
    assert all(o[2].tolist() == [3.0, 3.0] for o in out)


def test_head_node_collects():
    size = 2
    addrs = [("127.0.0.1", p) for p in free_ports(size + 1)]
    head = HeadNode(addrs[-1], size, b"x", timeout=10)
    errors = []

    def body(r):
        try:
            g = SocketGroup(r, addrs[:size], digest=b"x", timeout=10, head=addrs[-1])
            g.send_to_head(OP_TILES, bytes([r]) * 3)
            g.close()
        except BaseException as e:  # noqa: BLE001
            errors.append(e)

    threads = [threading.Thread(target=body, args=(r,)) for r in range(size)]
    for t in threads:
        t.start()
    head.accept_all()
    got = head.collect(OP_TILES)
    for t in threads:
        t.join()
    head.close()
    assert not errors and got == [b"\0\0\0", b"\1\1\1"]


def test_timeout_and_addresses():
    with pytest.raises(ValueError):
        parse_address("nohost")
    assert parse_address("localhost:80") == ("localhost", 80)
    with pytest.raises(TransportError):
        # the lone peer never shows up
        port = free_ports(2)
        SocketGroup(1, [("127.0.0.1", port[0]), ("127.0.0.1", port[1])], timeout=0.5)

    def body(g):
        if g.rank == 0:
            raise RuntimeError("rank died")
        g.exchange_counts([0, 0])
    with pytest.raises(RuntimeError, match="rank died"):
        run_ranks(2, body, timeout=5)
