import math
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from proxytrace.transport.wire import (OCCLUDED, PathRecord, RayBatch, WireError, WireFormat, batch_to_records,
                                       decode, decode_records, encode, encode_records, records_to_batch, to_half)

DATA = Path(__file__).parent / "data"
GOLDEN = {"bitmask8": WireFormat(8), "bitmask64": WireFormat(64), "replay8": WireFormat(8, True),
          "replay64": WireFormat(64, True)}


def fixture_records():
    return [
        PathRecord((0.0, 1.5, -2.25), (0.0, 0.0, 1.0), (1.0, 1.0, 1.0), math.inf, 0, visited=1, origin_rank=0),
        PathRecord((1e-3, -7.0, 3.0e4), (0.6, -0.8, 0.0), (0.25, 0.5, 0.125), 12.5, 4095, shadow=True,
                   visited=0b101, hit_owners=0b100, origin_rank=2),
        PathRecord((-0.0, 2.0, 3.0), (-0.0, 0.70703125, -0.70703125), (0.9, 0.1, 3e-5), OCCLUDED, (1 << 28) - 1,
                   shadow=True, in_medium=True, complete=True, visited=0xFF, hit_owners=0x80, origin_rank=7),
        PathRecord((3.25, 3.25, 3.25), (0.57735, 0.57735, 0.57735), (0.0, 0.0, 0.0), 0.001, 123456, complete=True,
                   visited=0b10, hit_owners=0, origin_rank=1),
    ]


def flush(x):
    # round-to-nearest-even first, then zero anything below the smallest normal half
    h = struct.unpack("<e", struct.pack("<e", x))[0]
    return math.copysign(0.0, h) if abs(h) < 2.0 ** -14 else h


def struct_encode(rec: PathRecord, bits: int, replay: bool) -> bytes:
    """Second encoder, written against the documented byte layout with ``struct``."""
    out = struct.pack("<3f", *rec.origin)
    out += struct.pack("<3e", *map(flush, rec.direction)) + struct.pack("<3e", *map(flush, rec.throughput))
    out += struct.pack("<f", rec.tmax)
    out += struct.pack("<I", rec.pixel | rec.shadow << 28 | rec.in_medium << 29 | rec.complete << 30)
    m = "<B" if bits == 8 else "<Q"
    if replay:
        out += struct.pack("<B", rec.origin_rank) + struct.pack(m, rec.hit_owners)
    elif bits == 8:
        out += struct.pack("<BB", rec.visited, rec.hit_owners)
    else:
        out += struct.pack("<QQ", rec.visited, rec.hit_owners)
    size = {(8, False): 36, (64, False): 48, (8, True): 36, (64, True): 44}[bits, replay]
    return out + b"\0" * (size - len(out))


def test_record_sizes():
    assert WireFormat(8).record_size == 36
    assert WireFormat(64).record_size == 48
    assert WireFormat(8, True).record_size == 36
    assert WireFormat(64, True).record_size == 44
    assert WireFormat.named("replay", 8) == WireFormat(8, True)
    assert WireFormat.named("replay", 9) == WireFormat(64, True)
    with pytest.raises(WireError):
        WireFormat.named("bitmask8", 9)
    with pytest.raises(WireError):
        WireFormat(16)


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_bytes(name):
    fmt = GOLDEN[name]
    recs = fixture_records()
    got = encode_records(recs, fmt)
    assert got == (DATA / f"paths_{name}.bin").read_bytes()
    assert got == b"".join(struct_encode(r, fmt.mask_bits, fmt.replay) for r in recs)


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_round_trip(name):
    fmt = GOLDEN[name]
    buf = (DATA / f"paths_{name}.bin").read_bytes()
    back = decode_records(buf, fmt)
    assert encode_records(back, fmt) == buf
    for a, b in zip(back, fixture_records()):
        assert a.pixel == b.pixel and a.shadow == b.shadow and a.complete == b.complete
        assert a.in_medium == b.in_medium and a.hit_owners == b.hit_owners
        if fmt.replay:
            assert a.origin_rank == b.origin_rank
        else:
            assert a.visited == b.visited


def test_half_rounding():
    assert to_half(1.0 + 2 ** -11)[()] == 1.0  # tie rounds to even
    assert to_half(1.0 + 3 * 2 ** -11)[()] == 1.0 + 2 ** -9
    h = to_half([3e-5, -3e-5, -0.0, 7e-5])
    assert h[0] == 0 and not np.signbit(h[0])
    assert h[1] == 0 and np.signbit(h[1])
    assert np.signbit(h[2])
    assert h[3] == np.float16(7e-5)


def test_errors():
    fmt = WireFormat(8)
    with pytest.raises(WireError):
        encode_records([PathRecord((0, 0, 0), (1, 0, 0), (1, 1, 1), 1.0, 0, visited=256)], fmt)
    with pytest.raises(WireError):
        encode_records([PathRecord((0, 0, 0), (1, 0, 0), (1, 1, 1), 1.0, 1 << 28)], fmt)
    with pytest.raises(WireError):
        encode_records([PathRecord((0, 0, 0), (1, 0, 0), (1, 1, 1), 1.0, 0)], WireFormat(8, True))
    with pytest.raises(WireError):
        decode(b"\0" * 37, fmt)
    assert len(decode(b"", fmt)) == 0


finite = st.floats(-1e4, 1e4, allow_nan=False, width=32)
unit = st.floats(-1, 1, allow_nan=False)


@st.composite
def batches(draw, bits):
    n = draw(st.integers(0, 12))
    top = (1 << bits) - 1
    recs = [PathRecord(tuple(draw(finite) for _ in range(3)), tuple(draw(unit) for _ in range(3)),
                       tuple(draw(st.floats(0, 60000)) for _ in range(3)),
                       draw(st.one_of(finite, st.just(math.inf))), draw(st.integers(0, (1 << 28) - 1)),
                       draw(st.booleans()), draw(st.booleans()), draw(st.booleans()), draw(st.integers(0, top)),
                       draw(st.integers(0, top)), draw(st.integers(0, min(top, 255)))) for _ in range(n)]
    return records_to_batch(recs).quantize() if n else RayBatch.empty()


@pytest.mark.parametrize("fmt", list(GOLDEN.values()), ids=sorted(GOLDEN))
def test_round_trip_property(fmt):
    @given(batches(fmt.mask_bits))
    def check(b):
        out = decode(encode(b, fmt), fmt)
        assert out.same_as(b, with_visited=not fmt.replay, with_origin=fmt.replay)
        assert np.array_equal(np.signbit(out.dir), np.signbit(b.dir))
        assert encode(out, fmt) == encode(b, fmt)
        assert batch_to_records(out) == batch_to_records(decode(encode(out, fmt), fmt))
    check()
