"""Path records: the in-memory ray batch and its bit-exact wire layout.

Layout (little-endian, packed)::

    origin      3 x f32     12
    direction   3 x f16      6
    throughput  3 x f16      6
    tmax        f32          4
    pixelFlags  u32          4   pixel id bits 0-27, shadow bit 28, inMedium bit 29,
                                 traversal-complete bit 30
    visited     u8 / u64         (originRank u8 in replay mode)
    hitOwners   u8 / u64
    padding                      to 36 / 48 bytes (44 for 64-bit replay)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PIXEL_BITS = 28
PIXEL_MASK = (1 << PIXEL_BITS) - 1
FLAG_SHADOW = 1 << 28
FLAG_MEDIUM = 1 << 29
FLAG_COMPLETE = 1 << 30
HALF_MIN_NORMAL = 2.0 ** -14
OCCLUDED = -1.0  # tmax sentinel of a blocked shadow ray

FORMATS = ("bitmask8", "bitmask64", "replay")


class WireError(ValueError):
    pass


def to_half(x) -> np.ndarray:
    """Round to float16 (nearest-even), flushing subnormal results to signed zero."""
    with np.errstate(over="ignore"):
        h = np.asarray(x, dtype=np.float64).astype(np.float16)
    sub = (np.abs(h) < HALF_MIN_NORMAL) & (h != 0)
    if np.any(sub):
        h = h.copy()
        h[sub] = np.copysign(np.float16(0), h[sub])
    return h


def quantize_half(x) -> np.ndarray:
    return to_half(x).astype(np.float64)


def quantize_f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclass(frozen=True)
class WireFormat:
    mask_bits: int  # 8 or 64
    replay: bool = False

    def __post_init__(self):
        if self.mask_bits not in (8, 64):
            raise WireError("mask width must be 8 or 64 bits")

    @classmethod
    def named(cls, name: str, rank_count: int = 1) -> WireFormat:
        if name == "bitmask8":
            fmt = cls(8)
        elif name == "bitmask64":
            fmt = cls(64)
        elif name == "replay":
            fmt = cls(8 if rank_count <= 8 else 64, True)
        else:
            raise WireError(f"unknown mask mode {name!r}")
        if rank_count > fmt.mask_bits:
            raise WireError(f"{rank_count} ranks do not fit a {fmt.mask_bits}-bit mask")
        return fmt

    @property
    def dtype(self) -> np.dtype:
        m = "u1" if self.mask_bits == 8 else "<u8"
        names = ["origin", "direction", "throughput", "tmax", "pixel_flags"]
        formats = [("<f4", 3), ("<f2", 3), ("<f2", 3), "<f4", "<u4"]
        offsets = [0, 12, 18, 24, 28]
        if self.replay:
            names += ["origin_rank", "hit_owners"]
            formats += ["u1", m]
            offsets += [32, 33]
            size = 36 if self.mask_bits == 8 else 44
        else:
            names += ["visited", "hit_owners"]
            formats += [m, m]
            offsets += [32, 33 if self.mask_bits == 8 else 40]
            size = 36 if self.mask_bits == 8 else 48
        return np.dtype({"names": names, "formats": formats, "offsets": offsets, "itemsize": size})

    @property
    def record_size(self) -> int:
        return self.dtype.itemsize


@dataclass(eq=False)
class RayBatch:
    """Struct-of-arrays ray set. Float fields hold values exactly representable
    in their wire precision; masks are int64 views of 64-bit masks."""

    org: np.ndarray
    dir: np.ndarray
    thr: np.ndarray
    tmax: np.ndarray
    flags: np.ndarray
    visited: np.ndarray
    hit: np.ndarray
    origin_rank: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.origin_rank is None:
            self.origin_rank = np.full(len(self.tmax), -1, np.int64)

    @classmethod
    def empty(cls, n: int = 0) -> RayBatch:
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n), np.zeros(n, np.int64),
                   np.zeros(n, np.int64), np.zeros(n, np.int64), np.full(n, -1, np.int64))

    def __len__(self) -> int:
        return len(self.tmax)

    def take(self, idx) -> RayBatch:
        return RayBatch(self.org[idx], self.dir[idx], self.thr[idx], self.tmax[idx], self.flags[idx],
                        self.visited[idx], self.hit[idx], self.origin_rank[idx])

    @staticmethod
    def concat(batches) -> RayBatch:
        batches = [b for b in batches if b is not None]
        if not batches:
            return RayBatch.empty()
        return RayBatch(*(np.concatenate([getattr(b, f) for b in batches])
                          for f in ("org", "dir", "thr", "tmax", "flags", "visited", "hit", "origin_rank")))

    @property
    def pixel(self) -> np.ndarray:
        return self.flags & PIXEL_MASK

    @property
    def is_shadow(self) -> np.ndarray:
        return (self.flags & FLAG_SHADOW) != 0

    def quantize(self) -> RayBatch:
        """Round float fields to wire precision in place."""
        self.org = quantize_f32(self.org)
        self.dir = quantize_half(self.dir)
        self.thr = quantize_half(self.thr)
        self.tmax = quantize_f32(self.tmax)
        return self

    def same_as(self, other: RayBatch, with_visited=True, with_origin=False) -> bool:
        fields = ["org", "dir", "thr", "tmax", "flags", "hit"]
        fields += ["visited"] if with_visited else []
        fields += ["origin_rank"] if with_origin else []
        return len(self) == len(other) and all(np.array_equal(getattr(self, f), getattr(other, f)) for f in fields)


def _check_mask(values: np.ndarray, bits: int, what: str):
    if bits == 64 or len(values) == 0:
        return
    if np.any((values < 0) | (values >= 1 << bits)):
        raise WireError(f"{what} does not fit in {bits} bits")


def encode(batch: RayBatch, fmt: WireFormat) -> bytes:
    rec = np.zeros(len(batch), dtype=fmt.dtype)
    rec["origin"] = batch.org.astype(np.float32)
    rec["direction"] = to_half(batch.dir)
    rec["throughput"] = to_half(batch.thr)
    rec["tmax"] = batch.tmax.astype(np.float32)
    if np.any((batch.flags < 0) | (batch.flags > 0xFFFFFFFF)):
        raise WireError("pixel/flags word out of range")
    rec["pixel_flags"] = batch.flags.astype(np.uint32)
    _check_mask(batch.hit, fmt.mask_bits, "hit mask")
    mask_t = np.uint8 if fmt.mask_bits == 8 else np.uint64
    rec["hit_owners"] = batch.hit.view(np.uint64).astype(mask_t)
    if fmt.replay:
        if np.any((batch.origin_rank < 0) | (batch.origin_rank > 255)):
            raise WireError("origin rank missing or out of range")
        rec["origin_rank"] = batch.origin_rank.astype(np.uint8)
    else:
        _check_mask(batch.visited, fmt.mask_bits, "visited mask")
        rec["visited"] = batch.visited.view(np.uint64).astype(mask_t)
    return rec.tobytes()


def decode(buf: bytes, fmt: WireFormat) -> RayBatch:
    size = fmt.record_size
    if len(buf) % size:
        raise WireError(f"payload of {len(buf)} bytes is not a multiple of the {size}-byte record")
    rec = np.frombuffer(buf, dtype=fmt.dtype)
    n = len(rec)
    out = RayBatch(
        rec["origin"].astype(np.float64),
        rec["direction"].astype(np.float64),
        rec["throughput"].astype(np.float64),
        rec["tmax"].astype(np.float64),
        rec["pixel_flags"].astype(np.int64),
        np.zeros(n, np.int64),
        rec["hit_owners"].astype(np.uint64).view(np.int64),
        np.full(n, -1, np.int64),
    )
    if fmt.replay:
        out.origin_rank = rec["origin_rank"].astype(np.int64)
    else:
        out.visited = rec["visited"].astype(np.uint64).view(np.int64)
    return out


@dataclass
class PathRecord:
    """One ray in plain Python form; convenient for tests and golden files."""

    origin: tuple
    direction: tuple
    throughput: tuple
    tmax: float
    pixel: int
    shadow: bool = False
    in_medium: bool = False
    complete: bool = False
    visited: int = 0
    hit_owners: int = 0
    origin_rank: int = -1

    @property
    def flags(self) -> int:
        if not 0 <= self.pixel <= PIXEL_MASK:
            raise WireError(f"pixel id {self.pixel} does not fit in {PIXEL_BITS} bits")
        return (self.pixel | FLAG_SHADOW * self.shadow | FLAG_MEDIUM * self.in_medium
                | FLAG_COMPLETE * self.complete)


def records_to_batch(records) -> RayBatch:
    def mask(v):
        v &= (1 << 64) - 1
        return v - (1 << 64) if v >> 63 else v
    return RayBatch(
        np.array([r.origin for r in records], float).reshape(-1, 3),
        np.array([r.direction for r in records], float).reshape(-1, 3),
        np.array([r.throughput for r in records], float).reshape(-1, 3),
        np.array([r.tmax for r in records], float),
        np.array([r.flags for r in records], np.int64),
        np.array([mask(r.visited) for r in records], np.int64),
        np.array([mask(r.hit_owners) for r in records], np.int64),
        np.array([r.origin_rank for r in records], np.int64),
    )


def batch_to_records(batch: RayBatch) -> list[PathRecord]:
    out = []
    for i in range(len(batch)):
        f = int(batch.flags[i])
        out.append(PathRecord(tuple(batch.org[i].tolist()), tuple(batch.dir[i].tolist()),
                              tuple(batch.thr[i].tolist()), float(batch.tmax[i]), f & PIXEL_MASK,
                              bool(f & FLAG_SHADOW), bool(f & FLAG_MEDIUM), bool(f & FLAG_COMPLETE),
                              int(batch.visited[i]) & ((1 << 64) - 1), int(batch.hit[i]) & ((1 << 64) - 1),
                              int(batch.origin_rank[i])))
    return out


def encode_records(records, fmt: WireFormat) -> bytes:
    return encode(records_to_batch(records), fmt)


def decode_records(buf: bytes, fmt: WireFormat) -> list[PathRecord]:
    return batch_to_records(decode(buf, fmt))
