"""Rank groups: collective operations shared by every backend.

A backend supplies one primitive, ``_alltoall(op, payloads) -> received``,
that moves one byte string from every rank to every rank. Each call carries
a sequence number and an opcode; a backend must raise ``ProtocolError`` when
ranks disagree on either, so a rank that skips or reorders a collective is
reported instead of hanging.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .wire import RayBatch, WireFormat, decode, encode

OP_COUNTS = 1
OP_RAYS = 2
OP_TILES = 3
OP_PROXYSET = 4
OP_SCENEHASH = 5
OP_GATHER = 6

OP_NAMES = {OP_COUNTS: "COUNTS", OP_RAYS: "RAYS", OP_TILES: "TILES", OP_PROXYSET: "PROXYSET",
            OP_SCENEHASH: "SCENEHASH", OP_GATHER: "GATHER"}


class TransportError(RuntimeError):
    """Backend failure: lost peer, timeout, aborted group."""


class ProtocolError(TransportError):
    """Ranks violated the collective protocol (order, sizes, digests)."""


@dataclass
class TransportStats:
    rank_count: int
    records_to: np.ndarray = None
    bytes_to: np.ndarray = None
    bytes_rays: int = 0
    bytes_tiles: int = 0
    count_matrices: list = field(default_factory=list)

    def __post_init__(self):
        self.records_to = np.zeros(self.rank_count, np.int64)
        self.bytes_to = np.zeros(self.rank_count, np.int64)


def tile_rows(height: int, rank_count: int, rank: int) -> tuple[int, int]:
    return rank * height // rank_count, (rank + 1) * height // rank_count


class RankGroup:
    def __init__(self, rank: int, size: int, wire: WireFormat):
        if not 0 <= rank < size:
            raise ValueError(f"rank {rank} outside group of {size}")
        self.rank = rank
        self.size = size
        self.wire = wire
        self.stats = TransportStats(size)
        self._seq = 0
        self._counts = None

    # backend primitive ------------------------------------------------------
    def _alltoall(self, seq: int, op: int, payloads: list[bytes]) -> list[bytes]:
        raise NotImplementedError

    def _collective(self, op: int, payloads: list[bytes]) -> list[bytes]:
        if len(payloads) != self.size:
            raise ValueError("one payload per rank required")
        self._seq += 1
        return self._alltoall(self._seq, op, payloads)

    def allgather(self, op: int, payload: bytes) -> list[bytes]:
        return self._collective(op, [payload] * self.size)

    def close(self):
        pass

    # collectives ------------------------------------------------------------
    def exchange_counts(self, send_counts) -> np.ndarray:
        send = np.asarray(send_counts, dtype=np.int64)
        if send.shape != (self.size,) or np.any(send < 0):
            raise ValueError("send counts must be one non-negative int per rank")
        rows = self.allgather(OP_COUNTS, send.astype("<i8").tobytes())
        mat = np.stack([np.frombuffer(r, dtype="<i8") for r in rows]).astype(np.int64)
        if mat.shape != (self.size, self.size):
            raise ProtocolError("malformed count row")
        self._counts = mat
        self.stats.count_matrices.append(mat.copy())
        return mat

    def exchange_rays(self, buckets: list[RayBatch]) -> RayBatch:
        """Send ``buckets[j]`` to rank j; return arrivals ordered by source rank."""
        if self._counts is None:
            raise ProtocolError("exchange_rays without a preceding exchange_counts")
        mat, self._counts = self._counts, None
        if len(buckets) != self.size:
            raise ValueError("one bucket per rank required")
        sizes = np.array([len(b) for b in buckets], np.int64)
        if not np.array_equal(sizes, mat[self.rank]):
            raise ProtocolError(f"rank {self.rank}: bucket sizes {sizes.tolist()} disagree with counts "
                                f"{mat[self.rank].tolist()}")
        payloads = [encode(b, self.wire) for b in buckets]
        for j, p in enumerate(payloads):
            if j != self.rank:
                self.stats.records_to[j] += len(buckets[j])
                self.stats.bytes_to[j] += len(p)
                self.stats.bytes_rays += len(p)
        received = self._collective(OP_RAYS, payloads)
        size = self.wire.record_size
        for src, buf in enumerate(received):
            if len(buf) != mat[src, self.rank] * size:
                raise ProtocolError(f"rank {self.rank}: got {len(buf)} bytes from rank {src}, expected "
                                    f"{mat[src, self.rank] * size}")
        return RayBatch.concat([decode(buf, self.wire) for buf in received])

    def exchange_frame_tiles(self, partial: np.ndarray) -> np.ndarray:
        """Direct-send compositing: return this rank's tile summed over all ranks.

        Tile r covers rows [r*H//N, (r+1)*H//N); sums run in ascending rank order.
        """
        partial = np.ascontiguousarray(partial, dtype=np.float32)
        if partial.ndim != 3 or partial.shape[2] != 3:
            raise ValueError("partial frame must be H x W x 3")
        h, w, _ = partial.shape
        header = struct.pack("<II", h, w)
        payloads = []
        for j in range(self.size):
            r0, r1 = tile_rows(h, self.size, j)
            payloads.append(header + partial[r0:r1].tobytes())
            if j != self.rank:
                self.stats.bytes_tiles += len(payloads[-1])
        received = self._collective(OP_TILES, payloads)
        r0, r1 = tile_rows(h, self.size, self.rank)
        acc = None
        for src, buf in enumerate(received):
            if buf[:8] != header:
                sh, sw = struct.unpack("<II", buf[:8])
                raise ProtocolError(f"rank {src} frame is {sw}x{sh}, rank {self.rank} has {w}x{h}")
            tile = np.frombuffer(buf, dtype=np.float32, offset=8).reshape(r1 - r0, w, 3)
            acc = tile.copy() if acc is None else acc + tile
        return acc

    def gather(self, payload: bytes, root: int = 0) -> list[bytes] | None:
        """Collect one byte string per rank on ``root``."""
        payloads = [payload if j == root else b"" for j in range(self.size)]
        got = self._collective(OP_GATHER, payloads)
        return got if self.rank == root else None

    def broadcast(self, op: int, payload: bytes | None, root: int = 0) -> bytes:
        payloads = [(payload or b"") if self.rank == root else b""] * self.size
        return self._collective(op, payloads)[root]

    def check_digest(self, digest: bytes):
        """Abort unless every rank holds the same scene/plan digest."""
        got = self.allgather(OP_SCENEHASH, digest)
        bad = [r for r, d in enumerate(got) if d != digest]
        if bad:
            raise ProtocolError(f"rank {self.rank}: scene/plan digest differs on ranks {bad}")

    def allreduce_sum(self, values) -> np.ndarray:
        arr = np.asarray(values, dtype=np.float64)
        rows = self.allgather(OP_GATHER, arr.astype("<f8").tobytes())
        total = np.zeros_like(arr)
        for r in rows:
            total = total + np.frombuffer(r, dtype="<f8").reshape(arr.shape)
        return total
