"""In-process backend: ranks are threads meeting at barrier rendezvous."""

from __future__ import annotations

import threading

from .group import OP_NAMES, ProtocolError, RankGroup, TransportError
from .wire import WireFormat


class InProcHub:
    """Shared mailbox for ``size`` ranks living in one process."""

    def __init__(self, size: int, wire: WireFormat = WireFormat(8), timeout: float = 120.0):
        if size < 1:
            raise ValueError("group size must be >= 1")
        self.size = size
        self.wire = wire
        self._barrier = threading.Barrier(size, timeout=timeout)
        self._slots = [None] * size

    def group(self, rank: int) -> InProcGroup:
        return InProcGroup(self, rank)

    def groups(self) -> list[InProcGroup]:
        return [self.group(r) for r in range(self.size)]

    def abort(self):
        self._barrier.abort()

    def _wait(self):
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise TransportError("rank group aborted or timed out") from None

    def exchange(self, rank: int, seq: int, op: int, payloads: list[bytes]) -> list[bytes]:
        self._slots[rank] = (seq, op, payloads)
        self._wait()
        snapshot = list(self._slots)
        # every rank sees the same snapshot, so every rank raises together
        keys = {(s, o) for s, o, _ in snapshot}
        if len(keys) != 1:
            desc = ", ".join(f"rank {r}: #{s} {OP_NAMES.get(o, o)}" for r, (s, o, _) in enumerate(snapshot))
            raise ProtocolError(f"collectives out of lockstep ({desc})")
        received = [snapshot[src][2][rank] for src in range(self.size)]
        self._wait()
        return received


class InProcGroup(RankGroup):
    def __init__(self, hub: InProcHub, rank: int):
        super().__init__(rank, hub.size, hub.wire)
        self.hub = hub

    def _alltoall(self, seq, op, payloads):
        return self.hub.exchange(self.rank, seq, op, [bytes(p) for p in payloads])


def run_ranks(size: int, fn, wire: WireFormat = WireFormat(8), timeout: float = 120.0) -> list:
    """Run ``fn(group)`` on ``size`` threads; return per-rank results.

    If any rank raises, the group is aborted so the others unblock, and the
    first genuine error (not the induced aborts) is re-raised.
    """
    hub = InProcHub(size, wire, timeout)
    if size == 1:
        return [fn(hub.group(0))]
    results = [None] * size
    errors = [None] * size

    def body(r):
        try:
            results[r] = fn(hub.group(r))
        except BaseException as e:  # noqa: BLE001 - re-raised below
            errors[r] = e
            hub.abort()

    threads = [threading.Thread(target=body, args=(r,), name=f"rank-{r}") for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    real = [e for e in errors if e is not None and not (type(e) is TransportError)]
    if real:
        raise real[0]
    induced = [e for e in errors if e is not None]
    if induced:
        raise induced[0]
    return results
