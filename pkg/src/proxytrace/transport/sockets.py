"""TCP backend: full mesh between ranks plus an optional head connection.

Frames are ``<u32 seq><u8 opcode><u32 length>`` followed by the payload. The
first frame on every connection is a SCENEHASH hello carrying the sender's
rank and its scene/plan digest; a digest mismatch aborts the group.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time

from .group import OP_NAMES, OP_SCENEHASH, ProtocolError, RankGroup, TransportError
from .wire import WireFormat

log = logging.getLogger(__name__)

HEADER = struct.Struct("<IBI")


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {text!r}; expected host:port")
    return host, int(port)


def free_ports(n: int, host: str = "127.0.0.1") -> list[int]:
    socks = []
    for _ in range(n):
        s = socket.socket()
        s.bind((host, 0))
        socks.append(s)
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(min(n - len(buf), 1 << 20))
        except socket.timeout:
            raise TransportError("timed out waiting for a peer") from None
        except OSError as e:
            raise TransportError(f"connection failed: {e}") from None
        if not chunk:
            raise TransportError("peer closed the connection")
        buf += chunk
    return bytes(buf)


def send_frame(sock: socket.socket, seq: int, op: int, payload: bytes):
    try:
        sock.sendall(HEADER.pack(seq, op, len(payload)) + payload)
    except OSError as e:
        raise TransportError(f"send failed: {e}") from None


def recv_frame(sock: socket.socket) -> tuple[int, int, bytes]:
    seq, op, n = HEADER.unpack(_recv_exact(sock, HEADER.size))
    return seq, op, _recv_exact(sock, n)


def _hello(rank: int, digest: bytes) -> bytes:
    return struct.pack("<I", rank) + digest


def _check_hello(payload: bytes, digest: bytes, who: str) -> int:
    (peer,) = struct.unpack_from("<I", payload)
    if payload[4:] != digest:
        raise ProtocolError(f"{who}: rank {peer} has a different scene/plan digest")
    return peer


def _connect(addr, deadline: float, timeout: float) -> socket.socket:
    while True:
        try:
            s = socket.create_connection(addr, timeout=timeout)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return s
        except OSError:
            if time.monotonic() > deadline:
                raise TransportError(f"could not connect to {addr[0]}:{addr[1]}") from None
            time.sleep(0.05)


def _listen(addr) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(addr)
    srv.listen()
    return srv


class SocketGroup(RankGroup):
    def __init__(self, rank: int, addresses: list[tuple[str, int]], wire: WireFormat = WireFormat(8),
                 digest: bytes = b"", timeout: float = 60.0, head: tuple[str, int] | None = None):
        super().__init__(rank, len(addresses), wire)
        self.timeout = timeout
        self.digest = digest
        self.peers: dict[int, socket.socket] = {}
        self.head_sock = None
        deadline = time.monotonic() + timeout
        srv = _listen(addresses[rank]) if rank < self.size - 1 else None
        try:
            for j in range(rank):
                s = _connect(addresses[j], deadline, timeout)
                send_frame(s, 0, OP_SCENEHASH, _hello(rank, digest))
                seq, op, payload = recv_frame(s)
                if _check_hello(payload, digest, f"rank {rank}") != j:
                    raise ProtocolError(f"rank {rank}: expected rank {j} at {addresses[j]}")
                self.peers[j] = s
            if srv is not None:
                srv.settimeout(timeout)
                while len(self.peers) < self.size - 1:
                    try:
                        s, _ = srv.accept()
                    except socket.timeout:
                        raise TransportError(f"rank {rank}: peers did not connect in time") from None
                    s.settimeout(timeout)
                    s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                    _, _, payload = recv_frame(s)
                    peer = _check_hello(payload, digest, f"rank {rank}")
                    send_frame(s, 0, OP_SCENEHASH, _hello(rank, digest))
                    self.peers[peer] = s
            if head is not None:
                self.head_sock = _connect(head, deadline, timeout)
                send_frame(self.head_sock, 0, OP_SCENEHASH, _hello(rank, digest))
        except BaseException:
            self.close()
            raise
        finally:
            if srv is not None:
                srv.close()

    def _alltoall(self, seq, op, payloads):
        errors = []

        def send(j):
            try:
                send_frame(self.peers[j], seq, op, payloads[j])
            except TransportError as e:
                errors.append(e)

        senders = [threading.Thread(target=send, args=(j,)) for j in sorted(self.peers)]
        for t in senders:
            t.start()
        received = [b""] * self.size
        received[self.rank] = payloads[self.rank]
        try:
            for j in sorted(self.peers):
                rseq, rop, data = recv_frame(self.peers[j])
                if (rseq, rop) != (seq, op):
                    raise ProtocolError(f"rank {self.rank}: expected #{seq} {OP_NAMES.get(op, op)} from rank "
                                        f"{j}, got #{rseq} {OP_NAMES.get(rop, rop)}")
                received[j] = data
        finally:
            for t in senders:
                t.join()
        if errors:
            raise errors[0]
        return received

    def send_to_head(self, op: int, payload: bytes):
        if self.head_sock is None:
            raise TransportError("no head connection")
        self._seq += 1
        send_frame(self.head_sock, self._seq, op, payload)

    def close(self):
        for s in list(self.peers.values()) + ([self.head_sock] if self.head_sock else []):
            try:
                s.close()
            except OSError:
                pass
        self.peers = {}
        self.head_sock = None


class HeadNode:
    """Collects final tiles from every rank; does no rendering."""

    def __init__(self, address: tuple[str, int], rank_count: int, digest: bytes = b"", timeout: float = 60.0):
        self.rank_count = rank_count
        self.digest = digest
        self.timeout = timeout
        self.srv = _listen(address)
        self.srv.settimeout(timeout)
        self.ranks: dict[int, socket.socket] = {}

    @property
    def address(self):
        return self.srv.getsockname()

    def accept_all(self):
        while len(self.ranks) < self.rank_count:
            try:
                s, _ = self.srv.accept()
            except socket.timeout:
                raise TransportError("ranks did not connect to the head in time") from None
            s.settimeout(self.timeout)
            _, _, payload = recv_frame(s)
            self.ranks[_check_hello(payload, self.digest, "head")] = s
        self.srv.close()

    def collect(self, op: int) -> list[bytes]:
        out = []
        for r in range(self.rank_count):
            _, rop, data = recv_frame(self.ranks[r])
            if rop != op:
                raise ProtocolError(f"head: expected {OP_NAMES.get(op, op)} from rank {r}, got "
                                    f"{OP_NAMES.get(rop, rop)}")
            out.append(data)
        return out

    def close(self):
        for s in self.ranks.values():
            s.close()
        try:
            self.srv.close()
        except OSError:
            pass
