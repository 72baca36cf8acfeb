"""All-to-allv exchange between workers, with per-pair byte accounting.

Two backends share one interface: :class:`InProcTransport` (workers are
threads of one process, messages travel through queues) and
:class:`TcpTransport` (length-prefixed frames over sockets). Every collective
carries a tag; a receiver that sees a different tag than it expects raises
:class:`TagMismatch` instead of silently consuming out-of-step data.
"""

from __future__ import annotations

import os
import queue
import socket
import struct
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from enum import IntEnum

from .quant import wire_breakdown

DEFAULT_TIMEOUT = 30.0
FRAME_MAGIC = 0x4D47434E
FRAME = struct.Struct("<IQI")
RANK_ENV = "HYBRIDGCN_RANK"


class TransportError(RuntimeError):
    pass


class TagMismatch(TransportError):
    pass


class PeerDisconnected(TransportError):
    pass


class CollectiveTimeout(TransportError):
    pass


class Direction(IntEnum):
    FORWARD = 0
    BACKWARD = 1
    SYNC = 2
    EVAL = 3


@dataclass(frozen=True, order=True)
class Tag:
    epoch: int
    seq: int
    layer: int
    direction: int

    def encode(self) -> int:
        return ((self.epoch & 0xFFFFFF) << 40 | (self.seq & 0xFFFFFF) << 16
                | (self.layer & 0xFFF) << 4 | (self.direction & 0xF))


@dataclass
class PairCounters:
    data_bytes: int = 0
    param_bytes: int = 0
    messages: int = 0

    @property
    def total(self) -> int:
        return self.data_bytes + self.param_bytes

    def add(self, payload: bytes) -> None:
        if not payload:
            return
        parts = wire_breakdown(payload)
        self.data_bytes += parts["data"]
        self.param_bytes += parts["params"]
        self.messages += 1


@dataclass
class ByteLedger:
    """Cumulative bytes per (src, dst) pair, split by direction and by epoch."""

    sent: dict = field(default_factory=lambda: defaultdict(PairCounters))
    received: dict = field(default_factory=lambda: defaultdict(PairCounters))
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, book: str, src: int, dst: int, tag: Tag, payload: bytes) -> None:
        with self.lock:
            getattr(self, book)[(src, dst, tag.epoch, tag.direction)].add(payload)

    def reset(self) -> None:
        with self.lock:
            self.sent.clear()
            self.received.clear()

    def totals(self, book: str = "sent", epoch: int | None = None,
               directions=None) -> dict[tuple[int, int], PairCounters]:
        out: dict[tuple[int, int], PairCounters] = defaultdict(PairCounters)
        with self.lock:
            for (s, d, ep, direc), c in getattr(self, book).items():
                if epoch is not None and ep != epoch:
                    continue
                if directions is not None and direc not in directions:
                    continue
                acc = out[(s, d)]
                acc.data_bytes += c.data_bytes
                acc.param_bytes += c.param_bytes
                acc.messages += c.messages
        return dict(out)

    def epochs(self) -> list[int]:
        with self.lock:
            return sorted({k[2] for k in list(self.sent) + list(self.received)})


class Transport:
    """Base endpoint for one rank. Subclasses move bytes; this class keeps tags."""

    def __init__(self, rank: int, world_size: int, ledger: ByteLedger | None = None,
                 timeout: float = DEFAULT_TIMEOUT):
        self.rank = rank
        self.world_size = world_size
        self.ledger = ledger if ledger is not None else ByteLedger()
        self.timeout = timeout
        self._epoch = 0
        self._seq = 0

    def next_tag(self, epoch: int, layer: int, direction: int) -> Tag:
        if epoch < self._epoch:
            raise TransportError(f"epoch went backwards ({epoch} < {self._epoch})")
        if epoch != self._epoch:
            self._epoch, self._seq = epoch, 0
        self._seq += 1
        return Tag(epoch, self._seq, layer, int(direction))

    def byte_ledger(self) -> ByteLedger:
        return self.ledger

    def all_to_allv(self, outgoing: dict[int, bytes], epoch: int = 0, layer: int = 0,
                    direction: int = Direction.FORWARD) -> dict[int, bytes]:
        """Send ``outgoing[peer]`` to each peer; return what every peer sent here.

        Missing peers get an empty message. The call returns only after a
        message from every peer arrived.
        """
        tag = self.next_tag(epoch, layer, direction)
        msgs = {p: bytes(outgoing.get(p, b"")) for p in range(self.world_size) if p != self.rank}
        for p in outgoing:
            if p == self.rank or not 0 <= p < self.world_size:
                raise TransportError(f"rank {self.rank} cannot send to peer {p}")
        for p, payload in msgs.items():
            self.ledger.record("sent", self.rank, p, tag, payload)
        received = self._exchange(tag, msgs)
        for p, payload in received.items():
            self.ledger.record("received", p, self.rank, tag, payload)
        return received

    def _exchange(self, tag: Tag, msgs: dict[int, bytes]) -> dict[int, bytes]:
        raise NotImplementedError

    def close(self) -> None:
        pass


class InProcHub:
    """Shared mailbox for P in-process endpoints."""

    def __init__(self, world_size: int, timeout: float = DEFAULT_TIMEOUT):
        self.world_size = world_size
        self.timeout = timeout
        self.ledger = ByteLedger()
        self.boxes = {(s, d): queue.Queue() for s in range(world_size)
                      for d in range(world_size) if s != d}
        self.barrier = threading.Barrier(world_size)

    def endpoints(self) -> list["InProcTransport"]:
        return [InProcTransport(r, self) for r in range(self.world_size)]


class InProcTransport(Transport):
    def __init__(self, rank: int, hub: InProcHub):
        super().__init__(rank, hub.world_size, hub.ledger, hub.timeout)
        self.hub = hub

    def _exchange(self, tag, msgs):
        for p, payload in msgs.items():
            self.hub.boxes[(self.rank, p)].put((tag, payload))
        received = {}
        for p in msgs:
            try:
                got_tag, payload = self.hub.boxes[(p, self.rank)].get(timeout=self.timeout)
            except queue.Empty:
                raise CollectiveTimeout(f"rank {self.rank}: no message from {p} for {tag}") from None
            if got_tag != tag:
                raise TagMismatch(f"rank {self.rank}: expected {tag} from {p}, got {got_tag}")
            received[p] = payload
        try:
            self.hub.barrier.wait(timeout=self.timeout)
        except threading.BrokenBarrierError:
            raise CollectiveTimeout(f"rank {self.rank}: barrier broken at {tag}") from None
        return received


def read_hosts(path) -> list[tuple[str, int]]:
    """Rendezvous file: one ``host:port`` per rank, '#' comments allowed."""
    hosts = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            host, _, port = line.rpartition(":")
            hosts.append((host or "127.0.0.1", int(port)))
    return hosts


def rank_from_env(default: int | None = None) -> int | None:
    val = os.environ.get(RANK_ENV)
    return int(val) if val is not None else default


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise PeerDisconnected("connection closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


class TcpTransport(Transport):
    """Full mesh of TCP connections; one outgoing and one incoming socket per peer.

    Frames are ``<magic u32, tag u64, len u32>`` followed by ``len`` bytes.
    """

    def __init__(self, rank: int, hosts: list[tuple[str, int]], timeout: float = DEFAULT_TIMEOUT,
                 ledger: ByteLedger | None = None):
        super().__init__(rank, len(hosts), ledger, timeout)
        self.hosts = hosts
        self._server = socket.create_server(hosts[rank], reuse_port=False)
        self._server.settimeout(timeout)
        self._out: dict[int, socket.socket] = {}
        self._in: dict[int, socket.socket] = {}
        self._connected = False

    def connect(self) -> None:
        peers = [p for p in range(self.world_size) if p != self.rank]
        acceptor = threading.Thread(target=self._accept_all, args=(len(peers),), daemon=True)
        acceptor.start()
        for p in peers:
            self._out[p] = self._dial(self.hosts[p])
            self._out[p].sendall(struct.pack("<I", self.rank))
        acceptor.join(self.timeout)
        if len(self._in) != len(peers):
            raise CollectiveTimeout(f"rank {self.rank}: only {len(self._in)} peers connected")
        self._connected = True

    def _dial(self, addr) -> socket.socket:
        import time
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                s = socket.create_connection(addr, timeout=self.timeout)
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                return s
            except OSError:
                if time.monotonic() > deadline:
                    raise CollectiveTimeout(f"rank {self.rank}: cannot reach {addr}") from None
                time.sleep(0.05)

    def _accept_all(self, n: int) -> None:
        for _ in range(n):
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            conn.settimeout(self.timeout)
            (peer,) = struct.unpack("<I", _recv_exact(conn, 4))
            self._in[peer] = conn

    def _exchange(self, tag, msgs):
        if not self._connected:
            self.connect()
        wire = tag.encode()
        errors = []

        def send_all():
            try:
                for p, payload in msgs.items():
                    self._out[p].sendall(FRAME.pack(FRAME_MAGIC, wire, len(payload)) + payload)
            except OSError as exc:
                errors.append(exc)

        sender = threading.Thread(target=send_all, daemon=True)
        sender.start()
        received = {}
        try:
            for p in msgs:
                magic, got, length = FRAME.unpack(_recv_exact(self._in[p], FRAME.size))
                if magic != FRAME_MAGIC:
                    raise TransportError(f"rank {self.rank}: bad frame magic from {p}")
                if got != wire:
                    raise TagMismatch(f"rank {self.rank}: expected tag {wire:#x} from {p}, got {got:#x}")
                received[p] = _recv_exact(self._in[p], length)
        except socket.timeout:
            raise CollectiveTimeout(f"rank {self.rank}: timed out at {tag}") from None
        sender.join(self.timeout)
        if errors:
            raise PeerDisconnected(str(errors[0]))
        return received

    def close(self) -> None:
        for s in list(self._out.values()) + list(self._in.values()):
            try:
                s.close()
            except OSError:
                pass
        self._server.close()


def free_local_hosts(n: int) -> list[tuple[str, int]]:
    """Pick ``n`` free localhost ports (for single-host TCP runs and tests)."""
    socks, hosts = [], []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        hosts.append(("127.0.0.1", s.getsockname()[1]))
    for s in socks:
        s.close()
    return hosts
