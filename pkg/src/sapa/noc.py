"""2D-mesh packet network with pipelined flit movement and adaptive routing.

Routers keep one unbounded FIFO per output port. Every up link moves at most
one flit per cycle, so an uncontended packet of ``f`` flits crossing ``h``
links is delivered ``h + f - 1`` cycles after injection. Congestion is an
exponentially weighted average of output-queue occupancy, evaluated lazily:
between queue changes the occupancy is constant, so ``k`` per-cycle updates
collapse to ``o + (c - o) * (1 - w) ** k``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

from .errors import Unreachable, UnknownLink, ZeroLengthPacket

PORTS = ("N", "E", "S", "W")
# X ports first so equal choices fall to the X dimension
X_FIRST = ("E", "W", "N", "S")
OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}
DELTA = {"N": (0, 1), "S": (0, -1), "E": (1, 0), "W": (-1, 0)}
PACKET_KINDS = ("data", "memory-request", "memory-reply", "migration", "control")


@dataclass
class Packet:
    id: int
    src: int
    dst: int
    flits: int
    kind: str
    inject_cycle: int
    deliver_cycle: int | None = None
    hops: int = 0
    payload: object = None
    dropped: bool = False
    arrived_flits: int = 0

    @property
    def latency(self) -> int | None:
        return None if self.deliver_cycle is None else self.deliver_cycle - self.inject_cycle


@dataclass
class _Port:
    queue: deque = field(default_factory=deque)
    up: bool = True
    # congestion value as of the end of cycle ``t``
    value: float = 0.0
    t: int = -1


@dataclass(frozen=True)
class RouterView:
    """Read-only snapshot of one router."""

    node: int
    coordinate: tuple[int, int]
    congestion: dict
    link_up: dict
    queue_lengths: dict


@dataclass
class NocCounters:
    injected: int = 0
    delivered: int = 0
    dropped: int = 0
    flit_hops: int = 0

    def copy(self) -> "NocCounters":
        return NocCounters(self.injected, self.delivered, self.dropped, self.flit_hops)


class Network:
    def __init__(
        self,
        width: int,
        height: int,
        e_flit_hop: Fraction = Fraction(1, 10),
        ewma_weight: float = 0.1,
        policy: str = "adaptive",
    ):
        if width < 1 or height < 1:
            raise ValueError("mesh dimensions must be positive")
        self.width = width
        self.height = height
        self.e_flit_hop = Fraction(e_flit_hop)
        self.ewma_weight = float(ewma_weight)
        self._decay = 1.0 - self.ewma_weight
        self.policy = policy
        self.ports: dict[tuple[int, str], _Port] = {}
        for node in range(width * height):
            for p in PORTS:
                if self.neighbor(node, p) is not None:
                    self.ports[(node, p)] = _Port()
        self.packets: dict[int, Packet] = {}
        self.counters = NocCounters()
        self.now = -1  # last cycle advanced
        self._next_id = 0
        self._busy: set[tuple[int, str]] = set()
        self._decisions: dict[tuple[int, int], str] = {}
        self._local: list[Packet] = []
        self._dist: dict[int, list[int | None]] = {}
        self.faulted = False
        self.in_flight: set[int] = set()
        self.drop_log: list[tuple[int, int]] = []  # (cycle, packet id)
        self.kind_counts: dict[str, int] = {}

    # ------------------------------------------------------------------ geometry

    def coord(self, node: int) -> tuple[int, int]:
        return node % self.width, node // self.width

    def node_at(self, x: int, y: int) -> int:
        return y * self.width + x

    def neighbor(self, node: int, port: str) -> int | None:
        x, y = self.coord(node)
        dx, dy = DELTA[port]
        nx, ny = x + dx, y + dy
        if 0 <= nx < self.width and 0 <= ny < self.height:
            return self.node_at(nx, ny)
        return None

    def manhattan(self, a: int, b: int) -> int:
        (ax, ay), (bx, by) = self.coord(a), self.coord(b)
        return abs(ax - bx) + abs(ay - by)

    def link_up(self, node: int, port: str) -> bool:
        p = self.ports.get((node, port))
        return p is not None and p.up

    def distances(self, dst: int) -> list[int | None]:
        """Hop distance from every node to ``dst`` over up links (BFS)."""
        d = self._dist.get(dst)
        if d is not None:
            return d
        if not self.faulted:
            d = [self.manhattan(n, dst) for n in range(self.width * self.height)]
        else:
            d = [None] * (self.width * self.height)
            d[dst] = 0
            frontier = deque([dst])
            while frontier:
                n = frontier.popleft()
                for p in PORTS:
                    m = self.neighbor(n, p)
                    # links are symmetric, so walking out of dst is fine
                    if m is not None and d[m] is None and self.ports[(n, p)].up:
                        d[m] = d[n] + 1
                        frontier.append(m)
        self._dist[dst] = d
        return d

    def reachable(self, src: int, dst: int) -> bool:
        return self.distances(dst)[src] is not None

    # ------------------------------------------------------------------ congestion

    def _value_at(self, port: _Port, t: int) -> float:
        k = t - port.t
        if k <= 0:
            return port.value
        occ = len(port.queue)
        return occ + (port.value - occ) * self._decay**k

    def _touch(self, key: tuple[int, str], cycle: int) -> _Port:
        """Bring a port's average up to ``cycle - 1`` before its queue changes."""
        port = self.ports[key]
        if port.t < cycle - 1:
            port.value = self._value_at(port, cycle - 1)
            port.t = cycle - 1
        return port

    def congestion_of(self, node: int, cycle: int | None = None) -> dict[str, float]:
        """Per-port congestion of ``node`` after cycle ``cycle`` (default: latest)."""
        t = self.now if cycle is None else cycle
        return {p: self._value_at(self.ports[(node, p)], t) for p in PORTS if (node, p) in self.ports}

    def max_congestion(self, cycle: int | None = None) -> float:
        t = self.now if cycle is None else cycle
        return max((self._value_at(p, t) for p in self.ports.values()), default=0.0)

    def router(self, node: int) -> RouterView:
        present = [p for p in PORTS if (node, p) in self.ports]
        return RouterView(
            node,
            self.coord(node),
            self.congestion_of(node),
            {p: self.ports[(node, p)].up for p in present},
            {p: len(self.ports[(node, p)].queue) for p in present},
        )

    # ------------------------------------------------------------------ routing

    def productive_ports(self, node: int, dst: int) -> list[str]:
        """Minimal-direction ports that are up and shorten the surviving path."""
        (x, y), (dx, dy) = self.coord(node), self.coord(dst)
        cand = []
        if dx > x:
            cand.append("E")
        elif dx < x:
            cand.append("W")
        if dy > y:
            cand.append("N")
        elif dy < y:
            cand.append("S")
        dist = self.distances(dst)
        here = dist[node]
        out = []
        for p in cand:
            if not self.ports[(node, p)].up:
                continue
            nd = dist[self.neighbor(node, p)]
            if nd is not None and here is not None and nd < here:
                out.append(p)
        return out

    def table_port(self, node: int, dst: int) -> str:
        """Route-table entry: the first X-first port stepping one BFS hop closer."""
        dist = self.distances(dst)
        here = dist[node]
        if here is None:
            raise Unreachable(f"node {dst} unreachable from {node}")
        for p in X_FIRST:
            m = self.neighbor(node, p)
            if m is not None and self.ports[(node, p)].up and dist[m] == here - 1:
                return p
        raise Unreachable(f"node {dst} unreachable from {node}")

    def next_hop(self, node: int, dst: int, policy: str | None = None, cycle: int | None = None) -> str:
        if node == dst:
            raise ValueError("next_hop called at the destination; deliver locally")
        policy = self.policy if policy is None else policy
        if self.distances(dst)[node] is None:
            raise Unreachable(f"node {dst} unreachable from {node}")
        ports = self.productive_ports(node, dst)
        if not ports:
            return self.table_port(node, dst)
        if policy == "deterministic" or len(ports) == 1:
            return ports[0]
        # decisions observe congestion committed by the previous cycle
        t = (self.now if cycle is None else cycle - 1)
        best = ports[0]
        best_c = self._value_at(self.ports[(node, best)], t)
        for p in ports[1:]:
            c = self._value_at(self.ports[(node, p)], t)
            if c < best_c:
                best, best_c = p, c
        return best

    # ------------------------------------------------------------------ traffic

    def inject_packet(self, src: int, dst: int, flits: int, kind: str, cycle: int, payload=None) -> int:
        """Queue a packet at ``src``; its flits may leave from ``cycle + 1``.

        Raises :class:`Unreachable` (after recording a drop) when ``dst`` is
        disconnected from ``src``.
        """
        if flits < 1:
            raise ZeroLengthPacket("packets need at least one flit")
        if kind not in PACKET_KINDS:
            raise ValueError(f"unknown packet kind {kind!r}")
        pid = self._next_id
        self._next_id += 1
        pkt = Packet(pid, src, dst, flits, kind, cycle, payload=payload)
        self.packets[pid] = pkt
        self.counters.injected += 1
        self.kind_counts[kind] = self.kind_counts.get(kind, 0) + 1
        if src == dst:
            pkt.deliver_cycle = cycle
            pkt.arrived_flits = flits
            self.counters.delivered += 1
            self._local.append(pkt)
            return pid
        try:
            port = self._decide(pid, src, dst, cycle)
        except Unreachable:
            self._drop(pkt, cycle)
            raise
        self.in_flight.add(pid)
        key = (src, port)
        q = self._touch(key, cycle).queue
        for i in range(flits):
            q.append((pid, i, cycle + 1))
        self._busy.add(key)
        return pid

    def _decide(self, pid: int, node: int, dst: int, cycle: int) -> str:
        key = (pid, node)
        port = self._decisions.get(key)
        if port is None or not self.ports[(node, port)].up:
            port = self.next_hop(node, dst, cycle=cycle)
            self._decisions[key] = port
        return port

    def _drop(self, pkt: Packet, cycle: int) -> None:
        pkt.dropped = True
        self.counters.dropped += 1
        self.in_flight.discard(pkt.id)
        self.drop_log.append((cycle, pkt.id))

    def _forget(self, pkt: Packet) -> None:
        for key in [k for k in self._decisions if k[0] == pkt.id]:
            del self._decisions[key]

    @property
    def idle(self) -> bool:
        return not self._busy and not self._local

    def advance_network(self, cycle: int) -> list[Packet]:
        """Move flits for one cycle; return packets delivered this cycle."""
        delivered = self._local
        self._local = []
        arrivals = []
        for key in sorted(self._busy):
            port = self.ports[key]
            q = port.queue
            if not port.up or q[0][2] > cycle:
                continue
            self._touch(key, cycle)
            pid, idx, _ = q.popleft()
            if not q:
                self._busy.discard(key)
            nb = self.neighbor(key[0], key[1])
            self.counters.flit_hops += 1
            arrivals.append((pid, idx, nb))
        arrivals.sort()
        for pid, idx, nb in arrivals:
            pkt = self.packets[pid]
            if pkt.dropped:
                continue
            if idx == 0:
                pkt.hops += 1
            if nb == pkt.dst:
                pkt.arrived_flits += 1
                if pkt.arrived_flits == pkt.flits:
                    pkt.deliver_cycle = cycle
                    self.counters.delivered += 1
                    self.in_flight.discard(pid)
                    self._forget(pkt)
                    delivered.append(pkt)
                continue
            try:
                port = self._decide(pid, nb, pkt.dst, cycle)
            except Unreachable:
                self._drop_in_flight(pkt, cycle)
                continue
            key = (nb, port)
            self._touch(key, cycle).queue.append((pid, idx, cycle + 1))
            self._busy.add(key)
        self.now = cycle
        return delivered

    def _drop_in_flight(self, pkt: Packet, cycle: int) -> None:
        for key in list(self._busy):
            q = self.ports[key].queue
            if any(f[0] == pkt.id for f in q):
                self._touch(key, cycle)
                kept = [f for f in q if f[0] != pkt.id]
                q.clear()
                q.extend(kept)
                if not q:
                    self._busy.discard(key)
        self._forget(pkt)
        self._drop(pkt, cycle)

    def inject_link_fault(self, node: int, port: str, cycle: int) -> None:
        """Take a link down in both directions and reroute flits queued on it."""
        port = port.upper()
        nb = self.neighbor(node, port) if port in DELTA else None
        if nb is None or (node, port) not in self.ports:
            raise UnknownLink(f"no link at node {node} port {port}")
        ends = [(node, port), (nb, OPPOSITE[port])]
        if not any(self.ports[k].up for k in ends):
            return
        self.faulted = True
        self._dist.clear()
        stranded = []
        for key in ends:
            p = self._touch(key, cycle)
            p.up = False
            while p.queue:
                pid, idx, ready = p.queue.popleft()
                stranded.append((pid, idx, ready, key[0]))
            self._busy.discard(key)
        # any cached hop may now point away from the destination; re-decide
        # everything so each hop again shortens the surviving-graph distance
        self._decisions.clear()
        stranded.sort()
        for pid, idx, ready, at in stranded:
            pkt = self.packets[pid]
            if pkt.dropped:
                continue
            try:
                new_port = self._decide(pid, at, pkt.dst, cycle)
            except Unreachable:
                self._drop_in_flight(pkt, cycle)
                continue
            key = (at, new_port)
            self._touch(key, cycle).queue.append((pid, idx, max(ready, cycle + 1)))
            self._busy.add(key)

    # ------------------------------------------------------------------ accounting

    @property
    def energy(self) -> Fraction:
        return self.counters.flit_hops * self.e_flit_hop

    def conservation_holds(self) -> bool:
        c = self.counters
        return c.injected == c.delivered + len(self.in_flight) + c.dropped

    def queued_flits(self) -> int:
        return sum(len(self.ports[k].queue) for k in self._busy)


def next_hop(net: Network, node: int, dst: int, policy: str = "adaptive") -> str:
    return net.next_hop(node, dst, policy)


def links(net: Network) -> Iterable[tuple[int, str]]:
    """Every undirected link once, as (node, port) with port in {E, N}."""
    for node in range(net.width * net.height):
        for p in ("E", "N"):
            if (node, p) in net.ports:
                yield node, p
