"""Distributed memory with parent-child replication and bounded staleness.

Each object has one home (parent) that commits every write. Other nodes keep
read replicas that are never invalidated; a reader discovers staleness by
comparing versions and refetches only when the gap exceeds the tolerance.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Mapping

from .errors import NoReads, UnknownObject


class ReadClass(enum.Enum):
    FRESH_HIT = "FreshHit"
    STALE_HIT = "StaleHit"
    PARENT_FETCH = "ParentFetch"


@dataclass
class DataObject:
    address: str
    home_node: int
    version: int = 0
    value: object = None
    size: int = 8


@dataclass
class ReplicaEntry:
    address: str
    holder_node: int
    replica_version: int
    value: object


@dataclass
class MemCounters:
    local_hits: int = 0
    parent_fetches: int = 0
    stale_reads: int = 0
    fresh_reads: int = 0
    writes: int = 0

    @property
    def reads(self) -> int:
        return self.fresh_reads + self.stale_reads

    def copy(self) -> "MemCounters":
        return MemCounters(self.local_hits, self.parent_fetches, self.stale_reads, self.fresh_reads, self.writes)

    def minus(self, other: "MemCounters") -> "MemCounters":
        return MemCounters(
            self.local_hits - other.local_hits,
            self.parent_fetches - other.parent_fetches,
            self.stale_reads - other.stale_reads,
            self.fresh_reads - other.fresh_reads,
            self.writes - other.writes,
        )


@dataclass(frozen=True)
class ReadRecord:
    """Audit entry for one served read."""

    cycle: int
    node: int
    address: str
    read_class: ReadClass
    version: int
    parent_version: int
    tolerance: int


def correctness_estimate(counters: MemCounters) -> float:
    """Fraction of reads served fresh."""
    total = counters.fresh_reads + counters.stale_reads
    if total == 0:
        raise NoReads("no reads served")
    return counters.fresh_reads / total


# send(src, dst, flits, kind, payload) -> packet id
SendFn = Callable[[int, int, int, str, object], int]


class MemorySystem:
    def __init__(
        self,
        objects: Mapping[str, DataObject] | None = None,
        tolerance: int = 0,
        flit_bytes: int = 16,
        e_mem_access: Fraction = Fraction(1, 2),
        send: SendFn | None = None,
    ):
        self.objects: dict[str, DataObject] = dict(objects or {})
        self.replicas: dict[tuple[int, str], ReplicaEntry] = {}
        self.tolerance = tolerance
        self.flit_bytes = flit_bytes
        self.e_mem_access = Fraction(e_mem_access)
        self.send = send
        self.counters = MemCounters()
        self.log: list[ReadRecord] = []
        self.write_log: list[tuple[int, int, str, int]] = []  # (cycle, node, address, version)

    def add(self, obj: DataObject) -> None:
        self.objects[obj.address] = obj

    def _obj(self, address: str) -> DataObject:
        try:
            return self.objects[address]
        except KeyError:
            raise UnknownObject(address) from None

    def flits_for(self, size: int) -> int:
        return max(1, math.ceil(size / self.flit_bytes))

    @property
    def accesses(self) -> int:
        return self.counters.reads + self.counters.writes

    @property
    def energy(self) -> Fraction:
        return self.accesses * self.e_mem_access

    # ------------------------------------------------------------ read path

    def try_local(self, node: int, address: str, tolerance: int | None = None, cycle: int = 0):
        """Serve a read without the network if possible.

        Returns ``(value, ReadClass)`` or ``None`` when a parent fetch is
        required.
        """
        tol = self.tolerance if tolerance is None else tolerance
        obj = self._obj(address)
        if node == obj.home_node:
            self._record(cycle, node, obj, ReadClass.FRESH_HIT, obj.version, tol)
            self.counters.local_hits += 1
            self.counters.fresh_reads += 1
            return obj.value, ReadClass.FRESH_HIT
        rep = self.replicas.get((node, address))
        if rep is not None and obj.version - rep.replica_version <= tol:
            self.counters.local_hits += 1
            if obj.version > rep.replica_version:
                cls = ReadClass.STALE_HIT
                self.counters.stale_reads += 1
            else:
                cls = ReadClass.FRESH_HIT
                self.counters.fresh_reads += 1
            self._record(cycle, node, obj, cls, rep.replica_version, tol)
            return rep.value, cls
        return None

    def serve_fetch(self, node: int, address: str, tolerance: int | None = None, cycle: int = 0):
        """Parent side of a fetch: snapshot the current version for ``node``."""
        tol = self.tolerance if tolerance is None else tolerance
        obj = self._obj(address)
        self.counters.parent_fetches += 1
        self.counters.fresh_reads += 1
        self._record(cycle, node, obj, ReadClass.PARENT_FETCH, obj.version, tol)
        return obj.version, obj.value

    def install(self, node: int, address: str, version: int, value) -> None:
        rep = self.replicas.get((node, address))
        if rep is None:
            self.replicas[(node, address)] = ReplicaEntry(address, node, version, value)
        elif version >= rep.replica_version:
            rep.replica_version = version
            rep.value = value

    def mem_read(self, node: int, address: str, tolerance: int | None = None, cycle: int = 0):
        """Functional read: a needed parent round trip completes immediately.

        With a ``send`` hook the request and reply packets are still handed
        to the network so traffic is accounted.
        """
        hit = self.try_local(node, address, tolerance, cycle)
        if hit is not None:
            return hit
        obj = self._obj(address)
        if self.send is not None:
            self.send(node, obj.home_node, 1, "memory-request", ("fetch", address))
        version, value = self.serve_fetch(node, address, tolerance, cycle)
        if self.send is not None:
            self.send(obj.home_node, node, self.flits_for(obj.size), "memory-reply", ("reply", address, version))
        self.install(node, address, version, value)
        return value, ReadClass.PARENT_FETCH

    # ------------------------------------------------------------ write path

    def commit_write(self, node: int, address: str, value, cycle: int = 0) -> int:
        obj = self._obj(address)
        obj.version += 1
        obj.value = value
        self.counters.writes += 1
        self.write_log.append((cycle, node, address, obj.version))
        return obj.version

    def mem_write(self, node: int, address: str, value, cycle: int = 0) -> int:
        """Write through to the home; replicas elsewhere are left as they are."""
        obj = self._obj(address)
        if node != obj.home_node and self.send is not None:
            self.send(node, obj.home_node, self.flits_for(obj.size), "memory-request", ("write", address))
        return self.commit_write(node, address, value, cycle)

    # ------------------------------------------------------------ audit

    def _record(self, cycle, node, obj, cls, version, tol) -> None:
        self.log.append(ReadRecord(cycle, node, obj.address, cls, version, obj.version, tol))

    def staleness_violations(self) -> list[ReadRecord]:
        return [r for r in self.log if r.parent_version - r.version > r.tolerance]

    def counters_match_log(self) -> bool:
        c = self.counters
        stale = sum(1 for r in self.log if r.read_class is ReadClass.STALE_HIT)
        fetch = sum(1 for r in self.log if r.read_class is ReadClass.PARENT_FETCH)
        return (
            c.stale_reads == stale
            and c.parent_fetches == fetch
            and c.fresh_reads + c.stale_reads == len(self.log)
            and c.local_hits == len(self.log) - fetch
            and c.writes == len(self.write_log)
        )


def place_data(graph, mapping: Mapping[int, int]) -> dict[str, int]:
    """Home every declared object on the PE that writes it most.

    ``mapping`` sends task ids to PE ids. Ties go to the lowest PE id.
    Objects nobody writes are homed with their heaviest reader.
    """
    homes = {}
    for decl in graph.objects:
        counts: dict[int, int] = {}
        source = decl.writes if decl.writes else decl.reads
        for task, n in source:
            if task not in mapping:
                raise UnknownObject(f"{decl.address}: task {task} is not mapped")
            pe = mapping[task]
            counts[pe] = counts.get(pe, 0) + n
        if not counts:
            raise UnknownObject(f"{decl.address}: no task accesses it")
        homes[decl.address] = min(counts, key=lambda pe: (-counts[pe], pe))
    return homes
