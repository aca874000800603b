"""Polymorphic processing elements: mode table, execution, energy, migration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import CoverageGap, DestinationBusy, TaskNotResident, UnknownMode


def _frac(x) -> Fraction:
    # str() first so 0.3 means 3/10, not the nearest binary double
    return x if isinstance(x, Fraction) else Fraction(str(x))


@dataclass(frozen=True)
class PEMode:
    """One operating point of a PE. ``ipc == 0`` is a sleep mode."""

    name: str
    ipc: Fraction
    e_active: Fraction
    e_idle: Fraction
    transition_latency: int = 50

    def __post_init__(self):
        object.__setattr__(self, "ipc", _frac(self.ipc))
        object.__setattr__(self, "e_active", _frac(self.e_active))
        object.__setattr__(self, "e_idle", _frac(self.e_idle))
        if self.ipc < 0:
            raise ValueError(f"mode {self.name}: ipc must be >= 0")
        if not (self.e_active >= self.e_idle >= 0):
            raise ValueError(f"mode {self.name}: need e_active >= e_idle >= 0")
        if self.transition_latency < 0:
            raise ValueError(f"mode {self.name}: transition_latency must be >= 0")

    @property
    def is_sleep(self) -> bool:
        return self.ipc == 0


DEFAULT_MODES: tuple[PEMode, ...] = (
    PEMode("sleep", 0, "0.05", "0.05", 50),
    PEMode("low", "0.5", "1.0", "0.2", 50),
    PEMode("high", "1.0", "2.5", "0.3", 50),
    PEMode("turbo", "1.5", "5.0", "0.4", 50),
)


class ModeTable:
    """Modes ordered by ipc (then active energy); lookup by name."""

    def __init__(self, modes: Iterable[PEMode]):
        ordered = sorted(modes, key=lambda m: (m.ipc, m.e_active, m.name))
        if not ordered:
            raise ValueError("mode table is empty")
        self.modes: tuple[PEMode, ...] = tuple(ordered)
        self._by_name = {m.name: m for m in ordered}
        if len(self._by_name) != len(ordered):
            raise ValueError("duplicate mode name")

    def __getitem__(self, name: str) -> PEMode:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownMode(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __iter__(self):
        return iter(self.modes)

    def __len__(self):
        return len(self.modes)

    def index(self, mode: PEMode) -> int:
        return self.modes.index(self._by_name[mode.name])

    def lower(self, mode: PEMode) -> PEMode | None:
        i = self.index(mode)
        return self.modes[i - 1] if i > 0 else None

    def higher(self, mode: PEMode) -> PEMode | None:
        i = self.index(mode)
        return self.modes[i + 1] if i + 1 < len(self.modes) else None

    @property
    def lowest(self) -> PEMode:
        return self.modes[0]

    @property
    def highest(self) -> PEMode:
        return self.modes[-1]

    @property
    def max_ipc(self) -> Fraction:
        return self.modes[-1].ipc


@dataclass
class PECounters:
    active_cycles: int = 0
    idle_cycles: int = 0
    instructions_retired: int = 0
    stall_cycles: int = 0

    def copy(self) -> "PECounters":
        return PECounters(self.active_cycles, self.idle_cycles, self.instructions_retired, self.stall_cycles)


@dataclass
class PEState:
    """Per-PE state owned by the simulation loop.

    Every cycle is classified exactly once: *idle* when the PE is inactive
    or holds no task (billed at the mode's ``e_idle``), otherwise *active*
    (billed at ``e_active``). Active cycles that retire nothing are also
    counted as stalls.
    """

    id: int
    coord: tuple[int, int]
    mode: PEMode
    active: bool = False
    resident_task: int | None = None
    counters: PECounters = field(default_factory=PECounters)
    transition_remaining: int = 0
    accumulator: Fraction = Fraction(0)
    # mode name -> [active cycles, idle cycles]
    mode_cycles: dict[str, list[int]] = field(default_factory=dict)
    # instructions committed by the most recent pe_step/bulk call
    last_retired: int = 0

    def _bill(self, active: int, idle: int) -> None:
        slot = self.mode_cycles.get(self.mode.name)
        if slot is None:
            slot = self.mode_cycles[self.mode.name] = [0, 0]
        slot[0] += active
        slot[1] += idle

    def mode_history(self, table: ModeTable) -> list[tuple[PEMode, int, int]]:
        return [(table[name], a, i) for name, (a, i) in sorted(self.mode_cycles.items())]


def pe_step(pe: PEState, inputs_ready: bool, budget: int | None = None, busy: bool | None = None) -> PEState:
    """Advance ``pe`` by one cycle (phase 1 of the engine).

    ``budget`` caps committed instructions (remaining work of the resident
    task). ``busy`` marks a PE occupied without a task, e.g. by rehearsal.
    """
    return pe_bulk(pe, 1, inputs_ready, budget, busy)


def pe_bulk(pe: PEState, cycles: int, inputs_ready: bool, budget: int | None = None, busy: bool | None = None) -> PEState:
    """Closed form of ``cycles`` consecutive :func:`pe_step` calls.

    Valid while nothing else changes the PE; the engine only calls it with
    spans that end before the resident task's next event.
    """
    pe.last_retired = 0
    if cycles <= 0:
        return pe
    c = pe.counters
    occupied = pe.active and (pe.resident_task is not None or bool(busy))
    stall = min(cycles, pe.transition_remaining)
    pe.transition_remaining -= stall
    if not occupied:
        c.idle_cycles += cycles
        pe._bill(0, cycles)
        return pe
    c.active_cycles += cycles
    pe._bill(cycles, 0)
    run = cycles - stall
    if pe.resident_task is None:
        # occupied by a rehearsal slice, which keeps its own books
        return pe
    if not inputs_ready or pe.mode.ipc == 0:
        c.stall_cycles += cycles
        return pe
    c.stall_cycles += stall
    if run == 0:
        return pe
    pe.accumulator += pe.mode.ipc * run
    whole = math.floor(pe.accumulator)
    if budget is not None and whole >= budget:
        whole = budget
        # surplus from a finished unit is not banked
        pe.accumulator = pe.accumulator - math.floor(pe.accumulator)
    else:
        pe.accumulator -= whole
    c.instructions_retired += whole
    pe.last_retired = whole
    return pe


def cycles_to_retire(pe: PEState, n: int) -> int | None:
    """Cycles until ``n`` more instructions are committed, or None if never.

    Assumes the PE stays active, occupied, ready and in its current mode.
    """
    if n <= 0:
        return 0
    ipc = pe.mode.ipc
    if ipc == 0:
        return None
    need = n - pe.accumulator
    run = math.ceil(need / ipc) if need > 0 else 0
    return pe.transition_remaining + max(run, 1 if n > 0 else 0)


def set_mode(pe: PEState, mode: PEMode, cycle: int, log: list | None = None, table: ModeTable | None = None) -> PEState:
    if table is not None and mode.name not in table:
        raise UnknownMode(mode.name)
    if mode == pe.mode:
        if log is not None:
            log.append((cycle, "SetPEMode", pe.id, mode.name, "noop"))
        return pe
    pe.mode = mode
    pe.transition_remaining = mode.transition_latency
    if log is not None:
        log.append((cycle, "SetPEMode", pe.id, mode.name, ""))
    return pe


def pe_energy(counters: PECounters, mode_history: Sequence[tuple[PEMode, int, int]]) -> Fraction:
    """Exact PE energy: sum of active/idle cycles weighted by the mode in force.

    ``mode_history`` lists ``(mode, active_cycles, idle_cycles)`` segments
    that must cover the counters exactly.
    """
    total_active = sum(a for _, a, _ in mode_history)
    total_idle = sum(i for _, _, i in mode_history)
    if total_active != counters.active_cycles or total_idle != counters.idle_cycles:
        raise CoverageGap(
            f"history covers {total_active}+{total_idle} cycles, counters have "
            f"{counters.active_cycles}+{counters.idle_cycles}"
        )
    energy = Fraction(0)
    for mode, a, i in mode_history:
        energy += a * mode.e_active + i * mode.e_idle
    return energy


@dataclass(frozen=True)
class MigrationPlan:
    task: int
    source: int
    destination: int
    context_bytes: int
    flits: int
    hops: int
    transfer_latency: int
    total_latency: int
    packet_ids: tuple[int, ...] = ()


def plan_migration(
    task: int,
    src: PEState,
    dst: PEState,
    config,
    footprint: int,
    hops: int | None = None,
) -> MigrationPlan:
    """Latency estimate for moving ``task`` from ``src`` to ``dst``.

    Transfer uses the pipelined model ``hops + flits - 1`` on an idle path;
    ``hops`` defaults to the Manhattan distance.
    """
    if src.resident_task != task:
        raise TaskNotResident(f"task {task} is not resident on PE {src.id}")
    if dst.resident_task is not None or not dst.active:
        raise DestinationBusy(f"PE {dst.id} is not an active vacant PE")
    if hops is None:
        hops = abs(src.coord[0] - dst.coord[0]) + abs(src.coord[1] - dst.coord[1])
    flits = math.ceil(footprint / config.flit_bytes) if footprint > 0 else 0
    transfer = hops + flits - 1 if flits else 0
    total = config.migration_drain_cost + transfer + config.migration_restore_cost
    return MigrationPlan(task, src.id, dst.id, footprint, flits, hops, transfer, total)
