"""Cycle-stepped simulation engine.

Every cycle runs the same phases in order: PE execution, memory service,
network movement, control-layer sensing, counter commit. Packets delivered
in a cycle's network phase are handed to memory and tasks in the next
cycle's memory phase, so no phase sees state written later in its own cycle.

When nothing is in flight, the loop jumps straight to the next cycle where
something can happen (a task finishing a work unit, an epoch boundary, a
scheduled fault, a timer). The jump uses closed forms that equal stepping
cycle by cycle; ``fast_forward=False`` steps every cycle and is used to
check that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

from .config import SystemConfig
from .cores import (
    PECounters,
    PEState,
    cycles_to_retire,
    pe_bulk,
    pe_energy,
    plan_migration,
    set_mode,
)
from .errors import (
    DestinationBusy,
    MappingInfeasible,
    NoReads,
    NoVacancy,
    RehearsalUnavailable,
    TaskNotResident,
    Unreachable,
    UnknownMode,
)
from .memory import DataObject, MemCounters, MemorySystem, correctness_estimate, place_data
from .noc import Network, NocCounters
from .ns import (
    ActivatePE,
    BudgetInfeasible,
    DeactivatePE,
    DecisionContext,
    GoalSpec,
    MigrateTask,
    PEFrame,
    PolicyState,
    RehearsalResult,
    SetKnob,
    SetPEMode,
    SetRoutingPolicy,
    SetStalenessTolerance,
    TelemetryFrame,
    check_constraints,
    decide,
    knob_action,
    make_policy,
    score_rehearsal,
    select_arm,
    synthesize_rules,
)
from .rng import StreamRegistry
from .workloads import (
    EXCHANGE_RECORD_BYTES,
    GLOBAL_BEST,
    DEFAULT_SCHEDULE,
    AnnealSchedule,
    ChainState,
    Scene,
    TaskGraph,
    adopt,
    exchange_best,
    generate_scene,
    sa_step,
    start_chain,
)

# instructions the coordinator spends merging one report
COORDINATOR_COST = 50


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimReport:
    completion_cycle: int
    total_energy: Fraction
    per_epoch_power: tuple[Fraction, ...]
    final_accuracy: float
    action_log: tuple[tuple, ...]
    counter_totals: dict
    pe_energy: Fraction = Fraction(0)
    mem_energy: Fraction = Fraction(0)
    noc_energy: Fraction = Fraction(0)
    incomplete: bool = False
    frames: tuple[TelemetryFrame, ...] = ()
    iterations: int = 0
    reached: bool = True
    best_pose: tuple[int, int] | None = None
    terminal_violations: tuple = ()
    outputs: dict = field(default_factory=dict)

    @property
    def mean_power(self) -> Fraction:
        if self.completion_cycle == 0:
            return Fraction(0)
        return self.total_energy / self.completion_cycle


# ---------------------------------------------------------------------------
# Runtime task state
# ---------------------------------------------------------------------------


@dataclass
class TaskRun:
    id: int
    kind: str
    pe: int | None
    total: int | None  # instructions, None when open-ended
    retired: int = 0
    unit: int = 0  # instructions left in the current work unit
    waiting: str | None = None  # why the task cannot retire right now
    done: bool = False
    inputs: dict = field(default_factory=dict)
    needs: int = 0
    output: object = None
    migrating: dict | None = None

    @property
    def ready(self) -> bool:
        return not self.done and self.waiting is None and self.unit > 0 and self.migrating is None

    @property
    def progress(self) -> float | None:
        if self.total is None:
            return None
        return 1.0 if self.total == 0 else min(1.0, self.retired / self.total)


@dataclass
class ChainRun:
    state: ChainState
    rng: object
    segment: int = 0  # iterations in the current work unit
    since_exchange: int = 0
    finished: bool = False


class SAApp:
    """Multi-start annealing mapped as chain tasks and one coordinator."""

    def __init__(self, sim: "Simulator", graph: TaskGraph, scene: Scene, target: float,
                 max_iters: int, schedule: AnnealSchedule):
        self.sim = sim
        self.graph = graph
        self.scene = scene
        self.target = target
        self.max_iters = max_iters
        self.schedule = schedule
        self.period = graph.exchange_period
        self.coord_id = graph.coordinator.id
        self.cost = {t.id: t.cost for t in graph.chains}
        self.chains: dict[int, ChainRun] = {}
        for t in graph.chains:
            rng = sim.rng[f"sa.chain.{t.id}"]
            self.chains[t.id] = ChainRun(start_chain(scene, rng, schedule), rng)
        # per-chain best as last reported to the coordinator
        self.reported: dict[int, tuple[tuple[int, int], float]] = {}
        self.global_best: tuple[tuple[int, int], float] | None = None
        self.inbox: list[tuple] = []
        self.reached = False
        self.finished = False

    # -- chains

    def begin_segment(self, task: TaskRun, cycle: int) -> None:
        """Run the next slice of iterations and charge their instructions.

        The slice ends at the next exchange, at the iteration budget, or as
        soon as the chain's best meets the target.
        """
        ch = self.chains[task.id]
        st = ch.state
        n = max(0, min(self.period - ch.since_exchange, self.max_iters - st.iterations))
        done = 0
        while done < n:
            sa_step(st, self.scene, ch.rng, self.schedule)
            done += 1
            if st.best_confidence >= self.target:
                break
        ch.segment = done
        ch.since_exchange += done
        if done == 0:
            self.finish_chain(task, cycle)
            return
        task.unit = done * self.cost[task.id]
        task.waiting = None

    def finish_chain(self, task: TaskRun, cycle: int) -> None:
        self.chains[task.id].finished = True
        self.sim.complete_task(task)
        self.check_exhausted(cycle)

    def segment_done(self, task: TaskRun, cycle: int) -> None:
        ch = self.chains[task.id]
        st = ch.state
        record = (task.id, st.best_pose, st.best_confidence)
        self.sim.send_to_task(task, self.coord_id, EXCHANGE_RECORD_BYTES, "data", ("report", record), cycle)
        if st.iterations >= self.max_iters:
            self.finish_chain(task, cycle)
            return
        if ch.since_exchange >= self.period:
            ch.since_exchange = 0
            task.waiting = "mem"
            self.sim.task_read(task, GLOBAL_BEST, cycle)
        else:
            self.begin_segment(task, cycle)

    def read_done(self, task: TaskRun, value, cycle: int) -> None:
        if task.done:
            return
        if value is not None:
            adopt(self.chains[task.id].state, value[0], value[1])
        self.begin_segment(task, cycle)

    # -- coordinator

    def deliver(self, task: TaskRun, payload, cycle: int) -> None:
        if task.id == self.coord_id and payload[0] == "report":
            self.inbox.append(payload[1])
            if task.unit == 0 and not task.done:
                task.unit = COORDINATOR_COST
                task.waiting = None

    def coordinator_done(self, task: TaskRun, cycle: int) -> None:
        cid, pose, conf = self.inbox.pop(0)
        prev = self.reported.get(cid)
        if prev is None or conf > prev[1]:
            self.reported[cid] = (pose, conf)
        ids = sorted(self.reported)
        _, bpose, bconf = exchange_best([self.reported[i] for i in ids])
        if self.global_best is None or bconf > self.global_best[1]:
            self.global_best = (bpose, bconf)
            self.sim.task_write(task, GLOBAL_BEST, self.global_best, cycle)
        if conf >= self.target:
            self.reached = True
            self.finished = True
            self.sim.finish_app(cycle)
            return
        if self.inbox:
            task.unit = COORDINATOR_COST
        else:
            task.waiting = "inputs"
        self.check_exhausted(cycle)

    def check_exhausted(self, cycle: int) -> None:
        if self.finished:
            return
        if all(c.finished for c in self.chains.values()) and not self.inbox:
            coord = self.sim.tasks[self.coord_id]
            if coord.unit == 0 and not self.sim.reports_in_flight():
                self.finished = True
                self.sim.finish_app(cycle)

    @property
    def best(self):
        if self.global_best is not None:
            return self.global_best
        return None

    @property
    def iterations(self) -> int:
        return sum(c.state.iterations for c in self.chains.values())


# ---------------------------------------------------------------------------
# Simulator
# ---------------------------------------------------------------------------


def initial_mapping(graph: TaskGraph, config: SystemConfig) -> dict[int, int]:
    """Coordinator first, then tasks by id, onto PEs closest to the mesh centre."""
    cx, cy = (config.mesh_width - 1) / 2.0, (config.mesh_height - 1) / 2.0
    pes = sorted(
        range(config.num_pes),
        key=lambda p: (abs(config.coord(p)[0] - cx) + abs(config.coord(p)[1] - cy), p),
    )
    order = sorted(graph.tasks, key=lambda t: (t.kind != "coordinator", t.id))
    if len(order) > min(config.num_pes, config.active_cap):
        raise MappingInfeasible(
            f"{len(order)} tasks but only {min(config.num_pes, config.active_cap)} PEs may be active"
        )
    return {t.id: pes[i] for i, t in enumerate(order)}


class Simulator:
    """Global simulation state plus the per-cycle update."""

    def __init__(
        self,
        config: SystemConfig,
        graph: TaskGraph,
        goals: GoalSpec | None = None,
        seed: int | None = None,
        scene: Scene | None = None,
        schedule: AnnealSchedule = DEFAULT_SCHEDULE,
        fast_forward: bool = True,
        max_cycles: int | None = None,
    ):
        self.config = config
        self.graph = graph
        self.goals = goals or GoalSpec()
        self.seed = config.seed if seed is None else seed
        self.fast_forward = fast_forward
        self.max_cycles = config.max_cycles if max_cycles is None else max_cycles
        self.modes = config.modes
        self.rng = StreamRegistry(self.seed)
        self.cycle = 0
        self.events: list[tuple] = []
        self.action_log: list[tuple] = []
        self.frames: list[TelemetryFrame] = []
        self.terminated = False
        self.incomplete = False
        self.completion_cycle: int | None = None

        sleep = self.modes.lowest
        self.pes = [PEState(i, config.coord(i), sleep) for i in range(config.num_pes)]
        self.network = Network(
            config.mesh_width, config.mesh_height, config.e_flit_hop, float(config.ewma_weight), config.routing
        )
        self.memory = MemorySystem(
            tolerance=config.mem_tolerance, flit_bytes=config.flit_bytes, e_mem_access=config.e_mem_access
        )
        self.pending: list = []  # packets delivered last cycle
        self.timers: list[tuple[int, int, str, object]] = []  # (cycle, seq, kind, data)
        self._timer_seq = 0
        self.faults = sorted(config.fault_schedule, key=lambda f: (f[2], f[0], f[1]))
        self.goal_changes = list(self.goals.schedule)
        self.plan = synthesize_rules(self.goals, config)
        self.rehearsals: dict[int, dict] = {}  # helper PE -> rehearsal record
        self.pending_deactivate: set[int] = set()
        self.previous_violations: tuple[str, ...] = ()
        self.knob_floor: dict = dict(self.plan.knob_floor)

        # tasks
        self.mapping = initial_mapping(graph, config) if graph.tasks else {}
        default = self.modes[config.default_mode]
        self.tasks: dict[int, TaskRun] = {}
        for t in graph.tasks:
            pe = self.pes[self.mapping[t.id]]
            pe.active = True
            pe.mode = default
            pe.resident_task = t.id
            total = t.cost if t.kind == "compute" else None
            self.tasks[t.id] = TaskRun(t.id, t.kind, pe.id, total)
        homes = place_data(graph, self.mapping)
        for decl in graph.objects:
            self.memory.add(DataObject(decl.address, homes[decl.address], 0, None, decl.size))

        self.app: SAApp | None = None
        if graph.chains:
            if graph.coordinator is None:
                raise MappingInfeasible("annealing chains need a coordinator task")
            w = config.workload
            if scene is None:
                scene = generate_scene(
                    w.image_width, w.image_height, w.template_size, w.noise, self.seed, w.clutter
                )
            self.app = SAApp(self, graph, scene, w.confidence, w.max_iters, schedule)
            for t in graph.chains:
                self.tasks[t.id].total = w.max_iters * t.cost
        self.sa_iterations = 0

        # bandit over goal knobs
        self.policy: PolicyState | None = None
        if self.goals.knobs:
            self.policy = make_policy(self.goals.knobs, config.epsilon)

        # epoch bookkeeping
        self.epoch = 0
        self.epoch_start = 0
        self._snap_pe = [PECounters() for _ in self.pes]
        self._snap_pe_energy = [Fraction(0)] * len(self.pes)
        self._snap_mem = MemCounters()
        self._snap_noc = NocCounters()
        self._snap_progress = 0.0
        self._started = False

    # ------------------------------------------------------------------ helpers

    def log_action(self, cycle: int, action, note: str | None = None) -> None:
        name, target, value = action.log_fields()
        if note:
            value = f"{value}:{note}" if value != "" else note
        self.action_log.append((cycle, name, target, value, action.trigger))

    def hops(self, a: int, b: int) -> int:
        return self.network.manhattan(a, b)

    def add_timer(self, cycle: int, kind: str, data) -> None:
        self._timer_seq += 1
        self.timers.append((cycle, self._timer_seq, kind, data))
        self.timers.sort()

    def progress(self) -> float:
        total = sum(t.total for t in self.tasks.values() if t.total)
        if not total:
            return 1.0 if all(t.done for t in self.tasks.values()) else 0.0
        if self.completion_cycle is not None:
            return 1.0
        return sum(min(t.retired, t.total) for t in self.tasks.values() if t.total) / total

    def knob_settings(self) -> dict:
        out = {"mem.tolerance": self.memory.tolerance, "noc.routing": self.network.policy}
        if self.app is not None:
            out["sa.confidence"] = self.app.target
        return out

    def reports_in_flight(self) -> bool:
        for pid in self.network.in_flight:
            payload = self.network.packets[pid].payload
            if payload and payload[0] == "task" and payload[2][0] == "report":
                return True
        return any(p.payload and p.payload[0] == "task" and p.payload[2][0] == "report" for p in self.pending)

    # ------------------------------------------------------------------ messaging

    def inject(self, src: int, dst: int, nbytes_or_flits: int, kind: str, payload, cycle: int, flits: bool = False):
        n = nbytes_or_flits if flits else max(1, math.ceil(nbytes_or_flits / self.config.flit_bytes))
        try:
            return self.network.inject_packet(src, dst, n, kind, cycle, payload)
        except Unreachable:
            self.events.append((cycle, "drop", (src, dst, kind)))
            return None

    def task_pe(self, task_id: int) -> int:
        t = self.tasks[task_id]
        if t.migrating is not None:
            return t.migrating["dst"]
        return t.pe

    def send_to_task(self, task: TaskRun, dst_task: int, nbytes: int, kind: str, body, cycle: int) -> None:
        self.inject(self.task_pe(task.id), self.task_pe(dst_task), nbytes, kind, ("task", dst_task, body), cycle)

    def task_read(self, task: TaskRun, address: str, cycle: int) -> None:
        node = task.pe
        hit = self.memory.try_local(node, address, cycle=cycle)
        if hit is not None:
            task.waiting = None
            self._read_done(task, hit[0], cycle)
            return
        home = self.memory.objects[address].home_node
        task.waiting = "mem"
        pid = self.inject(node, home, 1, "memory-request", ("fetch", address, task.id, node), cycle, flits=True)
        if pid is None:
            # parent unreachable: continue with whatever the replica holds
            rep = self.memory.replicas.get((node, address))
            task.waiting = None
            self._read_done(task, rep.value if rep else None, cycle)

    def _read_done(self, task: TaskRun, value, cycle: int) -> None:
        if self.app is not None and task.kind == "chain":
            self.app.read_done(task, value, cycle)

    def task_write(self, task: TaskRun, address: str, value, cycle: int) -> None:
        node = task.pe
        obj = self.memory.objects[address]
        if node == obj.home_node:
            self.memory.commit_write(node, address, value, cycle)
        else:
            flits = self.memory.flits_for(obj.size)
            self.inject(node, obj.home_node, flits, "memory-request", ("write", address, value, node), cycle, flits=True)

    def complete_task(self, task: TaskRun) -> None:
        task.done = True
        task.unit = 0
        task.waiting = None
        if task.pe is not None and self.pes[task.pe].resident_task == task.id:
            self.pes[task.pe].resident_task = None

    def finish_app(self, cycle: int) -> None:
        for t in self.tasks.values():
            if not t.done:
                self.complete_task(t)
        self.completion_cycle = cycle + 1

    # ------------------------------------------------------------------ task events

    def _start(self) -> None:
        self._started = True
        for t in sorted(self.tasks.values(), key=lambda t: t.id):
            if t.kind == "compute":
                preds = self.graph.predecessors(t.id)
                t.needs = len(preds)
                t.unit = t.total
                if t.needs:
                    t.waiting = "inputs"
                elif t.unit == 0:
                    self._compute_done(t, 0)
            elif t.kind == "chain":
                self.app.begin_segment(t, 0)
            elif t.kind == "coordinator":
                t.waiting = "inputs"
        if self.policy is not None:
            arm = select_arm(self.policy, self.rng[self.policy.rng_name], self._allowed_arms())
            self.policy.current = arm
            for k, name in enumerate(self.policy.knob_names):
                self._apply(knob_action(name, self.policy.arms[arm][k]), 0)
        if all(t.done for t in self.tasks.values()) and self.completion_cycle is None:
            self.completion_cycle = 0
            self.terminated = True

    def _allowed_arms(self):
        from .ns import allowed_arms

        return allowed_arms(self.policy, self.knob_floor)

    def _unit_done(self, task: TaskRun, cycle: int) -> None:
        if task.kind == "compute":
            self._compute_done(task, cycle)
        elif task.kind == "chain":
            self.app.segment_done(task, cycle)
        else:
            self.app.coordinator_done(task, cycle)

    def _compute_done(self, task: TaskRun, cycle: int) -> None:
        # outputs depend only on inputs, never on timing or placement
        task.output = hash((task.id, tuple(sorted(task.inputs.items())))) & 0xFFFFFFFF
        for e in self.graph.successors(task.id):
            self.send_to_task(task, e.dst, max(e.bytes, 1), "data", ("input", task.id, task.output), cycle)
        self.complete_task(task)
        if all(t.done for t in self.tasks.values()):
            self.finish_app(cycle)

    def _deliver(self, pkt, cycle: int) -> None:
        payload = pkt.payload
        if payload is None:
            return
        tag = payload[0]
        if tag == "task":
            _, dst_task, body = payload
            here = self.task_pe(dst_task)
            t = self.tasks[dst_task]
            if here != pkt.dst and not t.done:
                # the task moved while the packet was in flight
                self.inject(pkt.dst, here, pkt.flits, pkt.kind, payload, cycle, flits=True)
                return
            if t.done:
                return
            if body[0] == "input":
                t.inputs[body[1]] = body[2]
                if len(t.inputs) >= t.needs and t.waiting == "inputs":
                    t.waiting = None
                    if t.unit == 0:
                        self._compute_done(t, cycle)
            elif self.app is not None:
                self.app.deliver(t, body, cycle)
        elif tag == "fetch":
            _, address, task_id, node = payload
            version, value = self.memory.serve_fetch(node, address, cycle=cycle)
            obj = self.memory.objects[address]
            self.inject(
                pkt.dst, node, self.memory.flits_for(obj.size), "memory-reply",
                ("reply", address, task_id, version, value), cycle, flits=True,
            )
        elif tag == "reply":
            _, address, task_id, version, value = payload
            self.memory.install(pkt.dst, address, version, value)
            t = self.tasks[task_id]
            if not t.done and t.waiting == "mem":
                t.waiting = None
                self._read_done(t, value, cycle)
        elif tag == "write":
            _, address, value, node = payload
            self.memory.commit_write(node, address, value, cycle)
        elif tag == "migration":
            task_id = payload[1]
            t = self.tasks[task_id]
            self.add_timer(cycle + self.config.migration_restore_cost, "restore", task_id)

    # ------------------------------------------------------------------ the cycle

    def _timers_due(self, cycle: int) -> None:
        while self.timers and self.timers[0][0] <= cycle:
            _, _, kind, data = self.timers.pop(0)
            if kind == "drain":
                self._migration_send(data, cycle)
            elif kind == "restore":
                self._migration_finish(data, cycle)
            elif kind == "rehearsal":
                self._rehearsal_finish(data, cycle)

    def _scheduled(self, cycle: int) -> None:
        while self.faults and self.faults[0][2] <= cycle:
            (x, y), port, _ = self.faults.pop(0)
            self.network.inject_link_fault(self.config.pe_id((x, y)), port, cycle)
            self.events.append((cycle, "fault", (x, y, port)))
        while self.goal_changes and self.goal_changes[0][0] <= cycle:
            _, name, value = self.goal_changes.pop(0)
            self.goals = self.goals.with_constraint(name, value)
            self.plan = synthesize_rules(self.goals, self.config)
            self.knob_floor.update(self.plan.knob_floor)
            self.action_log.append((cycle, "GoalChange", name, value, "schedule"))

    def horizon(self) -> int:
        """Cycles that may be advanced in one closed-form jump."""
        if not self.fast_forward or self.pending or not self.network.idle:
            return 1
        c = self.cycle
        k = self.config.epoch_length - (c - self.epoch_start)
        k = min(k, self.max_cycles - c)
        if self.timers:
            k = min(k, self.timers[0][0] - c)
        if self.faults:
            k = min(k, self.faults[0][2] - c)
        if self.goal_changes:
            k = min(k, self.goal_changes[0][0] - c)
        for pe in self.pes:
            tid = pe.resident_task
            if tid is None or not pe.active:
                continue
            t = self.tasks[tid]
            if t.pe != pe.id or not t.ready:
                continue
            r = cycles_to_retire(pe, t.unit)
            if r is not None:
                k = min(k, r)
        return max(k, 1)

    def step(self, k: int = 1) -> list[tuple]:
        """Advance ``k`` cycles; ``k > 1`` only when :meth:`horizon` allows."""
        if self.terminated:
            raise RuntimeError("simulation already terminated")
        if not self._started:
            self._start()
            if self.terminated:
                return []
        self.events = []
        c0 = self.cycle
        last = c0 + k - 1
        if k == 1:
            self._timers_due(c0)
            self._scheduled(c0)
        # phase 1: PE execution
        finished = []
        for pe in self.pes:
            tid = pe.resident_task
            t = self.tasks.get(tid) if tid is not None else None
            if t is not None and t.pe == pe.id:
                ready = t.ready
                pe_bulk(pe, k, ready, t.unit if ready else None)
                if pe.last_retired:
                    t.retired += pe.last_retired
                    t.unit -= pe.last_retired
                    if t.unit == 0:
                        finished.append(t)
            else:
                pe_bulk(pe, k, False, None, busy=pe.id in self.rehearsals)
        for t in sorted(finished, key=lambda t: t.id):
            if not t.done:
                self._unit_done(t, last)
        # phase 2: memory service and deliveries from the previous cycle
        pending, self.pending = self.pending, []
        for pkt in pending:
            self._deliver(pkt, last)
        # phase 3: network
        if not self.network.idle:
            self.pending = self.network.advance_network(last)
        # phase 4: control layer
        self.cycle = last + 1
        if self.completion_cycle is not None:
            self._close_epoch(final=True)
            self.terminated = True
        elif self.cycle - self.epoch_start >= self.config.epoch_length:
            self._close_epoch(final=False)
        if not self.terminated and self.cycle >= self.max_cycles:
            self.incomplete = True
            self.completion_cycle = self.cycle
            if self.cycle > self.epoch_start:
                self._close_epoch(final=True)
            self.terminated = True
        return self.events

    def run(self) -> SimReport:
        if not self._started:
            self._start()
        while not self.terminated:
            self.step(self.horizon())
        return self.report()

    # ------------------------------------------------------------------ telemetry

    def pe_energy_total(self, pe: PEState) -> Fraction:
        return pe_energy(pe.counters, pe.mode_history(self.modes))

    def collect_telemetry(self) -> TelemetryFrame:
        start, end = self.epoch_start, self.cycle
        cycles = end - start
        frames = []
        pe_e = Fraction(0)
        for pe in self.pes:
            e_now = self.pe_energy_total(pe)
            d_e = e_now - self._snap_pe_energy[pe.id]
            snap = self._snap_pe[pe.id]
            cnt = pe.counters
            tid = pe.resident_task
            task = self.tasks.get(tid) if tid is not None else None
            frames.append(
                PEFrame(
                    pe.id,
                    pe.active,
                    pe.mode.name,
                    cnt.active_cycles - snap.active_cycles,
                    cnt.idle_cycles - snap.idle_cycles,
                    cnt.instructions_retired - snap.instructions_retired,
                    d_e,
                    tid,
                    task.progress if task is not None else None,
                    (task.total - task.retired) if task is not None and task.total is not None else None,
                )
            )
            pe_e += d_e
            self._snap_pe[pe.id] = cnt.copy()
            self._snap_pe_energy[pe.id] = e_now
        mem = self.memory.counters.minus(self._snap_mem)
        self._snap_mem = self.memory.counters.copy()
        noc_now = self.network.counters.copy()
        noc = NocCounters(
            noc_now.injected - self._snap_noc.injected,
            noc_now.delivered - self._snap_noc.delivered,
            noc_now.dropped - self._snap_noc.dropped,
            noc_now.flit_hops - self._snap_noc.flit_hops,
        )
        self._snap_noc = noc_now
        mem_e = (mem.reads + mem.writes) * self.memory.e_mem_access
        noc_e = noc.flit_hops * self.network.e_flit_hop
        energy = pe_e + mem_e + noc_e
        progress = self.progress()
        try:
            acc = correctness_estimate(mem)
        except NoReads:
            acc = None
        frame = TelemetryFrame(
            epoch=self.epoch,
            start=start,
            end=end,
            energy=energy,
            power=energy / cycles if cycles else Fraction(0),
            pe_energy=pe_e,
            mem_energy=mem_e,
            noc_energy=noc_e,
            pes=tuple(frames),
            mem=mem,
            noc=noc,
            max_congestion=self.network.max_congestion(end - 1),
            progress=progress,
            progress_delta=progress - self._snap_progress,
            accuracy=acc,
            app_accuracy=self.app_accuracy(),
            knobs=self.knob_settings(),
        )
        self._snap_progress = progress
        self.frames.append(frame)
        self.epoch += 1
        self.epoch_start = end
        return frame

    def app_accuracy(self) -> float:
        if self.app is not None:
            best = self.app.best
            return best[1] if best is not None else 0.0
        try:
            return correctness_estimate(self.memory.counters)
        except NoReads:
            return 1.0

    def _close_epoch(self, final: bool) -> None:
        frame = self.collect_telemetry()
        if final:
            return
        violations = check_constraints(frame, self.plan)
        for v in violations:
            self.events.append((self.cycle, "violation", v))
        if violations or self.policy is not None:
            ctx = DecisionContext(
                self.modes,
                self.rng["ns.bandit"],
                self.memory.tolerance,
                self.config.active_cap,
                self.previous_violations,
                self.hops,
                self.knob_floor,
            )
            actions, _ = decide(frame, violations, self.policy, self.goals, ctx)
            if violations:
                self.action_log.append(
                    (self.cycle, "Decide", "ns", ";".join(v.name for v in violations), "interrupt")
                )
            self.apply_actions(actions, self.cycle)
        self.previous_violations = tuple(v.name for v in violations)

    # ------------------------------------------------------------------ actions

    def apply_actions(self, actions, cycle: int | None = None) -> None:
        cycle = self.cycle if cycle is None else cycle
        for a in actions:
            if isinstance(a, SetPEMode) and self.config.rehearsal != "off":
                pe = self.pes[a.pe]
                if pe.resident_task is not None and a.mode != pe.mode.name:
                    try:
                        self.rehearse(a, cycle)
                        continue
                    except RehearsalUnavailable:
                        pass
            self._apply(a, cycle)

    def _apply(self, a, cycle: int) -> None:
        if isinstance(a, SetPEMode):
            pe = self.pes[a.pe]
            mode = self.modes[a.mode]
            note = "noop" if mode == pe.mode else None
            set_mode(pe, mode, cycle)
            self.log_action(cycle, a, note)
        elif isinstance(a, ActivatePE):
            pe = self.pes[a.pe]
            if pe.active:
                self.log_action(cycle, a, "noop")
                return
            if sum(p.active for p in self.pes) >= self.config.active_cap:
                self.log_action(cycle, a, "capped")
                return
            pe.active = True
            set_mode(pe, self.modes[self.config.default_mode], cycle)
            self.log_action(cycle, a)
        elif isinstance(a, DeactivatePE):
            pe = self.pes[a.pe]
            if not pe.active:
                self.log_action(cycle, a, "noop")
                return
            if pe.resident_task is not None:
                dst = self.nearest_vacancy(pe.id)
                if dst is None:
                    raise NoVacancy(f"no active vacant PE can take task {pe.resident_task}")
                self._apply(MigrateTask(pe.resident_task, dst, a.trigger), cycle)
                self.pending_deactivate.add(pe.id)
                self.log_action(cycle, a, "after-migration")
                return
            self._deactivate(pe, cycle)
            self.log_action(cycle, a)
        elif isinstance(a, MigrateTask):
            self.migrate(a.task, a.dst, cycle)
            self.log_action(cycle, a)
        elif isinstance(a, SetRoutingPolicy):
            self.network.policy = a.policy
            self.log_action(cycle, a)
        elif isinstance(a, SetStalenessTolerance):
            self.memory.tolerance = max(0, int(a.value))
            self.log_action(cycle, a)
        elif isinstance(a, SetKnob):
            if a.name == "sa.confidence" and self.app is not None:
                self.app.target = float(a.value)
            elif a.name == "mem.tolerance":
                self.memory.tolerance = int(a.value)
            elif a.name == "noc.routing":
                self.network.policy = str(a.value)
            self.log_action(cycle, a)
        elif isinstance(a, BudgetInfeasible):
            self.log_action(cycle, a)
            self.events.append((cycle, "BudgetInfeasible", a.budget))
        else:
            raise TypeError(f"unknown action {a!r}")

    def _deactivate(self, pe: PEState, cycle: int) -> None:
        pe.active = False
        set_mode(pe, self.modes.lowest, cycle)

    def nearest_vacancy(self, pe_id: int) -> int | None:
        cands = [
            p.id
            for p in self.pes
            if p.active and p.resident_task is None and p.id != pe_id and p.id not in self.rehearsals
        ]
        if not cands:
            return None
        return min(cands, key=lambda q: (self.hops(pe_id, q), q))

    # ------------------------------------------------------------------ migration

    def migrate(self, task_id: int, dst: int, cycle: int):
        t = self.tasks.get(task_id)
        if t is None or t.done or t.migrating is not None:
            raise TaskNotResident(f"task {task_id} cannot migrate now")
        src = self.pes[t.pe]
        dpe = self.pes[dst]
        if dst in self.rehearsals:
            raise DestinationBusy(f"PE {dst} is rehearsing")
        footprint = self.graph.task(task_id).footprint
        plan = plan_migration(task_id, src, dpe, self.config, footprint, self.hops(src.id, dst))
        dpe.resident_task = task_id  # reserve
        t.migrating = {"src": src.id, "dst": dst, "footprint": footprint, "plan": plan}
        self.add_timer(cycle + self.config.migration_drain_cost, "drain", task_id)
        return plan

    def _migration_send(self, task_id: int, cycle: int) -> None:
        t = self.tasks[task_id]
        m = t.migrating
        src = self.pes[m["src"]]
        if src.resident_task == task_id:
            src.resident_task = None
        if m["src"] in self.pending_deactivate:
            self.pending_deactivate.discard(m["src"])
            self._deactivate(src, cycle)
        t.pe = None
        if m["footprint"] <= 0:
            self.add_timer(cycle + self.config.migration_restore_cost, "restore", task_id)
            return
        pid = self.inject(m["src"], m["dst"], m["footprint"], "migration", ("migration", task_id), cycle)
        if pid is None:
            # context cannot travel: the task stays where it was
            self.add_timer(cycle, "restore", task_id)
            m["dst"], m["failed"] = m["src"], True
            src.resident_task = task_id

    def _migration_finish(self, task_id: int, cycle: int) -> None:
        t = self.tasks[task_id]
        m = t.migrating
        t.pe = m["dst"]
        t.migrating = None
        if t.done:
            self.pes[m["dst"]].resident_task = None

    # ------------------------------------------------------------------ rehearsal

    def idle_neighbor(self, pe_id: int) -> int | None:
        for port in ("N", "E", "S", "W"):
            nb = self.network.neighbor(pe_id, port)
            if nb is None:
                continue
            p = self.pes[nb]
            if p.resident_task is None and nb not in self.rehearsals:
                if p.active or sum(q.active for q in self.pes) < self.config.active_cap:
                    return nb
        return None

    def rehearse(self, action: SetPEMode, cycle: int) -> None:
        """Trial the mode change on an idle neighbour for one epoch.

        The helper's cycles are billed like any other PE's; the decision is
        applied (or dropped) when the trial ends.
        """
        helper = self.idle_neighbor(action.pe)
        if helper is None:
            raise RehearsalUnavailable(f"PE {action.pe} has no idle neighbour")
        hp = self.pes[helper]
        record = {"action": action, "helper": helper, "mode": hp.mode, "active": hp.active, "pe": action.pe}
        self.rehearsals[helper] = record
        hp.active = True
        set_mode(hp, self.modes[action.mode], cycle)
        self.action_log.append((cycle, "Rehearse", action.pe, f"{action.mode}@{helper}", action.trigger))
        self.add_timer(cycle + self.config.epoch_length, "rehearsal", helper)

    def _rehearsal_finish(self, helper: int, cycle: int) -> None:
        rec = self.rehearsals.pop(helper)
        action = rec["action"]
        hp = self.pes[helper]
        result = score_rehearsal(
            self.pes[action.pe].mode, self.modes[action.mode], self.goals.objective, action.trigger, helper
        )
        if self.config.rehearsal == "keep":
            result = RehearsalResult(result.baseline, result.candidate, "keep", helper)
        set_mode(hp, rec["mode"], cycle)
        hp.active = rec["active"]
        self.action_log.append((cycle, "RehearsalResult", action.pe, result.recommendation, action.trigger))
        if result.recommendation == "adopt":
            self._apply(action, cycle)

    # ------------------------------------------------------------------ report

    def report(self) -> SimReport:
        pe_total = sum((self.pe_energy_total(p) for p in self.pes), Fraction(0))
        mem_total = self.memory.energy
        noc_total = self.network.energy
        totals = {
            "pe.active_cycles": sum(p.counters.active_cycles for p in self.pes),
            "pe.idle_cycles": sum(p.counters.idle_cycles for p in self.pes),
            "pe.instructions_retired": sum(p.counters.instructions_retired for p in self.pes),
            "pe.stall_cycles": sum(p.counters.stall_cycles for p in self.pes),
            "mem.local_hits": self.memory.counters.local_hits,
            "mem.fresh": self.memory.counters.fresh_reads,
            "mem.stale": self.memory.counters.stale_reads,
            "mem.fetches": self.memory.counters.parent_fetches,
            "mem.writes": self.memory.counters.writes,
            "noc.injected": self.network.counters.injected,
            "noc.delivered": self.network.counters.delivered,
            "noc.dropped": self.network.counters.dropped,
            "noc.in_flight": len(self.network.in_flight),
            "noc.flit_hops": self.network.counters.flit_hops,
        }
        completion = self.completion_cycle or 0
        best = self.app.best if self.app is not None else None
        terminal = []
        for chk in self.plan.terminal:
            measured = completion if chk.expr == "completion_cycle" else self.app_accuracy()
            if not chk.holds(measured):
                terminal.append((chk.name, measured, chk.threshold))
        outputs = {t.id: t.output for t in self.tasks.values() if t.kind == "compute"}
        return SimReport(
            completion_cycle=completion,
            total_energy=pe_total + mem_total + noc_total,
            per_epoch_power=tuple(f.power for f in self.frames),
            final_accuracy=float(self.app_accuracy()),
            action_log=tuple(self.action_log),
            counter_totals=totals,
            pe_energy=pe_total,
            mem_energy=mem_total,
            noc_energy=noc_total,
            incomplete=self.incomplete,
            frames=tuple(self.frames),
            iterations=self.app.iterations if self.app is not None else 0,
            reached=self.app.reached if self.app is not None else not self.incomplete,
            best_pose=best[0] if best is not None else None,
            terminal_violations=tuple(terminal),
            outputs=outputs,
        )


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------

SimState = Simulator


def advance_cycle(state: Simulator):
    """Advance exactly one cycle; returns ``(state, events)``."""
    events = state.step(1)
    return state, events


def run_simulation(
    config: SystemConfig,
    graph: TaskGraph,
    goals: GoalSpec | None = None,
    seed: int | None = None,
    **kwargs,
) -> SimReport:
    """Run until every task completes or the cycle cap is hit.

    Raises :class:`MappingInfeasible` when the tasks cannot all be resident
    at start. A capped run returns a report flagged ``incomplete``.
    """
    sim = Simulator(config, graph, goals, seed, **kwargs)
    return sim.run()
