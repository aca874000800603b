"""Control layer: goal DSL, monitoring rules, telemetry, bandit and rule engine."""

from __future__ import annotations

import itertools
import math
import random
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import Sequence

from .errors import EmptyKnobRange, GoalSyntaxError, InvalidValue, UnknownArm, UnknownKey

OBJECTIVES = ("minimize energy", "minimize time", "maximize accuracy")
CONSTRAINTS = ("power", "deadline", "accuracy")
# knobs the simulator knows how to turn
KNOWN_KNOBS = ("sa.confidence", "mem.tolerance", "noc.routing")

# ---------------------------------------------------------------------------
# Goal specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GoalSpec:
    power_budget: Fraction | None = None
    deadline: int | None = None
    accuracy_min: float | None = None
    objective: str = "minimize energy"
    knobs: dict = field(default_factory=dict)
    priority: tuple[str, ...] = ()
    # (cycle, constraint, new value) changes applied during the run
    schedule: tuple[tuple[int, str, object], ...] = ()

    def __post_init__(self):
        if self.accuracy_min is not None and not (0.0 <= self.accuracy_min <= 1.0):
            raise InvalidValue("accuracy_min", "must lie in [0, 1]")
        if self.power_budget is not None and self.power_budget < 0:
            raise InvalidValue("power_budget", "must be >= 0")
        if self.deadline is not None and self.deadline < 1:
            raise InvalidValue("deadline", "must be >= 1")
        if self.objective not in OBJECTIVES:
            raise InvalidValue("objective", f"expected one of {OBJECTIVES}")
        for name, values in self.knobs.items():
            if not values:
                raise EmptyKnobRange(name)

    def constraints(self) -> tuple[str, ...]:
        present = [c for c in CONSTRAINTS if self._value(c) is not None]
        present += [c for _, c, _ in self.schedule if c not in present]
        ordered = [c for c in self.priority if c in present]
        return tuple(ordered + [c for c in present if c not in ordered])

    def _value(self, name: str):
        return {"power": self.power_budget, "deadline": self.deadline, "accuracy": self.accuracy_min}[name]

    def with_constraint(self, name: str, value) -> "GoalSpec":
        from dataclasses import replace

        key = {"power": "power_budget", "deadline": "deadline", "accuracy": "accuracy_min"}[name]
        return replace(self, **{key: value})


_GOAL_KEYS = {"power_budget": "power", "deadline": "deadline", "accuracy_min": "accuracy"}
_RANGE = re.compile(r"^(\S+)\s*\.\.\s*(\S+)\s+step\s+(\S+)$")
_SET = re.compile(r"^\{(.*)\}$")


def _knob_value(token: str):
    try:
        d = Decimal(token)
    except InvalidOperation:
        return token
    return int(d) if d == d.to_integral_value() and "." not in token else float(d)


def _knob_values(spec: str, name: str, lineno: int):
    m = _RANGE.match(spec)
    if m:
        try:
            lo, hi, step = (Decimal(g) for g in m.groups())
        except InvalidOperation:
            raise GoalSyntaxError(f"knob {name}: bad range {spec!r}", lineno) from None
        if step <= 0:
            raise GoalSyntaxError(f"knob {name}: step must be positive", lineno)
        if hi < lo:
            raise EmptyKnobRange(f"{name}: {lo}..{hi} is empty")
        n = int((hi - lo) / step) + 1
        integral = all("." not in g and "e" not in g.lower() for g in m.groups())
        vals = [lo + i * step for i in range(n)]
        return tuple(int(v) if integral else float(v) for v in vals)
    m = _SET.match(spec)
    if m:
        items = [t.strip() for t in m.group(1).split(",") if t.strip()]
        if not items:
            raise EmptyKnobRange(f"{name}: empty value set")
        vals = [_knob_value(t) for t in items]
        nums = sorted(v for v in vals if not isinstance(v, str))
        strs = sorted(v for v in vals if isinstance(v, str))
        return tuple(dict.fromkeys(nums + strs))
    raise GoalSyntaxError(f"knob {name}: expected 'lo..hi step s' or '{{v1,v2,...}}'", lineno)


def _goal_value(key: str, token: str, lineno: int):
    try:
        if key == "deadline":
            return int(token.replace("_", ""))
        if key == "power_budget":
            return Fraction(token)
        return float(token)
    except (ValueError, ZeroDivisionError):
        raise GoalSyntaxError(f"goal {key}: expected a number, got {token!r}", lineno) from None


def parse_goal_spec(text: str, path: str | None = None) -> GoalSpec:
    """Parse the goal DSL.

    Lines: ``goal <name> <value> [at <cycle>]``, ``objective <...>``,
    ``knob <name> <lo>..<hi> step <s>`` or ``knob <name> {a,b,...}``,
    ``priority <c1>,<c2>,...``. ``#`` starts a comment. A ``goal`` line with
    ``at`` schedules a change of that constraint from the given cycle on.
    """
    kw: dict = {}
    knobs: dict = {}
    schedule = []
    priority: list[str] = []
    order: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        rest = rest.strip()
        try:
            if head == "goal":
                parts = rest.split()
                if len(parts) not in (2, 4) or (len(parts) == 4 and parts[2] != "at"):
                    raise GoalSyntaxError("expected 'goal <name> <value> [at <cycle>]'", lineno, path)
                key = parts[0]
                if key not in _GOAL_KEYS:
                    raise UnknownKey(f"line {lineno}: unknown goal {key!r}")
                value = _goal_value(key, parts[1], lineno)
                if key == "accuracy_min" and not (0.0 <= value <= 1.0):
                    raise InvalidValue("accuracy_min", "must lie in [0, 1]")
                if len(parts) == 4:
                    try:
                        at = int(parts[3].replace("_", ""))
                    except ValueError:
                        raise GoalSyntaxError(f"bad cycle {parts[3]!r}", lineno, path) from None
                    schedule.append((at, _GOAL_KEYS[key], value))
                else:
                    kw[key] = value
                if _GOAL_KEYS[key] not in order:
                    order.append(_GOAL_KEYS[key])
            elif head == "objective":
                obj = " ".join(rest.split())
                if obj not in OBJECTIVES:
                    raise GoalSyntaxError(f"unknown objective {rest!r}", lineno, path)
                kw["objective"] = obj
            elif head == "knob":
                name, _, spec = rest.partition(" ")
                if not name or not spec.strip():
                    raise GoalSyntaxError("expected 'knob <name> <values>'", lineno, path)
                if name not in KNOWN_KNOBS:
                    raise UnknownKey(f"line {lineno}: unknown knob {name!r}")
                knobs[name] = _knob_values(spec.strip(), name, lineno)
            elif head == "priority":
                items = [t.strip() for t in rest.split(",") if t.strip()]
                for item in items:
                    if item not in CONSTRAINTS:
                        raise UnknownKey(f"line {lineno}: unknown constraint {item!r}")
                priority = items
            else:
                raise GoalSyntaxError(f"unknown directive {head!r}", lineno, path)
        except GoalSyntaxError as exc:
            if exc.path is None and path is not None:
                raise GoalSyntaxError(exc.message, lineno, path) from None
            raise
    schedule.sort(key=lambda s: s[0])
    return GoalSpec(knobs=knobs, priority=tuple(priority or order), schedule=tuple(schedule), **kw)


# ---------------------------------------------------------------------------
# Monitoring plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Check:
    expr: str
    comparator: str  # "<=" or ">="
    threshold: object
    name: str

    def holds(self, measured) -> bool:
        if measured is None:
            return True
        return measured <= self.threshold if self.comparator == "<=" else measured >= self.threshold


@dataclass(frozen=True)
class MonitoringPlan:
    per_epoch: tuple[Check, ...] = ()
    terminal: tuple[Check, ...] = ()
    knob_floor: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.per_epoch and not self.terminal


def synthesize_rules(goals: GoalSpec, config=None) -> MonitoringPlan:
    per, term, floor = [], [], {}
    for name in goals.constraints():
        value = goals._value(name)
        if value is None:
            continue  # only scheduled; the plan is rebuilt when it takes effect
        if name == "power":
            per.append(Check("power", "<=", value, "power"))
        elif name == "deadline":
            per.append(Check("projected_completion", "<=", value, "deadline-predicted"))
            term.append(Check("completion_cycle", "<=", value, "deadline"))
        elif name == "accuracy":
            per.append(Check("accuracy", ">=", value, "accuracy"))
            term.append(Check("final_accuracy", ">=", value, "accuracy"))
            if "sa.confidence" in goals.knobs:
                floor["sa.confidence"] = value
    return MonitoringPlan(tuple(per), tuple(term), floor)


# ---------------------------------------------------------------------------
# Telemetry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PEFrame:
    pe: int
    active: bool
    mode: str
    active_cycles: int
    idle_cycles: int
    retired: int
    energy: Fraction
    task: int | None
    # fraction of the resident task's work done, None when unknown
    progress: float | None
    remaining: int | None


@dataclass(frozen=True)
class TelemetryFrame:
    epoch: int
    start: int  # window is (start, end]
    end: int
    energy: Fraction
    power: Fraction
    pe_energy: Fraction
    mem_energy: Fraction
    noc_energy: Fraction
    pes: tuple[PEFrame, ...]
    mem: object  # MemCounters delta
    noc: object  # NocCounters delta
    max_congestion: float
    progress: float
    progress_delta: float
    accuracy: float | None
    app_accuracy: float
    knobs: dict

    @property
    def cycles(self) -> int:
        return self.end - self.start

    def measured(self, expr: str):
        if expr == "power":
            return self.power
        if expr == "projected_completion":
            if self.progress >= 1.0:
                return self.end
            return math.inf if self.progress <= 0 else self.end / self.progress
        if expr == "accuracy":
            return self.accuracy
        raise KeyError(expr)


@dataclass(frozen=True)
class Violation:
    name: str
    measured: object
    threshold: object


def check_constraints(frame: TelemetryFrame, plan: MonitoringPlan) -> list[Violation]:
    out = []
    for chk in plan.per_epoch:
        value = frame.measured(chk.expr)
        if not chk.holds(value):
            out.append(Violation(chk.name, value, chk.threshold))
    return out


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SetPEMode:
    pe: int
    mode: str
    trigger: str = "policy"

    def log_fields(self):
        return "SetPEMode", self.pe, self.mode


@dataclass(frozen=True)
class ActivatePE:
    pe: int
    trigger: str = "policy"

    def log_fields(self):
        return "ActivatePE", self.pe, ""


@dataclass(frozen=True)
class DeactivatePE:
    pe: int
    trigger: str = "policy"

    def log_fields(self):
        return "DeactivatePE", self.pe, ""


@dataclass(frozen=True)
class MigrateTask:
    task: int
    dst: int
    trigger: str = "policy"

    def log_fields(self):
        return "MigrateTask", self.task, self.dst


@dataclass(frozen=True)
class SetRoutingPolicy:
    policy: str
    trigger: str = "policy"

    def log_fields(self):
        return "SetRoutingPolicy", "noc", self.policy


@dataclass(frozen=True)
class SetStalenessTolerance:
    value: int
    trigger: str = "policy"

    def log_fields(self):
        return "SetStalenessTolerance", "mem", self.value


@dataclass(frozen=True)
class SetKnob:
    name: str
    value: object
    trigger: str = "policy"

    def log_fields(self):
        return "SetKnob", self.name, self.value


@dataclass(frozen=True)
class BudgetInfeasible:
    """Logged event: the power budget cannot be met by any further action."""

    budget: object
    trigger: str = "power"

    def log_fields(self):
        return "BudgetInfeasible", "ns", self.budget


ReconfigAction = SetPEMode | ActivatePE | DeactivatePE | MigrateTask | SetRoutingPolicy | SetStalenessTolerance | SetKnob


def knob_action(name: str, value, trigger: str = "policy"):
    if name == "mem.tolerance":
        return SetStalenessTolerance(int(value), trigger)
    if name == "noc.routing":
        return SetRoutingPolicy(str(value), trigger)
    return SetKnob(name, value, trigger)


# ---------------------------------------------------------------------------
# Epsilon-greedy configuration search
# ---------------------------------------------------------------------------


@dataclass
class PolicyState:
    knob_names: tuple[str, ...]
    arms: list[tuple]
    means: list[float]
    counts: list[int]
    epsilon: float = 0.1
    rng_name: str = "ns.bandit"
    current: int | None = None
    metric_abs_sum: float = 0.0
    metric_n: int = 0

    @property
    def pulls(self) -> int:
        return sum(self.counts)


def make_policy(knobs: dict, epsilon: float = 0.1, rng_name: str = "ns.bandit") -> PolicyState:
    names = tuple(sorted(knobs))
    arms = list(itertools.product(*(knobs[n] for n in names))) if names else []
    return PolicyState(names, arms, [0.0] * len(arms), [0] * len(arms), epsilon, rng_name)


def arm_index(policy: PolicyState, arm) -> int:
    if isinstance(arm, int) and not isinstance(arm, bool):
        if 0 <= arm < len(policy.arms):
            return arm
        raise UnknownArm(arm)
    try:
        return policy.arms.index(tuple(arm))
    except (ValueError, TypeError):
        raise UnknownArm(arm) from None


def update_policy(policy: PolicyState, arm, reward: float) -> PolicyState:
    i = arm_index(policy, arm)
    if not math.isfinite(reward):
        raise ValueError("reward must be finite")
    policy.counts[i] += 1
    policy.means[i] += (reward - policy.means[i]) / policy.counts[i]
    return policy


def select_arm(policy: PolicyState, rng: random.Random, allowed: Sequence[int] | None = None) -> int:
    """Untried arms first (lowest index), then epsilon-greedy.

    The random draw happens on every call past the warm-up so the stream
    position does not depend on the reward values.
    """
    idx = list(range(len(policy.arms))) if allowed is None else list(allowed)
    if not idx:
        raise UnknownArm("no arm available")
    for i in idx:
        if policy.counts[i] == 0:
            return i
    u = rng.random()
    if u < policy.epsilon:
        return idx[rng.randrange(len(idx))]
    best = idx[0]
    for i in idx[1:]:
        if policy.means[i] > policy.means[best]:
            best = i
    return best


def objective_metric(frame: TelemetryFrame, objective: str) -> float:
    """Per-epoch metric to minimize."""
    if objective == "minimize energy":
        return float(frame.energy)
    if objective == "minimize time":
        return -frame.progress_delta
    return -frame.app_accuracy


def epoch_reward(policy: PolicyState, frame: TelemetryFrame, objective: str, n_violations: int) -> float:
    metric = objective_metric(frame, objective)
    policy.metric_abs_sum += abs(metric)
    policy.metric_n += 1
    penalty = 10.0 * policy.metric_abs_sum / policy.metric_n
    return -metric - penalty * n_violations


# ---------------------------------------------------------------------------
# Rule engine
# ---------------------------------------------------------------------------


@dataclass
class DecisionContext:
    """System facts the rule table needs beyond the frame."""

    modes: object  # ModeTable
    rng: random.Random
    mem_tolerance: int = 0
    active_cap: int = 1 << 30
    previous_violations: tuple[str, ...] = ()
    distance: object = None  # callable(pe_a, pe_b) -> hops
    knob_floor: dict = field(default_factory=dict)


def _pe_power(u: float, mode) -> float:
    return u * float(mode.e_active) + (1.0 - u) * float(mode.e_idle)


def _power_rule(frame, ctx, budget, actions, touched) -> None:
    modes = ctx.modes
    cycles = max(frame.cycles, 1)
    util = {}
    proj = {}
    for p in frame.pes:
        m = modes[p.mode]
        u = p.active_cycles / cycles
        util[p.pe] = u
        proj[p.pe] = _pe_power(u, m)
    other = float(frame.power) - sum(proj.values())
    pending = {p.pe: modes[p.mode] for p in frame.pes}
    budget_f = float(budget)

    def total():
        return other + sum(proj.values())

    def floor_mode(p):
        if p.task is None:
            return modes.lowest
        awake = [m for m in modes if not m.is_sleep]
        return awake[0] if awake else modes.lowest

    while total() > budget_f:
        cands = [
            p
            for p in frame.pes
            if p.active and modes.index(pending[p.pe]) > modes.index(floor_mode(p))
        ]
        if not cands:
            break
        victim = max(cands, key=lambda p: (proj[p.pe], -p.pe))
        lower = modes.lower(pending[victim.pe])
        pending[victim.pe] = lower
        proj[victim.pe] = _pe_power(util[victim.pe], lower)
    for p in frame.pes:
        if pending[p.pe].name != p.mode:
            actions.append(SetPEMode(p.pe, pending[p.pe].name, "power"))
            touched.add(p.pe)
    if total() <= budget_f:
        return
    if "power" not in ctx.previous_violations:
        return
    # still over budget for a second epoch: shrink the active set
    vacant = sorted(
        (p for p in frame.pes if p.active and p.task is None),
        key=lambda p: (p.progress if p.progress is not None else 0.0, p.pe),
    )
    sleep_idle = float(modes.lowest.e_idle)
    for p in vacant:
        if total() <= budget_f:
            break
        actions.append(DeactivatePE(p.pe, "power"))
        touched.add(p.pe)
        proj[p.pe] = sleep_idle
    if total() > budget_f and not vacant:
        actions.append(BudgetInfeasible(budget))


def _deadline_rule(frame, ctx, deadline, actions, touched) -> None:
    modes = ctx.modes
    cycles = max(frame.cycles, 1)
    lagging = []
    for p in frame.pes:
        if p.task is None or p.remaining is None or p.remaining <= 0:
            continue
        rate = p.retired / cycles
        finish = math.inf if rate <= 0 else frame.end + p.remaining / rate
        if finish > deadline:
            lagging.append(p)
    lagging.sort(key=lambda p: (p.progress if p.progress is not None else 0.0, p.pe))
    stuck = []
    for p in lagging:
        if p.pe in touched:
            continue
        higher = modes.higher(modes[p.mode])
        if higher is None:
            stuck.append(p)
            continue
        actions.append(SetPEMode(p.pe, higher.name, "deadline"))
        touched.add(p.pe)
    if stuck:
        n_active = sum(1 for p in frame.pes if p.active)
        sleeping = [p for p in frame.pes if not p.active]
        if sleeping and n_active < ctx.active_cap:
            near = stuck[0].pe
            dist = ctx.distance or (lambda a, b: abs(a - b))
            pick = min(sleeping, key=lambda p: (dist(p.pe, near), p.pe))
            actions.append(ActivatePE(pick.pe, "deadline"))


def _accuracy_rule(frame, ctx, goals, policy, actions) -> None:
    if ctx.mem_tolerance > 0:
        actions.append(SetStalenessTolerance(ctx.mem_tolerance - 1, "accuracy"))
    if "sa.confidence" in goals.knobs and policy is not None and policy.current is not None:
        vals = goals.knobs["sa.confidence"]
        k = policy.knob_names.index("sa.confidence")
        cur = policy.arms[policy.current][k]
        higher = [v for v in vals if v > cur]
        if higher:
            ctx.knob_floor["sa.confidence"] = max(ctx.knob_floor.get("sa.confidence", higher[0]), higher[0])
            actions.append(SetKnob("sa.confidence", higher[0], "accuracy"))


def allowed_arms(policy: PolicyState, floor: dict) -> list[int]:
    out = []
    for i, arm in enumerate(policy.arms):
        ok = True
        for name, lo in floor.items():
            if name in policy.knob_names and arm[policy.knob_names.index(name)] < lo:
                ok = False
        if ok:
            out.append(i)
    return out or list(range(len(policy.arms)))


def decide(
    frame: TelemetryFrame,
    violations: Sequence[Violation],
    policy: PolicyState | None,
    goals: GoalSpec,
    ctx: DecisionContext,
):
    """Rule table for hard constraints, else a bandit move over knob arms.

    Returns ``(actions, policy)``; nothing is applied here.
    """
    actions: list = []
    if policy is not None and policy.arms and policy.current is not None:
        update_policy(policy, policy.current, epoch_reward(policy, frame, goals.objective, len(violations)))
    names = {v.name for v in violations}
    touched: set[int] = set()
    for constraint in goals.constraints():
        if constraint == "power" and "power" in names:
            budget = next(v.threshold for v in violations if v.name == "power")
            _power_rule(frame, ctx, budget, actions, touched)
        elif constraint == "deadline" and "deadline-predicted" in names:
            deadline = next(v.threshold for v in violations if v.name == "deadline-predicted")
            _deadline_rule(frame, ctx, deadline, actions, touched)
        elif constraint == "accuracy" and "accuracy" in names:
            _accuracy_rule(frame, ctx, goals, policy, actions)
    if not violations and policy is not None and policy.arms:
        floor = dict(ctx.knob_floor)
        choice = select_arm(policy, ctx.rng, allowed_arms(policy, floor))
        old = policy.arms[policy.current] if policy.current is not None else None
        for k, name in enumerate(policy.knob_names):
            value = policy.arms[choice][k]
            if old is None or old[k] != value:
                actions.append(knob_action(name, value))
        policy.current = choice
    return actions, policy


# ---------------------------------------------------------------------------
# Rehearsal scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RehearsalResult:
    baseline: float
    candidate: float
    recommendation: str  # "adopt" or "keep"
    helper: int | None = None


def rehearsal_metric(mode, objective: str, trigger: str) -> float:
    """Score (higher is better) of running a work slice in ``mode``."""
    ipc = float(mode.ipc)
    if trigger == "power":
        return -float(mode.e_active)
    if trigger == "deadline" or objective in ("minimize time", "maximize accuracy"):
        return ipc
    return ipc / float(mode.e_active) if mode.e_active > 0 else 0.0


def score_rehearsal(current_mode, candidate_mode, objective: str, trigger: str, helper=None) -> RehearsalResult:
    base = rehearsal_metric(current_mode, objective, trigger)
    cand = rehearsal_metric(candidate_mode, objective, trigger)
    return RehearsalResult(base, cand, "adopt" if cand > base else "keep", helper)
