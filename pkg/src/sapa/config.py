"""System configuration and the line-oriented ``key = value`` loader."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from fractions import Fraction

from .cores import DEFAULT_MODES, ModeTable, PEMode
from .errors import InvalidValue, MalformedConfig

PORTS = ("N", "E", "S", "W")
ROUTING_POLICIES = ("deterministic", "adaptive")
REHEARSAL_MODES = ("off", "on", "keep")
WORKLOADS = ("none", "sa-match")


@dataclass(frozen=True)
class WorkloadConfig:
    kind: str = "sa-match"
    image_width: int = 64
    image_height: int = 64
    template_size: int = 16
    noise: float = 0.1
    chains: int = 8
    confidence: float = 0.9
    clutter: int = 1
    max_iters: int = 50_000
    exchange_period: int = 50


@dataclass(frozen=True)
class SystemConfig:
    mesh_width: int = 8
    mesh_height: int = 8
    epoch_length: int = 10_000
    mode_table: tuple[PEMode, ...] = DEFAULT_MODES
    flit_bytes: int = 16
    e_flit_hop: Fraction = Fraction(1, 10)
    e_mem_access: Fraction = Fraction(1, 2)
    migration_drain_cost: int = 100
    migration_restore_cost: int = 100
    # ((x, y), port, cycle)
    fault_schedule: tuple[tuple[tuple[int, int], str, int], ...] = ()
    seed: int = 0
    max_cycles: int = 50_000_000
    routing: str = "adaptive"
    ewma_weight: Fraction = Fraction(1, 10)
    max_active_pes: int | None = None
    default_mode: str = "high"
    rehearsal: str = "off"
    epsilon: float = 0.1
    mem_tolerance: int = 0
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)

    def __post_init__(self):
        validate(self)

    @property
    def num_pes(self) -> int:
        return self.mesh_width * self.mesh_height

    @property
    def modes(self) -> ModeTable:
        table = self.__dict__.get("_modes")
        if table is None:
            table = ModeTable(self.mode_table)
            object.__setattr__(self, "_modes", table)
        return table

    @property
    def active_cap(self) -> int:
        return self.num_pes if self.max_active_pes is None else self.max_active_pes

    def coord(self, pe: int) -> tuple[int, int]:
        return pe % self.mesh_width, pe // self.mesh_width

    def pe_id(self, coord: tuple[int, int]) -> int:
        return coord[1] * self.mesh_width + coord[0]

    def with_(self, **changes) -> "SystemConfig":
        return replace(self, **changes)


def validate(cfg: SystemConfig) -> None:
    if cfg.mesh_width < 1:
        raise InvalidValue("mesh_width", "must be >= 1")
    if cfg.mesh_height < 1:
        raise InvalidValue("mesh_height", "must be >= 1")
    if cfg.epoch_length < 1:
        raise InvalidValue("epoch_length", "must be >= 1")
    if cfg.flit_bytes < 1:
        raise InvalidValue("flit_bytes", "must be >= 1")
    for key in ("e_flit_hop", "e_mem_access"):
        if getattr(cfg, key) < 0:
            raise InvalidValue(key, "energy constants must be >= 0")
    for key in ("migration_drain_cost", "migration_restore_cost"):
        if getattr(cfg, key) < 0:
            raise InvalidValue(key, "must be >= 0")
    if not (0 <= cfg.seed < 2**64):
        raise InvalidValue("seed", "must be a 64-bit unsigned integer")
    if cfg.max_cycles < 1:
        raise InvalidValue("max_cycles", "must be >= 1")
    if cfg.routing not in ROUTING_POLICIES:
        raise InvalidValue("routing", f"expected one of {ROUTING_POLICIES}")
    if not (0 < cfg.ewma_weight <= 1):
        raise InvalidValue("ewma", "must lie in (0, 1]")
    if cfg.max_active_pes is not None and not (1 <= cfg.max_active_pes <= cfg.num_pes):
        raise InvalidValue("max_active_pes", "must lie in [1, mesh size]")
    if not cfg.mode_table:
        raise InvalidValue("mode_table", "at least one mode is required")
    try:
        table = ModeTable(cfg.mode_table)
    except ValueError as exc:
        raise InvalidValue("mode_table", str(exc)) from None
    if cfg.default_mode not in table:
        raise InvalidValue("default_mode", f"unknown mode {cfg.default_mode!r}")
    if table[cfg.default_mode].is_sleep:
        raise InvalidValue("default_mode", "tasks cannot start in a sleep mode")
    if cfg.rehearsal not in REHEARSAL_MODES:
        raise InvalidValue("rehearsal", f"expected one of {REHEARSAL_MODES}")
    if not (0.0 <= cfg.epsilon <= 1.0):
        raise InvalidValue("ns.epsilon", "must lie in [0, 1]")
    if cfg.mem_tolerance < 0:
        raise InvalidValue("mem.tolerance", "must be >= 0")
    for (x, y), port, cycle in cfg.fault_schedule:
        if not (0 <= x < cfg.mesh_width and 0 <= y < cfg.mesh_height) or port not in PORTS:
            raise InvalidValue("fault", f"no link {x},{y},{port}")
        if cycle < 0:
            raise InvalidValue("fault", "cycle must be >= 0")
    w = cfg.workload
    if w.kind not in WORKLOADS:
        raise InvalidValue("workload", f"expected one of {WORKLOADS}")
    if w.image_width < 1 or w.image_height < 1:
        raise InvalidValue("sa.image", "must be positive")
    if w.template_size < 1:
        raise InvalidValue("sa.template", "must be positive")
    if w.noise < 0:
        raise InvalidValue("sa.noise", "must be >= 0")
    if w.chains < 1:
        raise InvalidValue("sa.chains", "must be >= 1")
    if not (0.0 < w.confidence <= 1.0):
        raise InvalidValue("sa.confidence", "must lie in (0, 1]")
    if w.clutter < 0:
        raise InvalidValue("sa.clutter", "must be >= 0")
    if w.max_iters < 0:
        raise InvalidValue("sa.max_iters", "must be >= 0")
    if w.exchange_period < 1:
        raise InvalidValue("sa.exchange_period", "must be >= 1")


_DIMS = re.compile(r"^\s*(-?\d+)\s*[xX]\s*(-?\d+)\s*$")
_FAULT = re.compile(r"^\s*(\d+)\s*,\s*(\d+)\s*,\s*([NESWnesw])\s*@\s*(\d+)\s*$")


def _dims(key, value, line, path):
    m = _DIMS.match(value)
    if not m:
        raise MalformedConfig(f"{key}: expected WxH, got {value!r}", line, path)
    return int(m.group(1)), int(m.group(2))


def _int(key, value, line, path):
    try:
        return int(value.replace("_", ""))
    except ValueError:
        raise MalformedConfig(f"{key}: expected an integer, got {value!r}", line, path) from None


def _float(key, value, line, path):
    try:
        return float(value)
    except ValueError:
        raise MalformedConfig(f"{key}: expected a number, got {value!r}", line, path) from None


def _frac(key, value, line, path):
    try:
        return Fraction(value.strip())
    except (ValueError, ZeroDivisionError):
        raise MalformedConfig(f"{key}: expected a number, got {value!r}", line, path) from None


_SYSTEM_INT = {
    "epoch_length": "epoch_length",
    "flit_bytes": "flit_bytes",
    "migration_drain_cost": "migration_drain_cost",
    "migration_restore_cost": "migration_restore_cost",
    "seed": "seed",
    "max_cycles": "max_cycles",
    "max_active_pes": "max_active_pes",
    "mem.tolerance": "mem_tolerance",
}
_SYSTEM_FRAC = {"e_flit_hop": "e_flit_hop", "e_mem_access": "e_mem_access", "ewma": "ewma_weight"}
_SYSTEM_STR = {"routing": "routing", "noc.routing": "routing", "default_mode": "default_mode", "rehearsal": "rehearsal"}
_WORK_INT = {
    "sa.chains": "chains",
    "sa.clutter": "clutter",
    "sa.max_iters": "max_iters",
    "sa.exchange_period": "exchange_period",
}
_WORK_FLOAT = {"sa.noise": "noise", "sa.confidence": "confidence"}


def _parse(text: str, path: str | None, modes: dict[str, PEMode]):
    sys_kw: dict = {}
    work_kw: dict = {}
    faults = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedConfig(f"expected 'key = value', got {line!r}", lineno, path)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise MalformedConfig(f"empty key or value in {line!r}", lineno, path)
        if key == "mesh":
            sys_kw["mesh_width"], sys_kw["mesh_height"] = _dims(key, value, lineno, path)
        elif key in ("mesh_width", "mesh_height"):
            sys_kw[key] = _int(key, value, lineno, path)
        elif key in _SYSTEM_INT:
            sys_kw[_SYSTEM_INT[key]] = _int(key, value, lineno, path)
        elif key in _SYSTEM_FRAC:
            sys_kw[_SYSTEM_FRAC[key]] = _frac(key, value, lineno, path)
        elif key in _SYSTEM_STR:
            sys_kw[_SYSTEM_STR[key]] = value
        elif key == "ns.epsilon":
            sys_kw["epsilon"] = _float(key, value, lineno, path)
        elif key == "fault":
            m = _FAULT.match(value)
            if not m:
                raise MalformedConfig(f"fault: expected 'x,y,PORT@cycle', got {value!r}", lineno, path)
            faults.append(((int(m.group(1)), int(m.group(2))), m.group(3).upper(), int(m.group(4))))
        elif key.startswith("mode."):
            name = key[5:]
            parts = [p.strip() for p in value.split(",")]
            if not name or len(parts) != 4:
                raise MalformedConfig(f"{key}: expected ipc,e_active,e_idle,transition_latency", lineno, path)
            try:
                modes[name] = PEMode(
                    name,
                    _frac(key, parts[0], lineno, path),
                    _frac(key, parts[1], lineno, path),
                    _frac(key, parts[2], lineno, path),
                    _int(key, parts[3], lineno, path),
                )
            except ValueError as exc:
                raise InvalidValue(key, str(exc)) from None
        elif key == "workload":
            work_kw["kind"] = value
        elif key == "sa.image":
            work_kw["image_width"], work_kw["image_height"] = _dims(key, value, lineno, path)
        elif key == "sa.template":
            w, h = _dims(key, value, lineno, path)
            if w != h:
                raise InvalidValue("sa.template", "templates are square")
            work_kw["template_size"] = w
        elif key in _WORK_INT:
            work_kw[_WORK_INT[key]] = _int(key, value, lineno, path)
        elif key in _WORK_FLOAT:
            work_kw[_WORK_FLOAT[key]] = _float(key, value, lineno, path)
        else:
            raise MalformedConfig(f"unknown key {key!r}", lineno, path)
    return sys_kw, work_kw, faults


def load_config(text: str, path: str | None = None) -> SystemConfig:
    """Parse a configuration document; absent keys keep their defaults."""
    modes = {m.name: m for m in DEFAULT_MODES}
    sys_kw, work_kw, faults = _parse(text, path, modes)
    return SystemConfig(
        **sys_kw,
        mode_table=tuple(modes.values()),
        fault_schedule=tuple(faults),
        workload=WorkloadConfig(**work_kw),
    )


def override(cfg: SystemConfig, key: str, value) -> SystemConfig:
    """Copy of ``cfg`` with one document key set, e.g. ``sa.confidence``."""
    modes = {m.name: m for m in cfg.mode_table}
    sys_kw, work_kw, faults = _parse(f"{key} = {value}", None, modes)
    if key.startswith("mode."):
        sys_kw["mode_table"] = tuple(modes.values())
    if faults:
        sys_kw["fault_schedule"] = cfg.fault_schedule + tuple(faults)
    return replace(cfg, **sys_kw, workload=replace(cfg.workload, **work_kw))
