"""CSV emission and the knob sweep harness."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import Sequence

from .config import SystemConfig, override
from .kernel import SimReport, run_simulation
from .ns import GoalSpec
from .workloads import TaskGraph, build_task_graph

REPORT_HEADER = ("cycle_total", "energy_total", "mean_power", "final_accuracy")
EPOCH_HEADER = (
    "epoch",
    "power",
    "mem.fresh",
    "mem.stale",
    "mem.fetches",
    "mem.writes",
    "noc.flit_hops",
    "noc.delivered",
    "noc.dropped",
    "noc.max_congestion",
    "noc.energy",
)
ACTION_HEADER = ("cycle", "action", "target", "value", "trigger")
SWEEP_HEADER = (
    "knob_value",
    "seed",
    "completion_cycle",
    "total_energy",
    "mean_power",
    "final_accuracy",
    "iterations",
)


def fmt(x) -> str:
    """Fixed six decimals, no exponent, rounded half-to-even from the exact value."""
    q = Fraction(x) if not isinstance(x, Fraction) else x
    n = round(q * 1_000_000)
    sign = "-" if n < 0 else ""
    n = abs(n)
    return f"{sign}{n // 1_000_000}.{n % 1_000_000:06d}"


def _write(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def report_row(report: SimReport) -> tuple[str, ...]:
    return (
        str(report.completion_cycle),
        fmt(report.total_energy),
        fmt(report.mean_power),
        fmt(report.final_accuracy),
    )


def epoch_rows(report: SimReport):
    for f in report.frames:
        yield (
            str(f.epoch),
            fmt(f.power),
            str(f.mem.fresh_reads),
            str(f.mem.stale_reads),
            str(f.mem.parent_fetches),
            str(f.mem.writes),
            str(f.noc.flit_hops),
            str(f.noc.delivered),
            str(f.noc.dropped),
            fmt(f.max_congestion),
            fmt(f.noc_energy),
        )


def emit_report_csv(report: SimReport, path: str) -> None:
    """Write the one-row summary to ``path`` and the epoch series beside it."""
    _write(path, REPORT_HEADER, [report_row(report)])
    _write(f"{path}.epochs.csv", EPOCH_HEADER, epoch_rows(report))


def emit_action_log(report: SimReport, path: str) -> None:
    _write(path, ACTION_HEADER, ([str(v) for v in entry] for entry in report.action_log))


def graph_for(config: SystemConfig) -> TaskGraph:
    w = config.workload
    if w.kind == "sa-match":
        return build_task_graph(w.chains, w.exchange_period)
    return TaskGraph()


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    knob: str
    values: tuple[str, ...]
    seeds: int
    config_path: str | None = None
    goals_path: str | None = None

    def __post_init__(self):
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.seeds < 1:
            raise ValueError("sweep needs at least one seed")


def parse_values(text: str) -> tuple[str, ...]:
    """``lo:hi:step`` (inclusive, exact decimal steps) or a comma list."""
    text = text.strip()
    if text.count(":") == 2:
        try:
            lo, hi, step = (Decimal(p) for p in text.split(":"))
        except InvalidOperation:
            raise ValueError(f"bad range {text!r}") from None
        if step <= 0 or hi < lo:
            raise ValueError(f"empty range {text!r}")
        n = int((hi - lo) / step) + 1
        return tuple(str(lo + i * step) for i in range(n))
    vals = tuple(v.strip() for v in text.split(",") if v.strip())
    if not vals:
        raise ValueError("no sweep values given")
    return vals


@dataclass(frozen=True)
class SweepRow:
    knob_value: str
    seed: int
    report: SimReport


def sweep_tradeoff(
    config: SystemConfig,
    goals: GoalSpec | None,
    knob: str,
    values: Sequence[str],
    seeds: int,
    master_seed: int = 0,
    max_cycles: int | None = None,
) -> list[SweepRow]:
    """Run every (value, seed) point; seed ``j`` of each point is ``master_seed + j``."""
    rows = []
    for value in values:
        cfg = override(config, knob, value)
        graph = graph_for(cfg)
        for j in range(seeds):
            seed = master_seed + j
            rep = run_simulation(cfg, graph, goals, seed, max_cycles=max_cycles)
            rows.append(SweepRow(str(value), seed, rep))
    return rows


def _sort_key(value: str):
    try:
        return (0, Decimal(value), value)
    except InvalidOperation:
        return (1, Decimal(0), value)


def sweep_table(rows: Sequence[SweepRow]) -> list[tuple[str, ...]]:
    """Data rows sorted by (value, seed), each value followed by its mean row."""
    by_value: dict[str, list[SweepRow]] = {}
    for r in rows:
        by_value.setdefault(r.knob_value, []).append(r)
    out = []
    for value in sorted(by_value, key=_sort_key):
        group = sorted(by_value[value], key=lambda r: r.seed)
        for r in group:
            rep = r.report
            out.append(
                (
                    value,
                    str(r.seed),
                    str(rep.completion_cycle),
                    fmt(rep.total_energy),
                    fmt(rep.mean_power),
                    fmt(rep.final_accuracy),
                    str(rep.iterations),
                )
            )
        n = len(group)
        mean = lambda f: sum((Fraction(f(r.report)) for r in group), Fraction(0)) / n  # noqa: E731
        out.append(
            (
                value,
                "mean",
                fmt(mean(lambda p: p.completion_cycle)),
                fmt(mean(lambda p: p.total_energy)),
                fmt(mean(lambda p: p.mean_power)),
                fmt(mean(lambda p: p.final_accuracy)),
                fmt(mean(lambda p: p.iterations)),
            )
        )
    return out


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    w.writerows(sweep_table(rows))
    return buf.getvalue()
