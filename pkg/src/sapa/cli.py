"""Command-line entry point: ``run``, ``sweep`` and ``oracle``."""

from __future__ import annotations

import argparse
import sys

from .config import SystemConfig, load_config
from .errors import SapaError
from .kernel import run_simulation
from .ns import GoalSpec, parse_goal_spec
from .report import (
    SweepSpec,
    emit_action_log,
    emit_report_csv,
    graph_for,
    parse_values,
    sweep_csv,
    sweep_tradeoff,
)
from .workloads import exhaustive_search, generate_scene

EXIT_OK, EXIT_ERROR, EXIT_INCOMPLETE = 0, 1, 2


def _read(path: str) -> str:
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise SapaError(f"{path}: {exc.strerror or exc}") from None


def _named(path: str, exc: Exception) -> str:
    msg = str(exc)
    return msg if path in msg else f"{path}: {msg}"


def _load_inputs(args) -> tuple[SystemConfig, GoalSpec]:
    config = SystemConfig()
    if args.config:
        try:
            config = load_config(_read(args.config), args.config)
        except SapaError as exc:
            raise SapaError(_named(args.config, exc)) from None
    goals = GoalSpec()
    if args.goals:
        try:
            goals = parse_goal_spec(_read(args.goals), args.goals)
        except SapaError as exc:
            raise SapaError(_named(args.goals, exc)) from None
    return config, goals


def cmd_run(args) -> int:
    config, goals = _load_inputs(args)
    seed = config.seed if args.seed is None else args.seed
    report = run_simulation(config, graph_for(config), goals, seed, max_cycles=args.max_cycles)
    emit_report_csv(report, args.out)
    emit_action_log(report, f"{args.out}.actions.csv")
    if report.incomplete:
        print(f"run stopped at the cycle cap ({report.completion_cycle}); report flagged incomplete", file=sys.stderr)
        return EXIT_INCOMPLETE
    return EXIT_OK


def cmd_sweep(args) -> int:
    config, goals = _load_inputs(args)
    try:
        values = parse_values(args.values)
    except ValueError as exc:
        raise SapaError(f"--values: {exc}") from None
    spec = SweepSpec(args.knob, values, args.seeds, args.config, args.goals)
    master = config.seed if args.seed is None else args.seed
    rows = sweep_tradeoff(config, goals, spec.knob, spec.values, spec.seeds, master, args.max_cycles)
    text = sweep_csv(rows)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_INCOMPLETE if any(r.report.incomplete for r in rows) else EXIT_OK


def cmd_oracle(args) -> int:
    config, _ = _load_inputs(args)
    w = config.workload
    seed = config.seed if args.seed is None else args.seed
    noise = w.noise if args.noise is None else args.noise
    clutter = w.clutter if args.clutter is None else args.clutter
    scene = generate_scene(w.image_width, w.image_height, w.template_size, noise, seed, clutter)
    (tx, ty), conf = exhaustive_search(scene)
    print("tx,ty,confidence,true_tx,true_ty")
    print(f"{tx},{ty},{conf!r},{scene.true_pose[0]},{scene.true_pose[1]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sapa", description="Self-adaptive many-core simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_out):
        sp.add_argument("--config", help="configuration document")
        sp.add_argument("--goals", help="goal specification")
        sp.add_argument("--seed", type=int, help="master seed (default: config seed)")
        sp.add_argument("--max-cycles", type=int, dest="max_cycles", help="override the cycle cap")
        sp.add_argument("--out", required=need_out, help="output CSV path")

    run = sub.add_parser("run", help="run one simulation")
    common(run, True)
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="sweep one knob over values and seeds")
    common(sw, False)
    sw.add_argument("--knob", required=True)
    sw.add_argument("--values", required=True, help="lo:hi:step or v1,v2,...")
    sw.add_argument("--seeds", type=int, default=20)
    sw.set_defaults(func=cmd_sweep)

    orc = sub.add_parser("oracle", help="exhaustive template-matching optimum for a scene")
    orc.add_argument("--config")
    orc.add_argument("--goals", help=argparse.SUPPRESS)
    orc.add_argument("--seed", type=int)
    orc.add_argument("--noise", type=float, help="override sa.noise")
    orc.add_argument("--clutter", type=int, help="override sa.clutter")
    orc.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SapaError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
