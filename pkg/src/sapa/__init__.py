"""Deterministic simulator of a self-adaptive many-core processor."""

from .config import SystemConfig, load_config
from .kernel import SimReport, Simulator, advance_cycle, run_simulation
from .ns import GoalSpec, parse_goal_spec
from .workloads import build_task_graph, generate_scene, sa_match

__all__ = [
    "GoalSpec",
    "SimReport",
    "Simulator",
    "SystemConfig",
    "advance_cycle",
    "build_task_graph",
    "generate_scene",
    "load_config",
    "parse_goal_spec",
    "run_simulation",
    "sa_match",
]
