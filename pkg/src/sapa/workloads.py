"""Template-matching workload: noisy scenes, NCC confidence, annealing chains.

The multi-start annealer is decomposed into ``P`` chain tasks plus one
coordinator so it can be mapped onto the simulated mesh.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    EmptyList,
    OutOfBounds,
    TemplateTooLarge,
    ZeroChains,
)
from .rng import np_stream, stream

INSTRUCTIONS_PER_ITERATION = 500
DEFAULT_EXCHANGE_PERIOD = 50
# pose (2 x int32) + confidence (float64)
EXCHANGE_RECORD_BYTES = 16

Pose = tuple[int, int]


# --------------------------------------------------------------------------
# Scenes
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scene:
    image: np.ndarray
    template: np.ndarray
    true_pose: Pose
    noise_sigma: float

    @property
    def pose_limits(self) -> Pose:
        """Largest valid (tx, ty)."""
        h, w = self.template.shape
        H, W = self.image.shape
        return W - w, H - h

    def patch(self, pose: Pose) -> np.ndarray:
        tx, ty = pose
        h, w = self.template.shape
        max_x, max_y = self.pose_limits
        if not (0 <= tx <= max_x and 0 <= ty <= max_y):
            raise OutOfBounds(f"pose {pose} places the template outside the image")
        return self.image[ty : ty + h, tx : tx + w]

    def confidence_map(self) -> np.ndarray:
        """Clipped NCC for every translation, indexed ``[ty, tx]``.

        Cached on first use; the scene is immutable so the cache never goes
        stale.
        """
        cached = self.__dict__.get("_cmap")
        if cached is None:
            cached = ncc_map(self.image, self.template)
            cached.setflags(write=False)
            object.__setattr__(self, "_cmap", cached)
        return cached


TEMPLATE_SOFTNESS = 0.25
CLUTTER_JITTER = 0.3


def _soft_ellipse(size: int, rx: float, ry: float, angle: float, softness: float) -> np.ndarray:
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size] - c
    u = (x * math.cos(angle) + y * math.sin(angle)) / rx
    v = (-x * math.sin(angle) + y * math.cos(angle)) / ry
    # signed distance to the rim, roughly in pixels
    d = (np.sqrt(u * u + v * v) - 1.0) * min(rx, ry)
    return 1.0 / (1.0 + np.exp(d / softness))


def _template_shape(size: int, seed: int) -> tuple[float, float, float]:
    rng = np_stream(seed, "scene.template")
    ry, rx = rng.uniform(0.3, 0.45, 2) * size
    return float(rx), float(ry), float(rng.uniform(0.0, math.pi))


def make_template(size: int, seed: int) -> np.ndarray:
    """Soft-edged ellipse with seeded radii and orientation.

    The soft rim gives the score landscape a graded basin around the true
    pose instead of a single-pixel spike.
    """
    rx, ry, angle = _template_shape(size, seed)
    return _soft_ellipse(size, rx, ry, angle, TEMPLATE_SOFTNESS)


def generate_scene(
    width: int = 64,
    height: int = 64,
    template_size: int = 16,
    noise_sigma: float = 0.1,
    seed: int = 0,
    clutter: int = 0,
) -> Scene:
    """Place the template at a seeded pose on a dark background and add noise.

    ``clutter`` adds that many distractors: ellipses with randomly perturbed
    radii and orientation, placed so they do not overlap the target or each
    other. They create local optima scoring well below the true match.
    """
    if template_size > width or template_size > height or template_size < 1:
        raise TemplateTooLarge(
            f"template {template_size}x{template_size} does not fit a {width}x{height} image"
        )
    if clutter < 0:
        raise ValueError("clutter must be >= 0")
    ts = template_size
    template = make_template(ts, seed)
    pose_rng = stream(seed, "scene.pose")
    tx = pose_rng.randint(0, width - ts)
    ty = pose_rng.randint(0, height - ts)
    image = np.zeros((height, width))
    image[ty : ty + ts, tx : tx + ts] = template
    if clutter:
        rx, ry, angle = _template_shape(ts, seed)
        crng = stream(seed, "scene.clutter")
        boxes = [(tx, ty)]
        for _ in range(clutter):
            for _attempt in range(200):
                x, y = crng.randint(0, width - ts), crng.randint(0, height - ts)
                if all(abs(x - bx) >= ts or abs(y - by) >= ts for bx, by in boxes):
                    break
            else:
                continue  # image too crowded for another distractor
            boxes.append((x, y))
            jx = crng.uniform(1 - CLUTTER_JITTER, 1 + CLUTTER_JITTER)
            jy = crng.uniform(1 - CLUTTER_JITTER, 1 + CLUTTER_JITTER)
            ja = crng.uniform(-CLUTTER_JITTER, CLUTTER_JITTER) * 2
            image[y : y + ts, x : x + ts] = _soft_ellipse(ts, rx * jx, ry * jy, angle + ja, TEMPLATE_SOFTNESS)
    if noise_sigma > 0:
        image += np_stream(seed, "scene.noise").normal(0.0, noise_sigma, image.shape)
        np.clip(image, 0.0, 1.0, out=image)
    image.setflags(write=False)
    template.setflags(write=False)
    return Scene(image, template, (tx, ty), float(noise_sigma))


# --------------------------------------------------------------------------
# Confidence
# --------------------------------------------------------------------------


def _clip01(x: float) -> float:
    return 0.0 if x <= 0.0 else (1.0 if x > 1.0 - 1e-12 else x)


def ncc(patch: np.ndarray, template: np.ndarray) -> float:
    """Normalized cross-correlation; 0 when either side has zero variance."""
    p = patch - patch.mean()
    t = template - template.mean()
    denom = math.sqrt(float((p * p).sum()) * float((t * t).sum()))
    if denom <= 1e-12:
        return 0.0
    return float((p * t).sum()) / denom


def confidence(pose: Pose, scene: Scene) -> float:
    return _clip01(ncc(scene.patch(pose), scene.template))


def ncc_map(image: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Vectorized clipped NCC over all in-bounds translations."""
    h, w = template.shape

    t0 = template - template.mean()
    t_norm = math.sqrt(float((t0 * t0).sum()))
    win = sliding_window_view(image, (h, w))
    # means are subtracted per window so nearly-flat patches don't cancel badly
    means = win.mean(axis=(2, 3), keepdims=True)
    centered = win - means
    var = (centered * centered).sum(axis=(2, 3))
    num = np.tensordot(centered, t0, axes=([2, 3], [0, 1]))
    denom = np.sqrt(var) * t_norm
    out = np.zeros(var.shape)
    ok = denom > 1e-12
    out[ok] = num[ok] / denom[ok]
    # float rounding can leave an exact match at 0.9999999999999998
    out[out > 1.0 - 1e-12] = 1.0
    return np.clip(out, 0.0, 1.0)


def exhaustive_search(scene: Scene) -> tuple[Pose, float]:
    """Brute-force optimum over every translation, one direct NCC per pose.

    Deliberately does not reuse :func:`ncc_map`; it is the oracle the fast
    path is checked against. Ties resolve to the lowest (ty, tx).
    """
    max_x, max_y = scene.pose_limits
    best_pose, best = (0, 0), -1.0
    for ty in range(max_y + 1):
        for tx in range(max_x + 1):
            c = confidence((tx, ty), scene)
            if c > best:
                best_pose, best = (tx, ty), c
    return best_pose, best


# --------------------------------------------------------------------------
# Simulated annealing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AnnealSchedule:
    """Geometric cooling ``T_k = t0 * alpha**k`` with a shrinking step size.

    ``k`` counts iterations since the last restart. A chain restarts from a
    random pose after ``restart_after`` iterations without improving its best.
    """

    t0: float = 0.2
    alpha: float = 0.999
    step_max: int = 4
    step_min: int = 1
    restart_after: int = 100

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0, 1)")
        if self.t0 <= 0:
            raise ValueError("t0 must be positive")
        if self.step_min < 1 or self.step_max < self.step_min:
            raise ValueError("need 1 <= step_min <= step_max")

    def temperature(self, k: int) -> float:
        return self.t0 * self.alpha**k

    def step_size(self, temperature: float) -> int:
        s = math.ceil(self.step_max * temperature / self.t0 - 1e-12)
        return max(self.step_min, min(self.step_max, s))


DEFAULT_SCHEDULE = AnnealSchedule()


@dataclass(slots=True)
class ChainState:
    pose: Pose
    confidence: float
    best_pose: Pose
    best_confidence: float
    iterations: int = 0
    temperature: float = DEFAULT_SCHEDULE.t0
    anneal_step: int = 0
    stale_iters: int = 0
    # broadcast best kept for the next restart
    candidate: tuple | None = None


def start_chain(scene: Scene, rng: random.Random, schedule: AnnealSchedule = DEFAULT_SCHEDULE) -> ChainState:
    max_x, max_y = scene.pose_limits
    pose = (rng.randint(0, max_x), rng.randint(0, max_y))
    c = float(scene.confidence_map()[pose[1], pose[0]])
    return ChainState(pose, c, pose, c, 0, schedule.t0, 0, 0)


def metropolis_accept(delta: float, temperature: float, rng: random.Random) -> bool:
    if delta >= 0.0:
        return True
    return rng.random() < math.exp(delta / temperature)


def sa_step(
    chain: ChainState,
    scene: Scene,
    rng: random.Random,
    schedule: AnnealSchedule = DEFAULT_SCHEDULE,
) -> ChainState:
    """Advance ``chain`` by one Metropolis iteration (mutates and returns it)."""
    if chain.temperature <= 0:
        raise ValueError("temperature must be positive")
    cmap = scene.confidence_map()
    max_x, max_y = scene.pose_limits
    if chain.stale_iters >= schedule.restart_after:
        if chain.candidate is not None and chain.candidate[1] > chain.best_confidence:
            pose = chain.candidate[0]
        else:
            pose = (rng.randint(0, max_x), rng.randint(0, max_y))
        chain.candidate = None
        chain.pose = pose
        chain.confidence = float(cmap[pose[1], pose[0]])
        if chain.confidence > chain.best_confidence:
            chain.best_confidence = chain.confidence
            chain.best_pose = pose
        chain.anneal_step = 0
        chain.stale_iters = 0
        chain.temperature = schedule.t0
    s = schedule.step_size(chain.temperature)
    x = min(max(chain.pose[0] + rng.randint(-s, s), 0), max_x)
    y = min(max(chain.pose[1] + rng.randint(-s, s), 0), max_y)
    c = float(cmap[y, x])
    if metropolis_accept(c - chain.confidence, chain.temperature, rng):
        chain.pose = (x, y)
        chain.confidence = c
    if chain.confidence > chain.best_confidence:
        chain.best_confidence = chain.confidence
        chain.best_pose = chain.pose
        chain.stale_iters = 0
    else:
        chain.stale_iters += 1
    chain.iterations += 1
    chain.anneal_step += 1
    chain.temperature = schedule.temperature(chain.anneal_step)
    return chain


def adopt(chain: ChainState, pose: Pose, conf: float) -> bool:
    """Keep a broadcast best as the chain's next restart point.

    Only entries better than anything the chain has seen are kept, and the
    chain does not jump there until it restarts. Jumping immediately would
    pull every chain onto the same local optimum.
    """
    if conf <= chain.best_confidence:
        return False
    chain.candidate = (pose, conf)
    return True


@dataclass(frozen=True)
class MatchResult:
    best_pose: Pose
    best_confidence: float
    iterations: int
    reached: bool


def sa_match(
    scene: Scene,
    target_confidence: float,
    schedule: AnnealSchedule = DEFAULT_SCHEDULE,
    max_iters: int = 50_000,
    seed: int = 0,
) -> MatchResult:
    if not (0.0 < target_confidence <= 1.0):
        raise ValueError("target_confidence must lie in (0, 1]")
    rng = stream(seed, "sa.chain.0")
    chain = start_chain(scene, rng, schedule)
    while chain.best_confidence < target_confidence and chain.iterations < max_iters:
        sa_step(chain, scene, rng, schedule)
    return MatchResult(
        chain.best_pose,
        chain.best_confidence,
        chain.iterations,
        chain.best_confidence >= target_confidence,
    )


def exchange_best(bests: Sequence[tuple[Pose, float]]) -> tuple[int, Pose, float]:
    """Pick the broadcast entry: highest confidence, lowest chain id on ties."""
    if not bests:
        raise EmptyList("no chain bests to exchange")
    idx = 0
    for i, (_, c) in enumerate(bests):
        if c > bests[idx][1]:
            idx = i
    return idx, bests[idx][0], bests[idx][1]


# --------------------------------------------------------------------------
# Task graphs
# --------------------------------------------------------------------------

TASK_KINDS = ("chain", "coordinator", "compute")


@dataclass(frozen=True)
class Task:
    """One PE-resident task.

    ``cost`` is instructions per annealing iteration for chains and total
    instructions for plain compute tasks; coordinators carry no work of
    their own.
    """

    id: int
    kind: str
    cost: int
    footprint: int = 0


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    bytes: int


@dataclass(frozen=True)
class DataObjectDecl:
    address: str
    size: int
    writes: tuple[tuple[int, int], ...] = ()  # (task id, count)
    reads: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class TaskGraph:
    tasks: tuple[Task, ...] = ()
    edges: tuple[Edge, ...] = ()
    exchange_period: int = DEFAULT_EXCHANGE_PERIOD
    objects: tuple[DataObjectDecl, ...] = ()

    def __post_init__(self):
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate task id")
        for t in self.tasks:
            if t.kind not in TASK_KINDS:
                raise ValueError(f"unknown task kind {t.kind!r}")
        known = set(ids)
        for e in self.edges:
            if e.src not in known or e.dst not in known:
                raise ValueError(f"edge {e} references an unknown task")

    def task(self, task_id: int) -> Task:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(task_id)

    @property
    def chains(self) -> list[Task]:
        return [t for t in self.tasks if t.kind == "chain"]

    @property
    def coordinator(self) -> Task | None:
        for t in self.tasks:
            if t.kind == "coordinator":
                return t
        return None

    def predecessors(self, task_id: int) -> list[Edge]:
        return [e for e in self.edges if e.dst == task_id]

    def successors(self, task_id: int) -> list[Edge]:
        return [e for e in self.edges if e.src == task_id]


GLOBAL_BEST = "global_best"


def build_task_graph(
    chains: int,
    iters_per_exchange: int = DEFAULT_EXCHANGE_PERIOD,
    per_iteration_cost: int = INSTRUCTIONS_PER_ITERATION,
    footprint: int = 256,
) -> TaskGraph:
    """Multi-start annealing decomposed as ``chains`` chains + 1 coordinator.

    Chain ``i`` has task id ``i``; the coordinator is task ``chains``. Each
    chain reports its best to the coordinator every ``iters_per_exchange``
    iterations and reads the coordinator-owned global best back.
    """
    if chains < 1:
        raise ZeroChains("at least one chain is required")
    if iters_per_exchange < 1:
        raise ValueError("iters_per_exchange must be >= 1")
    coord = chains
    tasks = [Task(i, "chain", per_iteration_cost, footprint) for i in range(chains)]
    tasks.append(Task(coord, "coordinator", 0, footprint))
    edges = []
    for i in range(chains):
        edges.append(Edge(i, coord, EXCHANGE_RECORD_BYTES))
        edges.append(Edge(coord, i, EXCHANGE_RECORD_BYTES))
    obj = DataObjectDecl(
        GLOBAL_BEST,
        EXCHANGE_RECORD_BYTES,
        writes=((coord, 1),),
        reads=tuple((i, 1) for i in range(chains)),
    )
    return TaskGraph(tuple(tasks), tuple(edges), iters_per_exchange, (obj,))


def compute_graph(instructions: Sequence[int], footprint: int = 0) -> TaskGraph:
    """Independent fixed-length compute tasks (no edges)."""
    tasks = tuple(Task(i, "compute", int(n), footprint) for i, n in enumerate(instructions))
    return TaskGraph(tasks)
