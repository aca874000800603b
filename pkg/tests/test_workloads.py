import math
import random

import numpy as np
import pytest

from sapa.errors import EmptyList, TemplateTooLarge, ZeroChains
from sapa.rng import stream
from sapa.workloads import (
    AnnealSchedule,
    adopt,
    build_task_graph,
    confidence,
    exchange_best,
    exhaustive_search,
    generate_scene,
    metropolis_accept,
    ncc,
    sa_match,
    sa_step,
    start_chain,
)


def test_exact_match_scores_one():
    scene = generate_scene(32, 32, 8, 0.0, seed=3)
    assert confidence(scene.true_pose, scene) == 1.0


def test_confidence_is_pure():
    scene = generate_scene(seed=1)
    assert confidence((5, 9), scene) == confidence((5, 9), scene)


def test_ncc_is_scale_invariant():
    rng = np.random.default_rng(0)
    t = rng.random((6, 6))
    assert ncc(3 * t + 2, t) == pytest.approx(1.0)
    assert ncc(-t, t) == pytest.approx(-1.0)
    assert ncc(np.ones((6, 6)), t) == 0.0


def test_confidence_is_clipped_ncc():
    scene = generate_scene(32, 32, 8, 0.2, seed=6)
    cmap = scene.confidence_map()
    assert cmap.min() >= 0.0 and cmap.max() <= 1.0
    for pose in [(0, 0), (7, 3), scene.true_pose]:
        raw = ncc(scene.patch(pose), scene.template)
        assert confidence(pose, scene) == pytest.approx(min(max(raw, 0.0), 1.0))
        assert cmap[pose[1], pose[0]] == pytest.approx(confidence(pose, scene), abs=1e-9)


def test_exhaustive_search_finds_true_pose_without_noise():
    scene = generate_scene(40, 40, 8, 0.0, seed=5, clutter=2)
    pose, c = exhaustive_search(scene)
    assert pose == scene.true_pose and c == 1.0


def test_scene_is_seeded():
    a = generate_scene(seed=9, clutter=1)
    b = generate_scene(seed=9, clutter=1)
    assert np.array_equal(a.image, b.image)
    assert not np.array_equal(a.image, generate_scene(seed=10, clutter=1).image)


def test_metropolis_always_accepts_improvement():
    rng = random.Random(0)
    assert all(metropolis_accept(0.01, 1e-9, rng) for _ in range(100))


def test_metropolis_frozen_rejects_worse():
    rng = random.Random(0)
    assert not any(metropolis_accept(-0.01, 1e-12, rng) for _ in range(10**5))


def test_metropolis_frequency():
    rng = random.Random(1)
    n = 10**5
    hits = sum(metropolis_accept(-0.1, 0.1, rng) for _ in range(n))
    assert abs(hits / n - math.exp(-1)) < 0.01


def test_best_is_monotone_along_a_chain():
    scene = generate_scene(seed=2, clutter=1)
    rng = stream(2, "t")
    chain = start_chain(scene, rng)
    best = chain.best_confidence
    for _ in range(3000):
        sa_step(chain, scene, rng)
        assert chain.best_confidence >= best
        best = chain.best_confidence


def test_zero_budget_returns_start():
    scene = generate_scene(seed=4)
    r = sa_match(scene, 0.99, max_iters=0, seed=4)
    assert r.iterations == 0 and not r.reached


def test_noise_free_match_hits_optimum():
    scene = generate_scene(noise_sigma=0.0, seed=11, clutter=1)
    r = sa_match(scene, 1.0, max_iters=50_000, seed=11)
    assert r.reached and r.best_pose == scene.true_pose


def test_higher_target_costs_more_iterations():
    lo = hi = 0
    for s in range(20):
        scene = generate_scene(seed=s, clutter=1)
        lo += sa_match(scene, 0.85, seed=s).iterations
        hi += sa_match(scene, 0.98, seed=s).iterations
    assert hi > lo


def test_schedule_validation_and_step_shrink():
    with pytest.raises(ValueError):
        AnnealSchedule(alpha=1.0)
    s = AnnealSchedule(t0=1.0, step_max=4)
    assert s.step_size(1.0) == 4
    assert s.step_size(1e-6) == 1


def test_adopt_keeps_only_better_candidates():
    scene = generate_scene(seed=0)
    chain = start_chain(scene, random.Random(0))
    assert not adopt(chain, (0, 0), chain.best_confidence)
    assert adopt(chain, (1, 1), chain.best_confidence + 0.1)
    assert chain.candidate == ((1, 1), chain.best_confidence + 0.1)


def test_exchange_best():
    assert exchange_best([((0, 0), 0.7), ((1, 1), 0.9), ((2, 2), 0.8)]) == (1, (1, 1), 0.9)
    bests = [((0, 0), 0.1), ((1, 0), 0.2), ((2, 0), 0.9), ((3, 0), 0.5), ((4, 0), 0.3), ((5, 0), 0.9)]
    assert exchange_best(bests)[0] == 2
    assert exchange_best([((3, 3), 0.4)]) == (0, (3, 3), 0.4)
    with pytest.raises(EmptyList):
        exchange_best([])


def test_task_graph_shape():
    g = build_task_graph(4)
    assert len(g.tasks) == 5 and len(g.edges) == 8
    assert len(build_task_graph(1).tasks) == 2
    with pytest.raises(ZeroChains):
        build_task_graph(0)


def test_template_must_fit():
    with pytest.raises(TemplateTooLarge):
        generate_scene(64, 64, 70)
