import random

import pytest

from sapa.errors import NoReads, UnknownObject
from sapa.memory import DataObject, MemCounters, MemorySystem, ReadClass, correctness_estimate, place_data
from sapa.workloads import build_task_graph


def system(tolerance=0, home=0):
    return MemorySystem({"x": DataObject("x", home, 0, "v0", 16)}, tolerance=tolerance)


def test_home_read_is_fresh():
    m = system()
    assert m.mem_read(0, "x") == ("v0", ReadClass.FRESH_HIT)


def test_first_remote_read_fetches_from_parent():
    m = system()
    assert m.mem_read(1, "x") == ("v0", ReadClass.PARENT_FETCH)
    assert m.mem_read(1, "x") == ("v0", ReadClass.FRESH_HIT)
    assert m.counters.parent_fetches == 1


def test_stale_hit_within_tolerance():
    m = system(tolerance=1)
    m.mem_read(1, "x")
    m.mem_write(0, "x", "v1")
    assert m.mem_read(1, "x") == ("v0", ReadClass.STALE_HIT)
    m.mem_write(0, "x", "v2")
    # gap 2 > tolerance: refetch
    assert m.mem_read(1, "x") == ("v2", ReadClass.PARENT_FETCH)


def test_tolerance_zero_refetches_after_any_write():
    m = system()
    m.mem_read(1, "x")
    m.mem_write(2, "x", "v1")
    assert m.mem_read(1, "x") == ("v1", ReadClass.PARENT_FETCH)


def test_unknown_object():
    with pytest.raises(UnknownObject):
        system().mem_read(0, "nope")


def test_correctness_estimate():
    with pytest.raises(NoReads):
        correctness_estimate(MemCounters())
    assert correctness_estimate(MemCounters(fresh_reads=3, stale_reads=1)) == 0.75


def test_send_hook_sees_traffic():
    sent = []
    m = MemorySystem(
        {"x": DataObject("x", 0, 0, None, 40)}, send=lambda *a: sent.append(a) or len(sent)
    )
    m.mem_read(3, "x")
    m.mem_write(3, "x", 1)
    assert [s[3] for s in sent] == ["memory-request", "memory-reply", "memory-request"]
    assert sent[1][2] == 3  # 40 bytes in 16-byte flits


def scripted(m, seed, steps=400, nodes=4):
    """Random interleaving of writes at the home and reads elsewhere.

    Returns the list of (node, value) seen by reads.
    """
    rng = random.Random(seed)
    seen = []
    for step in range(steps):
        if rng.random() < 0.3:
            m.mem_write(rng.randrange(nodes), "x", step, cycle=step)
        else:
            node = rng.randrange(nodes)
            value, _ = m.mem_read(node, "x", cycle=step)
            seen.append((step, node, value))
    return seen


def test_sequential_semantics_at_tolerance_zero():
    m = system()
    last = "v0"
    rng = random.Random(7)
    for step in range(500):
        if rng.random() < 0.4:
            m.mem_write(rng.randrange(5), "x", step)
            last = step
        else:
            assert m.mem_read(rng.randrange(5), "x")[0] == last
    assert not m.staleness_violations()
    assert m.counters_match_log()


def test_audit_log_bounds_staleness():
    for tol in range(5):
        m = system(tolerance=tol)
        scripted(m, seed=tol)
        assert not m.staleness_violations()
        assert m.counters_match_log()
        assert all(r.parent_version - r.version <= tol for r in m.log)


def test_place_data_homes_on_writer():
    g = build_task_graph(3)
    mapping = {0: 10, 1: 11, 2: 12, 3: 20}
    assert place_data(g, mapping) == {"global_best": 20}


def test_place_data_unmapped_task():
    g = build_task_graph(2)
    with pytest.raises(UnknownObject):
        place_data(g, {0: 1})
