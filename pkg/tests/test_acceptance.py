"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

The result lines are collected and printed in the pytest terminal summary;
``-s`` also shows each one as its test finishes.
"""

import math
import random
import time
from fractions import Fraction

import networkx as nx
import numpy as np
from scipy.stats import spearmanr

from sapa.cli import main as cli_main
from sapa.config import SystemConfig, WorkloadConfig, load_config
from sapa.kernel import Simulator, run_simulation
from sapa.memory import DataObject, MemorySystem, ReadClass, correctness_estimate
from sapa.noc import Network, links
from sapa.ns import make_policy, parse_goal_spec, select_arm, update_policy
from sapa.report import parse_values, sweep_tradeoff
from sapa.rng import stream
from sapa.workloads import build_task_graph, exhaustive_search, generate_scene, sa_match

RESULTS: list[str] = []


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    print("\n" + line)


def conserved(rep) -> bool:
    t = rep.counter_totals
    return (
        rep.total_energy == rep.pe_energy + rep.mem_energy + rep.noc_energy
        and sum((f.energy for f in rep.frames), Fraction(0)) == rep.total_energy
        and t["noc.injected"] == t["noc.delivered"] + t["noc.dropped"] + t["noc.in_flight"]
    )


# ---------------------------------------------------------------------------
# 1. accuracy / cost trade-off
# ---------------------------------------------------------------------------


def test_criterion_1_tradeoff():
    cfg = SystemConfig()
    values = parse_values("0.85:0.98:0.01")
    t0 = time.perf_counter()
    rows = sweep_tradeoff(cfg, None, "sa.confidence", values, seeds=20, master_seed=0)
    elapsed = time.perf_counter() - t0
    cyc = {v: [] for v in values}
    eng = {v: [] for v in values}
    for r in rows:
        cyc[r.knob_value].append(r.report.completion_cycle)
        eng[r.knob_value].append(r.report.total_energy)
    mean_c = [float(np.mean(cyc[v])) for v in values]
    mean_e = [float(sum(eng[v], Fraction(0)) / len(eng[v])) for v in values]
    ratio_c = mean_c[-1] / mean_c[0]
    ratio_e = mean_e[-1] / mean_e[0]
    xs = [float(v) for v in values]
    rho_c = spearmanr(xs, mean_c).statistic
    rho_e = spearmanr(xs, mean_e).statistic
    all_conserved = all(conserved(r.report) for r in rows)
    ok = (
        2.0 <= ratio_c <= 4.5
        and 2.0 <= ratio_e <= 4.5
        and rho_c >= 0.95
        and rho_e >= 0.95
        and elapsed < 600
        and all_conserved
    )
    verdict(
        1,
        ok,
        f"energy ratio {ratio_e:.2f}, cycle ratio {ratio_c:.2f} (band [2.0, 4.5]); "
        f"Spearman energy {rho_e:.3f}, cycles {rho_c:.3f} (>= 0.95); sweep {elapsed:.1f}s (< 600s)",
    )
    assert ok


# ---------------------------------------------------------------------------
# 2. runtime adaptation
# ---------------------------------------------------------------------------

LONG_RUN = SystemConfig(workload=WorkloadConfig(confidence=1.0, max_iters=2000))


def test_criterion_2_adaptation():
    L = LONG_RUN.epoch_length
    change = 500_000
    new_budget = Fraction(15)
    goals = parse_goal_spec(f"goal power_budget 30\ngoal power_budget {new_budget} at {change}\n")
    g = build_task_graph(8)
    power_ok = True
    power_actions = True
    lags = []
    for seed in range(5):
        rep = run_simulation(LONG_RUN, g, goals, seed)
        first_after = change // L  # epoch covering (change, change + L]
        post = rep.per_epoch_power[first_after:]
        # first epoch from which every later epoch respects the new budget
        lag = next((i for i in range(len(post)) if all(p <= new_budget for p in post[i:])), None)
        lags.append(lag)
        power_ok &= lag is not None and lag < 5 and conserved(rep)
        power_actions &= any(
            a[1] in ("SetPEMode", "DeactivatePE") and a[4] == "power" and a[0] >= change for a in rep.action_log
        )

    deadline = 1_400_000
    dl_cfg = LONG_RUN.with_(default_mode="low")
    dl_goals = parse_goal_spec(f"goal deadline {deadline}\n")
    met = 0
    stepped = True
    baseline_misses = run_simulation(dl_cfg, g, None, 0).completion_cycle > deadline
    for seed in range(20):
        rep = run_simulation(dl_cfg, g, dl_goals, seed)
        met += rep.completion_cycle <= deadline
        stepped &= any(a[1] in ("SetPEMode", "ActivatePE") and a[4] == "deadline" for a in rep.action_log)
        stepped &= conserved(rep)
    ok = power_ok and power_actions and met >= 18 and stepped and baseline_misses
    verdict(
        2,
        ok,
        f"budget 30->15: compliant after {lags} epochs (< 5) via logged SetPEMode/DeactivatePE; "
        f"deadline met on {met}/20 seeds (>= 18) via step-ups, unadapted run misses it: {baseline_misses}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 3. network oracle
# ---------------------------------------------------------------------------


def drive(net, start):
    out, c = [], start
    while not net.idle:
        out.extend(net.advance_network(c))
        c += 1
    return out, c


def surviving_graph(net):
    g = nx.Graph()
    g.add_nodes_from(range(net.width * net.height))
    for node, port in links(net):
        if net.link_up(node, port):
            g.add_edge(node, net.neighbor(node, port))
    return g


def network_oracle(w, h, rng):
    n = w * h
    lat_ok = hop_ok = loss_ok = True
    for _ in range(1000):
        net = Network(w, h, policy=rng.choice(["adaptive", "deterministic"]))
        src, dst = rng.sample(range(n), 2)
        flits = rng.randint(1, 16)
        net.inject_packet(src, dst, flits, "data", 0)
        (pkt,), _ = drive(net, 0)
        lat_ok &= pkt.latency == net.manhattan(src, dst) + flits - 1

    # 50 random single-link faults, each on a mesh carrying live traffic
    all_links = list(links(Network(w, h)))
    for _ in range(50):
        net = Network(w, h)
        for _ in range(10):
            a, b = rng.sample(range(n), 2)
            net.inject_packet(a, b, rng.randint(1, 8), "data", 0)
        c = 0
        for _ in range(rng.randint(0, 6)):
            net.advance_network(c)
            c += 1
        node, port = rng.choice(all_links)
        net.inject_link_fault(node, port, c)
        _, c = drive(net, c)
        g = surviving_graph(net)
        connected = nx.is_connected(g)
        if connected:
            loss_ok &= net.counters.dropped == 0
            loss_ok &= net.counters.delivered == net.counters.injected
            loss_ok &= all(p.arrived_flits == p.flits for p in net.packets.values())
        loss_ok &= net.conservation_holds()
        for _ in range(10):
            a, b = rng.sample(range(n), 2)
            if not nx.has_path(g, a, b):
                continue
            pid = net.inject_packet(a, b, rng.randint(1, 8), "data", c)
            _, c = drive(net, c)
            hop_ok &= net.packets[pid].hops == nx.shortest_path_length(g, a, b)

    # faults accumulating on one mesh until it splits
    net = Network(w, h)
    order = all_links[:]
    rng.shuffle(order)
    c = 0
    for node, port in order[:50]:
        net.inject_link_fault(node, port, c)
        g = surviving_graph(net)
        if not nx.is_connected(g):
            break
        for _ in range(5):
            a, b = rng.sample(range(n), 2)
            pid = net.inject_packet(a, b, rng.randint(1, 8), "data", c)
            _, c = drive(net, c)
            pkt = net.packets[pid]
            hop_ok &= pkt.hops == nx.shortest_path_length(g, a, b)
            loss_ok &= not pkt.dropped and pkt.arrived_flits == pkt.flits
    return lat_ok, hop_ok, loss_ok


def test_criterion_3_network_oracle():
    rng = stream(3, "acceptance.noc")
    parts = []
    ok = True
    for w, h in ((4, 4), (8, 8)):
        lat, hop, loss = network_oracle(w, h, rng)
        ok &= lat and hop and loss
        parts.append(f"{w}x{h}: latency={'ok' if lat else 'BAD'} hops={'ok' if hop else 'BAD'} "
                     f"loss-free={'ok' if loss else 'BAD'}")
    verdict(3, ok, "; ".join(parts) + " (1000 packet trials, 50 faults each)")
    assert ok


# ---------------------------------------------------------------------------
# 4. annealing oracle
# ---------------------------------------------------------------------------


def brute_force(scene):
    """Independent pose scan: direct clipped NCC at every translation."""
    t = scene.template - scene.template.mean()
    tn = math.sqrt(float((t * t).sum()))
    th, tw = scene.template.shape
    best, best_pose = -1.0, None
    for y in range(scene.image.shape[0] - th + 1):
        for x in range(scene.image.shape[1] - tw + 1):
            p = scene.image[y : y + th, x : x + tw]
            p = p - p.mean()
            d = math.sqrt(float((p * p).sum())) * tn
            v = 0.0 if d <= 1e-12 else min(max(float((p * t).sum()) / d, 0.0), 1.0)
            if v > best + 1e-12:
                best, best_pose = v, (x, y)
    return best_pose, best


def test_criterion_4_annealing_oracle(capsys):
    hits = 0
    for seed in range(50):
        scene = generate_scene(noise_sigma=0.0, seed=seed, clutter=1)
        pose, _ = exhaustive_search(scene)
        r = sa_match(scene, 1.0, max_iters=50_000, seed=seed)
        hits += r.best_pose == pose
    oracle_ok = True
    for seed in range(5):
        capsys.readouterr()
        cli_main(["oracle", "--seed", str(seed)])
        fields = capsys.readouterr().out.strip().splitlines()[1].split(",")
        scene = generate_scene(seed=seed, clutter=1)
        pose, conf = brute_force(scene)
        oracle_ok &= (int(fields[0]), int(fields[1])) == pose and abs(float(fields[2]) - conf) < 1e-9
    ok = hits >= 48 and oracle_ok
    verdict(4, ok, f"annealing hit the exhaustive optimum in {hits}/50 noise-free runs (>= 95%); "
                   f"oracle subcommand matches brute force: {oracle_ok}")
    assert ok


# ---------------------------------------------------------------------------
# 5. memory semantics
# ---------------------------------------------------------------------------


def fixed_workload(seed=5, steps=3000, nodes=6, objects=3):
    rng = random.Random(seed)
    ops = []
    for i in range(steps):
        addr = f"obj{rng.randrange(objects)}"
        if rng.random() < 0.25:
            ops.append(("w", rng.randrange(nodes), addr, i))
        else:
            ops.append(("r", rng.randrange(nodes), addr, None))
    return ops


def replay(ops, tolerance, objects=3):
    m = MemorySystem({f"obj{k}": DataObject(f"obj{k}", k, 0, None, 16) for k in range(objects)}, tolerance)
    shadow = {f"obj{k}": None for k in range(objects)}
    sequential = True
    for i, (kind, node, addr, value) in enumerate(ops):
        if kind == "w":
            m.mem_write(node, addr, value, cycle=i)
            shadow[addr] = value
        else:
            got, _ = m.mem_read(node, addr, cycle=i)
            sequential &= got == shadow[addr]
    return m, sequential


def test_criterion_5_memory():
    ops = fixed_workload()
    m0, sequential = replay(ops, 0)
    fetches, estimates, audits = [], [], []
    for tol in range(5):
        m, _ = replay(ops, tol)
        fetches.append(m.counters.parent_fetches)
        estimates.append(correctness_estimate(m.counters))
        audits.append(not m.staleness_violations() and m.counters_match_log())
    mono_f = all(a >= b for a, b in zip(fetches, fetches[1:]))
    mono_e = all(a >= b for a, b in zip(estimates, estimates[1:]))
    # the same audit inside a full simulation with a loose tolerance
    sim = Simulator(SystemConfig(mem_tolerance=2), build_task_graph(8), seed=0)
    rep = sim.run()
    sim_audit = not sim.memory.staleness_violations() and sim.memory.counters_match_log() and conserved(rep)
    stale_at_zero = sum(r.read_class is ReadClass.STALE_HIT for r in m0.log)
    ok = sequential and stale_at_zero == 0 and mono_f and mono_e and all(audits) and sim_audit
    verdict(
        5,
        ok,
        f"sequential at tolerance 0: {sequential}; fetches {fetches} non-increasing: {mono_f}; "
        f"correctness {[round(e, 3) for e in estimates]} non-increasing: {mono_e}; "
        f"staleness audits clean: {all(audits) and sim_audit}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 6. bandit sanity
# ---------------------------------------------------------------------------


def test_criterion_6_bandit():
    good = 0
    for trial in range(100):
        policy = make_policy({"arm": (0, 1)}, epsilon=0.1)
        rng = stream(trial, "acceptance.bandit")
        rewards = stream(trial, "acceptance.rewards")
        pulls = [0, 0]
        p = (0.1, 0.9)
        for _ in range(500):
            i = select_arm(policy, rng)
            pulls[i] += 1
            update_policy(policy, i, 1.0 if rewards.random() < p[i] else 0.0)
        good += pulls[1] / 500 >= 0.8
    greedy_ok = True
    for trial in range(20):
        policy = make_policy({"arm": (0, 1, 2)}, epsilon=0.0)
        rng = stream(trial, "acceptance.greedy")
        means = [0.3, 0.7, 0.5]
        for step in range(50):
            i = select_arm(policy, rng)
            if step >= 3:
                greedy_ok &= i == int(np.argmax(policy.means))
            update_policy(policy, i, means[i])
    ok = good >= 95 and greedy_ok
    verdict(6, ok, f"better arm got >= 80% of pulls in {good}/100 trials (>= 95); "
                   f"epsilon 0 always greedy after warm-up: {greedy_ok}")
    assert ok


# ---------------------------------------------------------------------------
# 7. determinism and conservation
# ---------------------------------------------------------------------------

SCENARIOS = [
    ("mesh = 4x4\nepoch_length = 2000\nsa.image = 32x32\nsa.template = 8x8\nsa.chains = 3\n", ""),
    ("mesh = 6x6\nfault = 2,2,E@3000\nfault = 3,3,N@9000\nsa.chains = 4\n", "goal power_budget 12\n"),
    ("epoch_length = 4000\nmem.tolerance = 1\n", "knob sa.confidence {0.85,0.9,0.95}\nobjective minimize time\n"),
    ("default_mode = low\nrehearsal = on\nsa.max_iters = 400\nsa.confidence = 1.0\n", "goal deadline 150000\n"),
]


def test_criterion_7_determinism(tmp_path):
    identical = True
    exact = True
    for k, (cfg_text, goal_text) in enumerate(SCENARIOS):
        cfg = tmp_path / f"s{k}.cfg"
        cfg.write_text(cfg_text)
        goals = tmp_path / f"s{k}.goals"
        goals.write_text(goal_text)
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / f"s{k}{rep}.csv"
            code = cli_main(["run", "--config", str(cfg), "--goals", str(goals), "--seed", str(k), "--out", str(out)])
            identical &= code == 0
            outs.append(b"".join((tmp_path / f"s{k}{rep}.csv{suffix}").read_bytes()
                                 for suffix in ("", ".epochs.csv", ".actions.csv")))
        identical &= outs[0] == outs[1]
        c = load_config(cfg_text)
        g = parse_goal_spec(goal_text)
        sim = Simulator(c, build_task_graph(c.workload.chains, c.workload.exchange_period), g, k)
        report = sim.run()
        exact &= conserved(report)
        exact &= sim.network.conservation_holds() and sim.memory.counters_match_log()
        pe_total = sum(p.counters.active_cycles + p.counters.idle_cycles for p in sim.pes)
        exact &= pe_total == report.completion_cycle * c.num_pes
    ok = identical and exact
    verdict(7, ok, f"repeat runs byte-identical over {len(SCENARIOS)} scenarios: {identical}; "
                   f"energy = PE + memory + network exactly, packet/counter conservation: {exact}")
    assert ok
