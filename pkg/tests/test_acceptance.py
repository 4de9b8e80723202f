"""The eleven acceptance criteria, each at its stated tolerance and time budget.

Every test records one PASS/FAIL line (shown in the terminal summary) and
then asserts, so a failing criterion is visible both ways.
"""
import functools
import statistics
import time

import numpy as np

from iab_route_lab import a2c, baselines as bl, nn
from iab_route_lab.config import ALGORITHMS, ExperimentConfig
from iab_route_lab.harness import make_policy, run_experiment, run_points
from iab_route_lab.network import TopologyConfig, generate_topology
from iab_route_lab.scenarios import ScenarioScript, scenario_burst, scenario_node_failure
from iab_route_lab.sim import Packet, Mode, Simulation, TrafficConfig, conservation_audit

import conftest
from oracles import brute_force_first_hop, random_small_graph


def record(n, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    line = (f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}  "
            f"[{elapsed:.1f}s / {budget:.0f}s budget]")
    conftest.ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


# -- shared configuration ------------------------------------------------------

def learning_cfg(algorithm, lam=3.0, slots=50_000):
    """Desk-scale static network (default node counts, no UE motion, delay drift on).

    The learners use input scaling by ttl_init, 1e-3 rates and queue-drop
    charging of the critic; the tabular baselines use their own defaults.
    """
    cfg = ExperimentConfig()
    cfg.topology.ue_speed = 0.0
    cfg.traffic.lam = lam
    cfg.learning.normalize = True
    cfg.learning.eta = cfg.learning.alpha = 1e-3
    cfg.learning.charge_queue_drops = True
    cfg.experiment.algorithm = algorithm
    cfg.experiment.slots = slots
    return cfg


STATIC_TOPOLOGY_SEED = 0
SEEDS = range(5)


@functools.lru_cache(maxsize=None)
def static_run(algorithm, seed):
    cfg = learning_cfg(algorithm)
    t = time.perf_counter()
    r = run_points(cfg, STATIC_TOPOLOGY_SEED, seed, [ScenarioScript([], "static")])[0]
    return r.avg_delay, r.arrival_ratio, time.perf_counter() - t


def final_delays(algorithm):
    runs = [static_run(algorithm, s) for s in SEEDS]
    return [r[0] for r in runs], sum(r[2] for r in runs)


# -- 1 --------------------------------------------------------------------------

def rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def test_criterion_01_gradient_correctness():
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    K = 4
    worst_pi = worst_v = 0.0
    for _ in range(20):
        actor = nn.init_mlp(2 * K + 2, (16, 16), K + 1, rng)
        critic = nn.init_mlp(2 * K + 2, (16, 16), 1, rng)
        for m in (actor, critic):
            for b in m.biases:
                b[...] = rng.normal(0, 0.2, b.shape)
        obs = rng.normal(0, 1, 2 * K + 2)
        mask = rng.random(K + 1) < 0.5
        mask[rng.integers(K + 1)] = True
        a = int(rng.choice(np.flatnonzero(mask)))
        g = nn.grad_log_prob(actor, obs, mask, a).flat()
        fd = nn.finite_diff(actor, lambda q: np.log(nn.actor_forward(q, obs, mask)[a]), 1e-5).flat()
        worst_pi = max(worst_pi, rel_err(g, fd))
        g = nn.grad_value(critic, obs).flat()
        fd = nn.finite_diff(critic, lambda q: nn.critic_forward(q, obs), 1e-5).flat()
        worst_v = max(worst_v, rel_err(g, fd))
    record(1, worst_pi < 1e-4 and worst_v < 1e-4,
           f"max rel err grad log pi={worst_pi:.2e}, grad V={worst_v:.2e} (< 1e-4)",
           time.perf_counter() - t, 10)


# -- 2 --------------------------------------------------------------------------

def test_criterion_02_masked_softmax():
    t = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_sum = worst_shift = 0.0
    zeros_ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        logits = rng.uniform(-50, 50, n)
        mask = rng.random(n) < 0.5
        mask[rng.integers(n)] = True
        p = nn.masked_softmax(logits, mask)
        worst_sum = max(worst_sum, abs(p.sum() - 1.0))
        zeros_ok &= bool(np.all(p[~mask] == 0.0))
        shifted = nn.masked_softmax(np.where(mask, logits + rng.uniform(-100, 100), logits), mask)
        worst_shift = max(worst_shift, float(np.max(np.abs(shifted - p))))
    record(2, worst_sum <= 1e-9 and zeros_ok and worst_shift <= 1e-9,
           f"|sum-1|max={worst_sum:.1e}, masked zero={zeros_ok}, shift dev={worst_shift:.1e}",
           time.perf_counter() - t, 5)


# -- 3 --------------------------------------------------------------------------

def test_criterion_03_exact_updates():
    t = time.perf_counter()
    qt = bl.QTable(1, alpha=0.5, gamma=0.995)
    qt.row(0, "d")[0] = -20.0
    bl.q_update(qt, 0, 0, "d", -3.0, -10.0)
    q = qt.row(0, "d")[0]
    avg = a2c.federated_update(
        [nn.ModelParams([np.array([[2.0]])], [np.zeros(1)]),
         nn.ModelParams([np.array([[6.0]])], [np.zeros(1)])], [1, 3]).weights[0][0, 0]
    td = a2c.td_error_central(-2.0, -10.0, -7.0, 0.995)
    ok = abs(q + 16.475) <= 1e-12 and abs(avg - 5.0) <= 1e-12 and abs(td - 1.035) <= 1e-12
    record(3, ok, f"Q={float(q)!r}, FedAvg={float(avg)!r}, delta={float(td)!r}", time.perf_counter() - t, 1)


# -- 4 --------------------------------------------------------------------------

def test_criterion_04_shortest_path_oracle():
    t = time.perf_counter()
    mismatches = checked = 0
    for seed in range(200):
        net, ue, queues = random_small_graph(seed)
        assert net.num_nodes <= 7
        for src in range(net.K):
            p = Packet(0, ue, src, 0, 50, Mode.QUEUE)
            checked += 2
            mismatches += bl.minhop_next_hop(net, p) != brute_force_first_hop(net, src, ue)
            mismatches += (bl.centralized_next_hop(net, p, queues)
                           != brute_force_first_hop(net, src, ue, queues))
    record(4, mismatches == 0, f"{checked} first hops vs enumeration, {mismatches} mismatches",
           time.perf_counter() - t, 60)


# -- 5 --------------------------------------------------------------------------

def test_criterion_05_conservation_all_algorithms():
    t = time.perf_counter()
    topo = TopologyConfig(num_donors=1, num_iab=3, num_ues=9)
    failures = []
    for alg in ALGORITHMS:
        cfg = ExperimentConfig()
        cfg.topology = topo
        cfg.experiment.algorithm = alg
        net = generate_topology(topo, 0)
        sim = Simulation(net, TrafficConfig(lam=3.0), 0)
        pol = make_policy(cfg)
        try:
            for _ in range(10_000):
                sim.advance_slot(pol)
                inj, dlv, drp, live = conservation_audit(sim)
                if inj != dlv + drp + live:
                    raise AssertionError(alg)
        except Exception as exc:  # noqa: BLE001 - any failure fails the criterion
            failures.append(f"{alg}: {exc}")
    record(5, not failures, f"9 algorithms x 1e4 slots audited every slot; failures={failures}",
           time.perf_counter() - t, 120)


# -- 6 --------------------------------------------------------------------------

def test_criterion_06_connectivity():
    t = time.perf_counter()
    ratios = {}
    for label, parents, ue_parents in (("single", 1, 1), ("three", 3, 2)):
        cfg = ExperimentConfig()
        cfg.topology = TopologyConfig(max_iab_parents=parents, max_ue_parents=ue_parents,
                                      ue_speed=0.0)
        cfg.traffic.lam = 5.0
        cfg.experiment.algorithm = "minhop"
        cfg.experiment.slots = 5000
        ratios[label] = [run_points(cfg, s, s, [ScenarioScript([], label)])[0].arrival_ratio
                         for s in SEEDS]
    single, three = statistics.median(ratios["single"]), statistics.median(ratios["three"])
    record(6, single < three,
           f"median arrival ratio at lam=5: single-parent={single:.4f} < 3-parent={three:.4f}",
           time.perf_counter() - t, 180)


# -- 7 --------------------------------------------------------------------------

def test_criterion_07_learning_beats_baselines():
    a2c_d, t1 = final_delays("relational-a2c")
    rnd_d, t2 = final_delays("random")
    q_d, t3 = final_delays("q-routing")
    m_a2c, m_rnd, m_q = (statistics.median(x) for x in (a2c_d, rnd_d, q_d))
    mean_a2c, mean_rnd = statistics.fmean(a2c_d), statistics.fmean(rnd_d)
    ok_a = mean_a2c <= 0.8 * mean_rnd
    ok_b = m_a2c <= m_q
    record(7, ok_a and ok_b,
           f"(a) mean delay A2C={mean_a2c:.2f} vs random={mean_rnd:.2f} "
           f"({1 - mean_a2c / mean_rnd:.0%} lower, need >=20%); "
           f"(b) median A2C={m_a2c:.2f} <= Q-Routing={m_q:.2f}: {ok_b}",
           t1 + t2 + t3, 900)


# -- 8 --------------------------------------------------------------------------

def test_criterion_08_dec_fed_parity():
    c_d, _ = final_delays("relational-a2c")
    d_d, t1 = final_delays("dec-relational-a2c")
    f_d, t2 = final_delays("fed-relational-a2c")
    mc, md, mf = (statistics.median(x) for x in (c_d, d_d, f_d))
    dev_d, dev_f = abs(md - mc) / mc, abs(mf - mc) / mc
    record(8, dev_d <= 0.15 and dev_f <= 0.15,
           f"median delay central={mc:.2f}, dec={md:.2f} ({dev_d:.1%}), "
           f"fed={mf:.2f} ({dev_f:.1%}); need <=15%",
           t1 + t2, 900)


# -- 9 --------------------------------------------------------------------------

FAIL_AT, RECOVER_AT, AFTER = 20_000, 22_000, 10_000


def windowed_drops(rows, window=100):
    drops = np.array([r[3] for r in rows], dtype=float)
    c = np.concatenate([[0.0], np.cumsum(drops)])
    idx = np.arange(len(drops))
    return c[idx + 1] - c[np.maximum(idx + 1 - window, 0)]


def test_criterion_09_failure_recovery():
    # high load, static UEs, a random IAB node per run; the windowed drop
    # curve is averaged over runs before the outage and recovery are judged
    t = time.perf_counter()
    curves, nodes = [], []
    for seed in range(3):
        cfg = learning_cfg("relational-a2c", lam=5.0, slots=RECOVER_AT + AFTER)
        script = scenario_node_failure(cfg, FAIL_AT, RECOVER_AT, np.random.default_rng([0, seed]))
        nodes.append(int(script.events[0].value))
        curves.append(windowed_drops(run_points(cfg, STATIC_TOPOLOGY_SEED, seed, [script])[0].rows))
    w = np.mean(curves, axis=0)
    baseline = float(w[FAIL_AT - 1000:FAIL_AT].mean())
    during = float(w[FAIL_AT:RECOVER_AT].max())
    back = np.flatnonzero(w[RECOVER_AT + 100:RECOVER_AT + AFTER] <= 2 * baseline)
    recovered = back.size > 0
    record(9, during > baseline and recovered,
           f"failed nodes {nodes}; mean windowed drops baseline={baseline:.2f}, "
           f"outage max={during:.2f}, back <=2x baseline after "
           f"{(int(back[0]) + 100) if recovered else 'never'} slots",
           time.perf_counter() - t, 600)


# -- 10 -------------------------------------------------------------------------

def test_criterion_10_burst_tracking():
    t = time.perf_counter()
    cfg = ExperimentConfig()
    cfg.topology.ue_speed = 0.0
    cfg.experiment.algorithm = "minhop"
    cfg.experiment.slots = 3000
    script = scenario_burst(cfg, 2.0, 5.0, 1000, 2000)
    rows = run_points(cfg, 0, 0, [script])[0].rows
    inj = np.array([r[1] for r in rows], dtype=float)
    worst, ok = 0.0, True
    for lo, hi, lam in ((0, 1000, 2.0), (1000, 2000, 5.0), (2000, 3000, 2.0)):
        band = 3 * np.sqrt(lam / 100)
        means = inj[lo:hi].reshape(-1, 100).mean(axis=1)
        dev = np.abs(means - lam)
        worst = max(worst, float((dev / band).max()))
        ok &= bool(np.all(dev <= band))
    record(10, ok, f"all 100-slot injected means inside lam +- 3 sqrt(lam/100); "
                   f"worst deviation {worst:.2f} band widths", time.perf_counter() - t, 120)


# -- 11 -------------------------------------------------------------------------

def test_criterion_11_determinism(tmp_path):
    t = time.perf_counter()
    configs = []
    for alg in ALGORITHMS:
        cfg = ExperimentConfig()
        cfg.topology = TopologyConfig(num_donors=1, num_iab=3, num_ues=9)
        cfg.experiment.algorithm = alg
        cfg.experiment.slots = 1500
        cfg.experiment.seeds = (0, 1)
        cfg.experiment.topology_seeds = (0,)
        configs.append(cfg)
    burst = ExperimentConfig()
    burst.scenario.kind = "burst"
    burst.scenario.t1, burst.scenario.t2 = 1000, 2000
    burst.experiment.algorithm = "minhop"
    burst.experiment.slots = 3000
    burst.experiment.seeds = (0,)
    burst.experiment.topology_seeds = (0,)
    configs.append(burst)
    failure = learning_cfg("relational-a2c", slots=3000)
    failure.scenario.kind = "failure"
    failure.experiment.seeds = (0,)
    failure.experiment.topology_seeds = (0,)
    configs.append(failure)
    differing, files = [], 0
    for i, cfg in enumerate(configs):
        run_experiment(cfg, tmp_path / f"{i}a")
        run_experiment(cfg, tmp_path / f"{i}b")
        for f in sorted((tmp_path / f"{i}a").iterdir()):
            files += 1
            if f.read_bytes() != (tmp_path / f"{i}b" / f.name).read_bytes():
                differing.append(f"{cfg.experiment.algorithm}/{f.name}")
    record(11, not differing, f"{files} CSV/config files compared byte-for-byte; "
                              f"differing={differing}", time.perf_counter() - t, 600)
