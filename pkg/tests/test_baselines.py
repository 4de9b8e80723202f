import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iab_route_lab import baselines as bl
from iab_route_lab.errors import MissingNeighborEstimate, NoPath
from iab_route_lab.network import generate_topology, relational_map
from iab_route_lab.sim import Mode, Packet, Simulation, TrafficConfig, conservation_audit

from conftest import SMALL, hand_net
from oracles import brute_force_first_hop, random_small_graph


def pkt(dest, node, pid=0):
    return Packet(pid, dest, node, 0, 50, Mode.QUEUE)


def test_centralized_triangle(triangle):
    p = pkt(2, 0)
    assert bl.centralized_next_hop(triangle, p, [0, 0]) == 1
    assert brute_force_first_hop(triangle, 0, 2, [0, 0]) == 1
    assert bl.centralized_next_hop(triangle, p, [0, 5]) == 2
    assert brute_force_first_hop(triangle, 0, 2, [0, 5]) == 2


def test_destination_adjacent_cheapest(triangle):
    assert bl.centralized_next_hop(triangle, pkt(2, 1), [0, 0]) == 2


def test_minhop_ignores_queues(triangle):
    assert bl.minhop_next_hop(triangle, pkt(2, 0)) == 1


def test_minhop_single_path_and_ties():
    line = hand_net(1, 1, 1, [(1, 0, 2), (2, 1, 3)])
    assert bl.minhop_next_hop(line, pkt(2, 0)) == 1
    # two equal-cost relays 1 and 2 between donor 0 and UE 3
    diamond = hand_net(1, 2, 1, [(1, 0, 1), (2, 0, 1), (3, 1, 1), (3, 2, 1)])
    assert bl.minhop_next_hop(diamond, pkt(3, 0)) == 1


def test_no_path_raises():
    net = hand_net(1, 1, 2, [(1, 0, 1), (2, 1, 1)])
    with pytest.raises(NoPath):
        bl.minhop_next_hop(net, pkt(3, 0))


@pytest.mark.parametrize("seed", range(40))
def test_shortest_path_matches_enumeration(seed):
    net, ue, queues = random_small_graph(seed)
    for src in range(net.K):
        p = pkt(ue, src)
        assert bl.minhop_next_hop(net, p) == brute_force_first_hop(net, src, ue)
        assert bl.centralized_next_hop(net, p, queues) == brute_force_first_hop(net, src, ue, queues)


def bp_setup(own, y_len, z_len):
    # node 0 relays to base stations 1 and 2; the destination UE 3 is not adjacent to 0
    net = hand_net(1, 2, 1, [(1, 0, 1), (2, 0, 1), (3, 1, 1), (3, 2, 1)])
    g = bl.dest_group(net, 3)
    groups = {g: [pkt(3, 0, i) for i in range(own)]}
    snaps = [{}, {g: y_len}, {g: z_len}]
    return net, groups, snaps


def test_backpressure_largest_differential():
    net, groups, snaps = bp_setup(5, 2, 4)
    out = bl.backpressure_slot(bl.BackpressureState(), net, 0, groups, snaps, 1)
    assert [y for _, y in out] == [1]


def test_backpressure_holds_on_non_positive():
    net, groups, snaps = bp_setup(3, 3, 5)
    assert bl.backpressure_slot(bl.BackpressureState(), net, 0, groups, snaps, 1) == []


def test_backpressure_tie_lowest_index():
    net, groups, snaps = bp_setup(5, 2, 2)
    out = bl.backpressure_slot(bl.BackpressureState(), net, 0, groups, snaps, 1)
    assert [y for _, y in out] == [1]


def test_backpressure_delivery_wins_tie():
    net = hand_net(1, 1, 1, [(1, 0, 1), (2, 0, 1)])
    g = bl.dest_group(net, 2)
    groups = {g: [pkt(2, 0, i) for i in range(3)]}
    out = bl.backpressure_slot(bl.BackpressureState(), net, 0, groups, [{}, {}], 1)
    assert [y for _, y in out] == [2]


@settings(max_examples=100, deadline=None)
@given(own=st.lists(st.integers(0, 6), min_size=1, max_size=3),
       nbr=st.lists(st.integers(0, 8), min_size=6, max_size=6), C=st.integers(1, 3))
def test_backpressure_never_pushes_uphill(own, nbr, C):
    net = hand_net(1, 2, 3, [(1, 0, 1), (2, 0, 1), (3, 1, 1), (4, 2, 1), (5, 1, 1), (5, 2, 1)],
                   max_ue_parents=2)
    groups = {}
    for i, n in enumerate(own):
        dest = 3 + i
        groups[bl.dest_group(net, dest)] = [pkt(dest, 0, 10 * i + j) for j in range(n)]
    groups = {g: v for g, v in groups.items() if v}
    snaps = [{}, {}, {}]
    for y in (1, 2):
        for i, g in enumerate(groups):
            snaps[y][g] = nbr[3 * (y - 1) + i]
    out = bl.backpressure_slot(bl.BackpressureState(), net, 0, groups, snaps, C)
    assert len(out) <= C
    for p, y in out:
        if y < net.K:
            g = bl.dest_group(net, p.dest)
            assert len(groups[g]) - snaps[y].get(g, 0) > 0


def test_epsilon_decay():
    assert bl.epsilon_decay(0.5, 0.9999, 0.01) == pytest.approx(0.49995, abs=1e-15)
    assert bl.epsilon_decay(0.01, 0.9999, 0.01) == 0.01
    assert bl.epsilon_decay(0.3, 1.0, 0.01) == 0.3


def test_q_select_rules():
    qt = bl.QTable(4, epsilon=1.0)
    rng = np.random.default_rng(0)
    mask = np.array([1, 0, 1, 1, 1], bool)
    draws = [bl.q_select(qt, 0, (1,), mask, rng) for _ in range(100_000)]
    freq = np.bincount(draws, minlength=5) / len(draws)
    assert np.all(np.abs(freq[mask] - 0.25) < 0.01) and freq[1] == 0
    qt.epsilon = 0.0
    qt.row(0, (1,))[:] = [-5, 0, -2, -7, -3]
    assert bl.q_select(qt, 0, (1,), mask, rng) == 2
    qt.row(0, (2,))[:] = -1.0
    assert bl.q_select(qt, 0, (2,), mask, rng) == 0


def test_q_update_examples():
    qt = bl.QTable(2, alpha=0.5, gamma=0.995)
    qt.row(0, "d")[1] = -20.0
    bl.q_update(qt, 0, 1, "d", -3.0, -10.0)
    assert abs(qt.row(0, "d")[1] - (-16.475)) <= 1e-12
    qt.alpha = 0.0
    bl.q_update(qt, 0, 1, "d", -99.0, -99.0)
    assert qt.row(0, "d")[1] == -16.475
    qt.alpha = 0.3
    qt.row(0, "d")[0] = -3.0 + 0.995 * -4.0
    bl.q_update(qt, 0, 0, "d", -3.0, -4.0)
    assert qt.row(0, "d")[0] == -3.0 + 0.995 * -4.0


def test_full_echo_moves_every_neighbor():
    mask = np.array([1, 1, 0], bool)
    a = bl.QTable(2, alpha=0.5)
    b = bl.QTable(2, alpha=0.5)
    for qt in (a, b):
        qt.row(0, "d")[:] = [-20.0, -8.0, 0.0]
    bl.full_echo_update(a, 0, "d", [-3.0, -1.0, np.nan], [-10.0, -2.0, np.nan], mask)
    bl.q_update(b, 0, 0, "d", -3.0, -10.0)
    assert a.row(0, "d")[0] == b.row(0, "d")[0] == pytest.approx(-16.475, abs=1e-12)
    assert a.row(0, "d")[1] != -8.0 and b.row(0, "d")[1] == -8.0
    c = bl.QTable(2, alpha=0.5)
    c.row(0, "d")[:] = [-3 + 0.995 * -10, -1 + 0.995 * -2, 0]
    before = c.row(0, "d").copy()
    bl.full_echo_update(c, 0, "d", [-3.0, -1.0, 0], [-10.0, -2.0, 0], mask)
    assert np.array_equal(c.row(0, "d"), before)
    with pytest.raises(MissingNeighborEstimate):
        bl.full_echo_update(c, 0, "d", [-3.0, np.nan, 0], [-10.0, -2.0, 0], mask)


def test_hybrid_step_rules():
    mask = np.array([1, 1, 1, 0], bool)
    hp = bl.HybridPolicyState(bl.QTable(3, alpha=0.2, gamma=0.9))
    th = hp.theta(0, "d")
    th[:] = [0.3, -0.2, 0.1, 0.0]
    # advantage r + gamma*best_next - best_here = -2 + 0.9*(-5) + 6.5 = 0
    bl.hybrid_step(hp, 0, 1, "d", -2.0, -5.0, -6.5, mask)
    assert th.tolist() == [0.3, -0.2, 0.1, 0.0]
    p_before = bl.softmax_probs(th, mask)[2]
    bl.hybrid_step(hp, 0, 2, "d", -1.0, -1.0, -5.0, mask)
    assert bl.softmax_probs(th, mask)[2] > p_before


def test_tabular_softmax_gradient_finite_difference():
    rng = np.random.default_rng(1)
    mask = np.array([1, 0, 1, 1, 1], bool)
    for _ in range(10):
        th = rng.normal(0, 2, 5)
        y = int(rng.choice(np.flatnonzero(mask)))
        g = bl.grad_log_softmax(th, mask, y)
        fd = np.zeros(5)
        for i in range(5):
            e = np.zeros(5)
            e[i] = 1e-6
            fd[i] = (np.log(bl.softmax_probs(th + e, mask)[y]) -
                     np.log(bl.softmax_probs(th - e, mask)[y])) / 2e-6
        assert np.max(np.abs(g - fd)) < 1e-6


def test_dest_group_matches_relational_map():
    net = generate_topology(SMALL, 0)
    for u in net.ue_indices():
        assert bl.dest_group(net, u) == tuple(np.flatnonzero(relational_map(u, net)).tolist())
        assert bl.dest_group(net, u, raw_ids=True) == u


@pytest.mark.parametrize("kind", ["q-routing", "full-echo", "hybrid"])
def test_q_values_bounded(kind):
    net = generate_topology(SMALL, 1)
    sim = Simulation(net, TrafficConfig(lam=3.0), 1)
    pol = bl.TabularPolicy(kind)
    for _ in range(1500):
        sim.advance_slot(pol)
        conservation_audit(sim)
    r_max = sim.traffic.ttl_init + net.cfg.delay_max
    bound = r_max / (1 - pol.qt.gamma)
    for table in pol.qt.tables:
        for row in table.values():
            assert np.all(np.isfinite(row)) and np.all(np.abs(row) <= bound)


def test_q_routing_epsilon_decays_per_slot():
    net = generate_topology(SMALL, 0)
    sim = Simulation(net, TrafficConfig(lam=1.0), 0)
    pol = bl.TabularPolicy("q-routing")
    for _ in range(10):
        sim.advance_slot(pol)
    assert pol.qt.epsilon == pytest.approx(0.9999 ** 10, rel=1e-12)
    assert bl.TabularPolicy("full-echo").qt.epsilon == 0.0


def test_dump_qtable(tmp_path):
    qt = bl.QTable(2)
    qt.row(1, (0, 1))[:] = [-1.5, -2.0, -3.0]
    bl.dump_qtable(qt, tmp_path / "q.csv")
    rows = list(csv.reader(open(tmp_path / "q.csv")))
    assert rows[0] == ["node", "neighbor", "group", "q_value"]
    assert rows[1:] == [["1", "0", "11", "-1.5"], ["1", "1", "11", "-2.0"],
                        ["1", "dest", "11", "-3.0"]]


@pytest.mark.parametrize("policy", [bl.ShortestPathPolicy(True), bl.ShortestPathPolicy(False),
                                    bl.BackpressurePolicy(1), bl.BackpressurePolicy(0),
                                    bl.RandomPolicy()], ids=lambda p: f"{p.name}")
def test_policies_conserve(policy):
    net = generate_topology(SMALL, 2)
    sim = Simulation(net, TrafficConfig(lam=2.0), 2)
    for _ in range(800):
        sim.advance_slot(policy)
        conservation_audit(sim)
    assert sim.delivered > 0
