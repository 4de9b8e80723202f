"""Comparison routing policies.

Shortest-path routing (queue-aware and delay-only), back-pressure,
Q-Routing, Full-Echo Q-Routing, Hybrid (Q-values driving a tabular
softmax actor) and a uniform-random reference.  Tabular policies key
their tables by destination group: the set of base stations the
destination UE is linked to.
"""
from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMask, MissingNeighborEstimate, NoPath
from .network import Network
from .nn import masked_softmax
from .sim import Decision, Hop, Packet, RoutingPolicy, Simulation


def dest_group(net: Network, dest: int, raw_ids: bool = False):
    """Table key for ``dest``: its linked base stations (or the raw UE id)."""
    if raw_ids:
        return dest
    K = net.K
    return tuple(sorted(j for j in net.adj[dest] if j < K))


def group_label(key, K: int) -> str:
    if isinstance(key, tuple):
        bits = ["0"] * K
        for j in key:
            bits[j] = "1"
        return "".join(bits)
    return f"ue{key}"


def _mask(net: Network, node: int, dest: int) -> np.ndarray:
    K = net.K
    m = np.zeros(K + 1, dtype=bool)
    adj = net.adj[node]
    for j in adj:
        if j < K:
            m[j] = True
    if dest in adj:
        m[K] = True
    return m


def _slot_target(net: Network, dest: int, a: int) -> int:
    return dest if a == net.K else a


# -- shortest paths -----------------------------------------------------------

def _costs_to(net: Network, dest: int, node_cost) -> dict[int, float]:
    """Cheapest cost from every base station to ``dest``.

    Edge u->v costs link_delay(u, v) + node_cost[v] for a base station v
    and just the link delay into the destination.  UEs never relay.
    """
    K = net.K
    dist: dict[int, float] = {}
    heap = []
    for j in net.adj[dest]:
        if j < K and j not in net.failed:
            heapq.heappush(heap, (float(net.link_delay(j, dest)), j))
    while heap:
        d, v = heapq.heappop(heap)
        if v in dist:
            continue
        dist[v] = d
        into_v = node_cost[v] if node_cost is not None else 0.0
        for u in net.adj[v]:
            if u < K and u not in dist and u not in net.failed:
                heapq.heappush(heap, (d + net.link_delay(u, v) + into_v, u))
    return dist


def _first_hop(net: Network, node: int, dest: int, dist: dict[int, float], node_cost) -> int:
    best, choice = math.inf, None
    for y in sorted(net.adj[node]):
        if y == dest:
            c = float(net.link_delay(node, y))
        elif y < net.K and y in dist:
            c = net.link_delay(node, y) + (node_cost[y] if node_cost is not None else 0.0) + dist[y]
        else:
            continue
        if c < best:
            best, choice = c, y
    if choice is None:
        raise NoPath(f"no path from {node} to {dest}")
    return choice


def centralized_next_hop(net: Network, packet: Packet, queue_delays) -> int:
    """First hop of the cheapest path with queue delay charged at each receiving station."""
    dist = _costs_to(net, packet.dest, queue_delays)
    return _first_hop(net, packet.current_node, packet.dest, dist, queue_delays)


def minhop_next_hop(net: Network, packet: Packet) -> int:
    """First hop of the path with the least total link delay."""
    dist = _costs_to(net, packet.dest, None)
    return _first_hop(net, packet.current_node, packet.dest, dist, None)


class ShortestPathPolicy(RoutingPolicy):
    def __init__(self, queue_aware: bool):
        self.queue_aware = queue_aware
        self.name = "centralized" if queue_aware else "minhop"

    def decide(self, sim: Simulation, decisions: list[Decision]) -> list[int | None]:
        net = sim.net
        cost = None
        if self.queue_aware:
            C = net.cfg.channels
            cost = [n / C for n in sim.queue_lengths()]
        cache: dict[int, dict] = {}
        out: list[int | None] = []
        for d in decisions:
            dest = d.packet.dest
            dist = cache.get(dest)
            if dist is None:
                dist = cache[dest] = _costs_to(net, dest, cost)
            try:
                out.append(_first_hop(net, d.node, dest, dist, cost))
            except NoPath:
                out.append(None)
        return out


class RandomPolicy(RoutingPolicy):
    name = "random"

    def decide(self, sim: Simulation, decisions: list[Decision]) -> list[int | None]:
        out: list[int | None] = []
        for d in decisions:
            valid = sim.valid_hops(d.node, d.packet)
            out.append(valid[int(sim.policy_rng.integers(len(valid)))] if valid else None)
        return out


# -- back-pressure ------------------------------------------------------------

@dataclass
class BackpressureState:
    staleness: int = 1
    raw_ids: bool = False
    snapshot: list = field(default_factory=list)   # per station: {group: queue length}

    def counts(self, sim: Simulation) -> list[dict]:
        net = sim.net
        out = []
        for q in sim.queues:
            c: dict = {}
            for p in q.packets():
                g = dest_group(net, p.dest, self.raw_ids)
                c[g] = c.get(g, 0) + 1
            out.append(c)
        return out


def backpressure_slot(state: BackpressureState, net: Network, node: int, groups: dict,
                      neighbor_snapshots: list[dict], C: int) -> list[tuple[Packet, int]]:
    """Pick up to C (group, neighbour) pairs by largest positive queue differential.

    ``groups`` maps each group to the node's packets in TTL-priority order.
    The destination UE itself counts as an empty queue and wins ties
    against relaying base stations; other ties go to the lowest index.
    """
    K = net.K
    pairs = []
    for g, pkts in groups.items():
        own = len(pkts)
        for y in sorted(net.adj[node]):
            if y < K:
                diff = own - neighbor_snapshots[y].get(g, 0)
                pairs.append((-diff, y, g))
        # delivery: the group's destinations are adjacent iff node is in the group
        if pkts and pkts[0].dest in net.adj[node]:
            pairs.append((-own, -1, g))
    pairs.sort(key=lambda t: (t[0], t[1], str(t[2])))
    taken = {g: 0 for g in groups}
    out = []
    for neg, y, g in pairs:
        if len(out) >= C or neg >= 0:
            break
        pkts = groups[g]
        if taken[g] >= len(pkts):
            continue
        p = pkts[taken[g]]
        taken[g] += 1
        out.append((p, p.dest if y < 0 else y))
    return out


class BackpressurePolicy(RoutingPolicy):
    name = "backpressure"

    def __init__(self, staleness: int = 1, raw_ids: bool = False):
        if staleness not in (0, 1):
            raise ValueError("staleness must be 0 or 1 slots")
        self.state = BackpressureState(staleness, raw_ids)
        self._route: dict[int, int] = {}
        self._current: list[dict] | None = None

    def bind(self, sim: Simulation) -> None:
        self.state.snapshot = [dict() for _ in range(sim.net.K)]

    def begin_slot(self, sim: Simulation) -> None:
        self._current = None
        self._route = {}

    def schedule(self, sim: Simulation, node: int, capacity: int) -> list[Packet]:
        net = sim.net
        if self.state.staleness == 0:
            if self._current is None:
                self._current = self.state.counts(sim)
            snap = self._current
        else:
            snap = self.state.snapshot
        groups: dict = {}
        for p in sim.queues[node].packets():
            groups.setdefault(dest_group(net, p.dest, self.state.raw_ids), []).append(p)
        chosen = backpressure_slot(self.state, net, node, groups, snap, capacity)
        for p, y in chosen:
            self._route[p.id] = y
        return [p for p, _ in chosen]

    def decide(self, sim: Simulation, decisions: list[Decision]) -> list[int | None]:
        return [self._route.get(d.packet.id) for d in decisions]

    def end_slot(self, sim: Simulation) -> None:
        self.state.snapshot = self.state.counts(sim)


# -- tabular Q-learning family -----------------------------------------------

def epsilon_decay(eps: float, eps_d: float, eps_min: float) -> float:
    return max(eps * eps_d, eps_min)


@dataclass
class QTable:
    K: int
    alpha: float = 0.1
    gamma: float = 0.995
    epsilon: float = 1.0
    eps_decay: float = 0.9999
    eps_min: float = 0.01
    tables: list = field(default_factory=list)

    def __post_init__(self):
        if not self.tables:
            self.tables = [dict() for _ in range(self.K)]

    def row(self, n: int, key) -> np.ndarray:
        t = self.tables[n]
        r = t.get(key)
        if r is None:
            r = t[key] = np.zeros(self.K + 1)
        return r

    def best(self, n: int, key, mask) -> float:
        r = self.tables[n].get(key)
        if r is None:
            return 0.0
        return float(r[np.asarray(mask, dtype=bool)].max())


def _greedy(row: np.ndarray, mask: np.ndarray) -> int:
    return int(np.argmax(np.where(mask, row, -np.inf)))


def q_select(qt: QTable, n: int, key, mask, rng: np.random.Generator) -> int:
    """Epsilon-greedy action slot; greedy ties go to the lowest index."""
    mask = np.asarray(mask, dtype=bool)
    valid = np.flatnonzero(mask)
    if valid.size == 0:
        raise EmptyMask(f"station {n} has no valid action")
    if qt.epsilon > 0 and rng.random() < qt.epsilon:
        return int(valid[rng.integers(valid.size)])
    return _greedy(qt.row(n, key), mask)


def q_update(qt: QTable, n: int, y: int, key, r: float, best_next: float) -> None:
    row = qt.row(n, key)
    row[y] += qt.alpha * (r + qt.gamma * best_next - row[y])


def full_echo_update(qt: QTable, n: int, key, rewards, bests, mask) -> None:
    """Apply the Q-Routing update to every valid action slot at once."""
    mask = np.asarray(mask, dtype=bool)
    rewards = np.asarray(rewards, dtype=float)
    bests = np.asarray(bests, dtype=float)
    if np.isnan(rewards[mask]).any() or np.isnan(bests[mask]).any():
        raise MissingNeighborEstimate(f"station {n} is missing a neighbour estimate")
    row = qt.row(n, key)
    row[mask] += qt.alpha * (rewards[mask] + qt.gamma * bests[mask] - row[mask])


@dataclass
class HybridPolicyState:
    qt: QTable
    prefs: list = field(default_factory=list)

    def __post_init__(self):
        if not self.prefs:
            self.prefs = [dict() for _ in range(self.qt.K)]

    def theta(self, n: int, key) -> np.ndarray:
        t = self.prefs[n]
        r = t.get(key)
        if r is None:
            r = t[key] = np.zeros(self.qt.K + 1)
        return r


def softmax_probs(theta: np.ndarray, mask) -> np.ndarray:
    return masked_softmax(theta, np.asarray(mask, dtype=bool))


def grad_log_softmax(theta: np.ndarray, mask, y: int) -> np.ndarray:
    """d log pi(y) / d theta for a masked tabular softmax."""
    g = -softmax_probs(theta, mask)
    g[y] += 1.0
    return g


def hybrid_step(hp: HybridPolicyState, n: int, y: int, key, r: float, best_next: float,
                best_here: float, mask) -> None:
    q_update(hp.qt, n, y, key, r, best_next)
    adv = r + hp.qt.gamma * best_next - best_here
    if adv:
        th = hp.theta(n, key)
        th += hp.qt.alpha * adv * grad_log_softmax(th, mask, y)


class TabularPolicy(RoutingPolicy):
    """Q-Routing ("q-routing"), Full-Echo ("full-echo") and Hybrid ("hybrid")."""

    def __init__(self, kind: str = "q-routing", *, alpha: float = 0.1, gamma: float = 0.995,
                 epsilon: float = 1.0, eps_decay: float = 0.9999, eps_min: float = 0.01,
                 raw_ids: bool = False, drop_penalty: float = 0.0):
        if kind not in ("q-routing", "full-echo", "hybrid"):
            raise ValueError(f"unknown tabular policy {kind!r}")
        self.kind = self.name = kind
        self.qt = QTable(0, alpha, gamma, epsilon if kind == "q-routing" else 0.0,
                         eps_decay, eps_min)
        self.raw_ids = raw_ids
        self.drop_penalty = drop_penalty
        self.hybrid: HybridPolicyState | None = None
        self._keys: dict[int, tuple] = {}

    def bind(self, sim: Simulation) -> None:
        K = sim.net.K
        if self.qt.K != K:
            self.qt.K = K
            self.qt.tables = [dict() for _ in range(K)]
            if self.kind == "hybrid":
                self.hybrid = HybridPolicyState(self.qt)
        self.rng = sim.policy_rng

    def decide(self, sim: Simulation, decisions: list[Decision]) -> list[int | None]:
        net = sim.net
        out: list[int | None] = []
        self._keys = {}
        for d in decisions:
            dest = d.packet.dest
            mask = _mask(net, d.node, dest)
            if not mask.any():
                out.append(None)
                continue
            key = dest_group(net, dest, self.raw_ids)
            if self.kind == "q-routing":
                a = q_select(self.qt, d.node, key, mask, self.rng)
            elif self.kind == "full-echo":
                a = _greedy(self.qt.row(d.node, key), mask)
            else:
                probs = softmax_probs(self.hybrid.theta(d.node, key), mask)
                c = np.cumsum(probs)
                a = int(np.searchsorted(c / c[-1], self.rng.random(), side="right"))
            self._keys[d.packet.id] = (key, mask)
            out.append(_slot_target(net, dest, a))
        return out

    def _estimate(self, net: Network, y: int, dest: int, key, ttl_after: int) -> float:
        if y == dest or ttl_after <= 0:
            return 0.0
        return self.qt.best(y, key, _mask(net, y, dest))

    def feedback(self, sim: Simulation, hops: list[Hop]) -> None:
        net = sim.net
        for h in hops:
            key, mask = self._keys[h.packet.id]
            dest = h.packet.dest
            r = -(h.delay + (self.drop_penalty if h.expires else 0.0))
            best_next = self._estimate(net, h.dst, dest, key, h.ttl_after)
            if self.kind == "q-routing":
                q_update(self.qt, h.src, h.action, key, r, best_next)
            elif self.kind == "hybrid":
                best_here = self.qt.best(h.src, key, mask)
                hybrid_step(self.hybrid, h.src, h.action, key, r, best_next, best_here, mask)
            else:
                K = net.K
                rewards = np.full(K + 1, np.nan)
                bests = np.full(K + 1, np.nan)
                for a in np.flatnonzero(mask):
                    y = _slot_target(net, dest, int(a))
                    link = net.link_delay(h.src, y)
                    after = h.ttl - link
                    rewards[a] = -(h.queue_wait + link + (self.drop_penalty if after <= 0 else 0.0))
                    bests[a] = self._estimate(net, y, dest, key, after)
                full_echo_update(self.qt, h.src, key, rewards, bests, mask)

    def end_slot(self, sim: Simulation) -> None:
        if self.kind == "q-routing":
            self.qt.epsilon = epsilon_decay(self.qt.epsilon, self.qt.eps_decay, self.qt.eps_min)


def dump_qtable(qt: QTable, path) -> None:
    """CSV rows node,neighbor,group,q_value; the delivery slot is written as 'dest'."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["node", "neighbor", "group", "q_value"])
        for n, table in enumerate(qt.tables):
            for key in sorted(table, key=lambda k: group_label(k, qt.K)):
                row = table[key]
                for a in range(qt.K + 1):
                    w.writerow([n, "dest" if a == qt.K else a, group_label(key, qt.K),
                                repr(float(row[a]))])
