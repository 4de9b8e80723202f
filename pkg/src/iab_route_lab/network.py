"""IAB network graph: greedy topology construction, relational destination
mapping, UE mobility, link-delay drift and base-station failure."""
from __future__ import annotations

import ast
import enum
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlreadyFailed,
    IndexOutOfRange,
    InfeasibleTopology,
    NotFailable,
    NotFailed,
    UnknownNode,
)


class Kind(enum.Enum):
    DONOR = "donor"
    IAB = "iab"
    UE = "ue"


@dataclass(frozen=True)
class NodeId:
    index: int
    kind: Kind


@dataclass
class TopologyConfig:
    num_donors: int = 1
    num_iab: int = 9
    num_ues: int = 100
    max_iab_parents: int = 3
    max_iab_children: int = 3
    max_ue_children: int = 35
    max_ue_parents: int = 2
    grid_size: float = 1000.0
    delay_min: int = 1
    delay_max: int = 4
    ue_speed: float = 0.0
    channels: int = 1
    # probability that a given link takes a +-1 drift step in a slot
    delay_drift_prob: float = 1.0

    def validate(self) -> None:
        for name in ("num_donors", "max_iab_parents", "max_iab_children",
                     "max_ue_children", "max_ue_parents", "channels", "delay_min"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_iab < 0 or self.num_ues < 0:
            raise ValueError("node counts must be non-negative")
        if self.delay_max < self.delay_min:
            raise ValueError("delay_max must be >= delay_min")
        if self.grid_size <= 0:
            raise ValueError("grid_size must be positive")
        if self.ue_speed < 0:
            raise ValueError("ue_speed must be non-negative")
        if not 0.0 <= self.delay_drift_prob <= 1.0:
            raise ValueError("delay_drift_prob must lie in [0, 1]")

    @property
    def num_bs(self) -> int:
        return self.num_donors + self.num_iab


@dataclass
class TopologyDelta:
    """Everything that changed in the graph during one slot."""

    added: list = field(default_factory=list)          # (child, parent, delay)
    removed: list = field(default_factory=list)        # (a, b)
    delay_changes: list = field(default_factory=list)  # (a, b, old, new)
    failed: list = field(default_factory=list)
    recovered: list = field(default_factory=list)
    unreachable: list = field(default_factory=list)    # nodes left without a donor path

    def association_changes(self) -> int:
        return len(self.added) + len(self.removed)

    def merge(self, other: "TopologyDelta") -> "TopologyDelta":
        for name in ("added", "removed", "delay_changes", "failed", "recovered", "unreachable"):
            getattr(self, name).extend(getattr(other, name))
        return self


def _key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


class Network:
    """Undirected weighted graph of donors, IAB nodes and UEs.

    Node indices are dense: donors first, then IAB nodes, then UEs, so a
    base-station index doubles as its position in K-length vectors.
    Every link is stored with a (child, parent) orientation so the degree
    bounds can be audited.
    """

    def __init__(self, cfg: TopologyConfig, positions: np.ndarray):
        self.cfg = cfg
        n = cfg.num_bs + cfg.num_ues
        self.nodes = [NodeId(i, self._kind_of(i)) for i in range(n)]
        self.pos = np.asarray(positions, dtype=float).reshape(n, 2).copy()
        self.adj: list[set[int]] = [set() for _ in range(n)]
        self.parents: list[set[int]] = [set() for _ in range(n)]
        self.iab_children = [0] * n
        self.ue_children = [0] * n
        self.delay: dict[tuple[int, int], int] = {}
        self.initial_delay: dict[tuple[int, int], int] = {}
        self.failed: set[int] = set()
        self.waypoints: np.ndarray | None = None
        self.version = 0  # bumped on every link-set change

    def _kind_of(self, i: int) -> Kind:
        if i < self.cfg.num_donors:
            return Kind.DONOR
        if i < self.cfg.num_bs:
            return Kind.IAB
        return Kind.UE

    # -- queries -----------------------------------------------------------
    @property
    def K(self) -> int:
        return self.cfg.num_bs

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def links(self) -> set[tuple[int, int]]:
        return set(self.delay)

    def ue_indices(self) -> range:
        return range(self.K, self.num_nodes)

    def iab_indices(self) -> range:
        return range(self.cfg.num_donors, self.K)

    def is_bs(self, i: int) -> bool:
        return i < self.K

    def kind(self, i: int) -> Kind:
        self._check(i)
        return self.nodes[i].kind

    def neighbors(self, i: int) -> set[int]:
        return self.adj[i]

    def link_delay(self, a: int, b: int) -> int:
        return self.delay[_key(a, b)]

    def has_link(self, a: int, b: int) -> bool:
        return _key(a, b) in self.delay

    def distance(self, a: int, b: int) -> float:
        d = self.pos[a] - self.pos[b]
        return math.hypot(d[0], d[1])

    def _check(self, i: int) -> None:
        if not isinstance(i, (int, np.integer)) or not 0 <= i < self.num_nodes:
            raise UnknownNode(f"node {i} is not in the network")

    # -- mutation ----------------------------------------------------------
    def add_link(self, child: int, parent: int, delay: int) -> None:
        k = _key(child, parent)
        self.delay[k] = int(delay)
        self.initial_delay[k] = int(delay)
        self.adj[child].add(parent)
        self.adj[parent].add(child)
        self.parents[child].add(parent)
        if self.nodes[child].kind is Kind.UE:
            self.ue_children[parent] += 1
        else:
            self.iab_children[parent] += 1
        self.version += 1

    def remove_link(self, a: int, b: int) -> None:
        k = _key(a, b)
        del self.delay[k]
        del self.initial_delay[k]
        self.adj[a].discard(b)
        self.adj[b].discard(a)
        if b in self.parents[a]:
            child, parent = a, b
        else:
            child, parent = b, a
        self.parents[child].discard(parent)
        if self.nodes[child].kind is Kind.UE:
            self.ue_children[parent] -= 1
        else:
            self.iab_children[parent] -= 1
        self.version += 1

    def copy(self) -> "Network":
        other = Network(self.cfg, self.pos)
        other.adj = [set(s) for s in self.adj]
        other.parents = [set(s) for s in self.parents]
        other.iab_children = list(self.iab_children)
        other.ue_children = list(self.ue_children)
        other.delay = dict(self.delay)
        other.initial_delay = dict(self.initial_delay)
        other.failed = set(self.failed)
        other.waypoints = None if self.waypoints is None else self.waypoints.copy()
        other.version = self.version
        return other

    # -- invariants --------------------------------------------------------
    def donor_reachable(self) -> set[int]:
        """Nodes reachable from a donor; UEs never relay."""
        seen = set(range(self.cfg.num_donors))
        todo = deque(seen)
        while todo:
            n = todo.popleft()
            if not self.is_bs(n):
                continue
            for m in self.adj[n]:
                if m not in seen:
                    seen.add(m)
                    todo.append(m)
        return seen

    def violations(self) -> list[str]:
        cfg = self.cfg
        out = []
        reach = self.donor_reachable()
        for i in range(self.num_nodes):
            if i in self.failed:
                if self.adj[i]:
                    out.append(f"failed node {i} still has links")
                continue
            if i not in reach:
                out.append(f"node {i} has no path to a donor")
            kind = self.nodes[i].kind
            iab_parents = len(self.parents[i])
            if kind is Kind.IAB and iab_parents > cfg.max_iab_parents:
                out.append(f"IAB node {i} has {iab_parents} parents")
            if kind is Kind.UE and iab_parents > cfg.max_ue_parents:
                out.append(f"UE {i} has {iab_parents} parents")
            if kind is not Kind.UE:
                if self.iab_children[i] > cfg.max_iab_children:
                    out.append(f"BS {i} has {self.iab_children[i]} IAB children")
                if self.ue_children[i] > cfg.max_ue_children:
                    out.append(f"BS {i} has {self.ue_children[i]} UE children")
        for (a, b), d in self.delay.items():
            if d < 1:
                out.append(f"link {a}-{b} has delay {d}")
            if not (self.is_bs(a) or self.is_bs(b)):
                out.append(f"link {a}-{b} joins two UEs")
        return out

    # -- snapshot ----------------------------------------------------------
    def to_text(self) -> str:
        lines = [f"config {_cfg_tokens(self.cfg)}"]
        for node in self.nodes:
            x, y = self.pos[node.index]
            tail = " failed" if node.index in self.failed else ""
            lines.append(f"node {node.index} {node.kind.value} {float(x)!r} {float(y)!r}{tail}")
        for child in range(self.num_nodes):
            for parent in sorted(self.parents[child]):
                lines.append(f"link {child} {parent} {self.link_delay(child, parent)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Network":
        cfg = None
        nodes: list[tuple[int, str, float, float, bool]] = []
        links: list[tuple[int, int, int]] = []
        for raw in text.splitlines():
            parts = raw.split()
            if not parts:
                continue
            if parts[0] == "config":
                cfg = _cfg_from_tokens(parts[1:])
            elif parts[0] == "node":
                nodes.append((int(parts[1]), parts[2], float(parts[3]), float(parts[4]),
                              len(parts) > 5 and parts[5] == "failed"))
            elif parts[0] == "link":
                links.append((int(parts[1]), int(parts[2]), int(parts[3])))
            else:
                raise ValueError(f"unrecognised snapshot line: {raw!r}")
        if cfg is None:
            counts = {k: sum(1 for n in nodes if n[1] == k.value) for k in Kind}
            cfg = TopologyConfig(num_donors=counts[Kind.DONOR], num_iab=counts[Kind.IAB],
                                 num_ues=counts[Kind.UE])
        nodes.sort()
        net = cls(cfg, np.array([[n[2], n[3]] for n in nodes]))
        for idx, kind, *_ in nodes:
            if net.nodes[idx].kind.value != kind:
                raise ValueError(f"node {idx} kind {kind} disagrees with the counts")
        net.failed = {n[0] for n in nodes if n[4]}
        for child, parent, d in links:
            net.add_link(child, parent, d)
        return net


_CFG_FIELDS = ("num_donors", "num_iab", "num_ues", "max_iab_parents", "max_iab_children",
               "max_ue_children", "max_ue_parents", "grid_size", "delay_min", "delay_max",
               "ue_speed", "channels", "delay_drift_prob")


def _cfg_tokens(cfg: TopologyConfig) -> str:
    return " ".join(f"{f}={getattr(cfg, f)!r}" for f in _CFG_FIELDS)


def _cfg_from_tokens(tokens: list[str]) -> TopologyConfig:
    values = {}
    for tok in tokens:
        k, v = tok.split("=", 1)
        values[k] = ast.literal_eval(v)
    return TopologyConfig(**values)


# -- construction -------------------------------------------------------------

def _nearest_with_capacity(net: Network, node: int, candidates, has_capacity, limit: int) -> list[int]:
    ranked = sorted((net.distance(node, c), c) for c in candidates if has_capacity(c))
    return [c for _, c in ranked[:limit]]


def _draw_delay(cfg: TopologyConfig, rng: np.random.Generator) -> int:
    return int(rng.integers(cfg.delay_min, cfg.delay_max + 1))


def generate_topology(cfg: TopologyConfig, seed: int) -> Network:
    """Place nodes uniformly on the grid and attach them greedily.

    IAB nodes are activated in index order and link to up to
    ``max_iab_parents`` nearest active base stations that still have
    IAB-child capacity; UEs then link to up to ``max_ue_parents`` nearest
    base stations with UE capacity.
    """
    cfg.validate()
    if cfg.max_ue_children * cfg.num_bs < cfg.num_ues:
        raise InfeasibleTopology(
            f"{cfg.num_bs} base stations x {cfg.max_ue_children} UEs cannot host {cfg.num_ues} UEs")
    rng = np.random.default_rng(seed)
    n = cfg.num_bs + cfg.num_ues
    net = Network(cfg, rng.uniform(0.0, cfg.grid_size, size=(n, 2)))

    active = list(range(cfg.num_donors))
    for b in net.iab_indices():
        chosen = _nearest_with_capacity(
            net, b, active, lambda c: net.iab_children[c] < cfg.max_iab_children,
            cfg.max_iab_parents)
        if not chosen:
            raise InfeasibleTopology(f"IAB node {b} found no parent with spare capacity")
        for p in chosen:
            net.add_link(b, p, _draw_delay(cfg, rng))
        active.append(b)

    for u in net.ue_indices():
        chosen = _nearest_with_capacity(
            net, u, active, lambda c: net.ue_children[c] < cfg.max_ue_children,
            cfg.max_ue_parents)
        if not chosen:
            raise InfeasibleTopology(f"UE {u} found no base station with spare capacity")
        for p in chosen:
            net.add_link(u, p, _draw_delay(cfg, rng))
    return net


def relational_map(dest: int, net: Network) -> np.ndarray:
    """Binary K-vector marking the base stations currently linked to ``dest``."""
    net._check(dest)
    h = np.zeros(net.K, dtype=np.int8)
    for j in net.adj[dest]:
        if j < net.K:
            h[j] = 1
    return h


def group_key(dest: int, net: Network) -> bytes:
    """Hashable form of the relational map, used to key tabular policies."""
    return relational_map(dest, net).tobytes()


def one_hot(i: int, K: int) -> np.ndarray:
    if not 0 <= i < K:
        raise IndexOutOfRange(f"index {i} outside [0, {K})")
    v = np.zeros(K, dtype=np.int8)
    v[i] = 1
    return v


# -- dynamics -----------------------------------------------------------------

def step_dynamics(net: Network, cfg: TopologyConfig, rng: np.random.Generator) -> TopologyDelta:
    """Advance UE mobility, re-associations and link-delay drift by one slot."""
    delta = TopologyDelta()
    if cfg.ue_speed > 0 and cfg.num_ues:
        _move_ues(net, cfg, rng)
        _reassociate(net, cfg, rng, delta)

    if cfg.delay_drift_prob > 0 and net.delay:
        keys = list(net.delay)
        steps = rng.choice(np.array([-1, 1]), size=len(keys))
        if cfg.delay_drift_prob < 1.0:
            steps = np.where(rng.random(len(keys)) < cfg.delay_drift_prob, steps, 0)
        old = np.fromiter(net.delay.values(), dtype=np.int64, count=len(keys))
        init = np.fromiter((net.initial_delay[k] for k in keys), dtype=np.int64, count=len(keys))
        lo = np.maximum(cfg.delay_min, np.ceil(0.5 * init).astype(np.int64))
        hi = np.maximum(lo, np.minimum(cfg.delay_max, np.floor(1.5 * init).astype(np.int64)))
        new = np.minimum(hi, np.maximum(lo, old + steps))
        for i in np.flatnonzero(new != old).tolist():
            k = keys[i]
            net.delay[k] = int(new[i])
            delta.delay_changes.append((k[0], k[1], int(old[i]), int(new[i])))
    return delta


def _move_ues(net: Network, cfg: TopologyConfig, rng: np.random.Generator) -> None:
    ues = np.arange(net.K, net.num_nodes)
    if net.waypoints is None:
        net.waypoints = rng.uniform(0.0, cfg.grid_size, size=(len(ues), 2))
    pos = net.pos[ues]
    gap = net.waypoints - pos
    dist = np.hypot(gap[:, 0], gap[:, 1])
    arrived = dist <= cfg.ue_speed
    step = np.where(dist[:, None] > 0, gap / np.maximum(dist, 1e-12)[:, None], 0.0)
    new_pos = np.where(arrived[:, None], net.waypoints, pos + cfg.ue_speed * step)
    net.pos[ues] = new_pos
    if arrived.any():
        net.waypoints[arrived] = rng.uniform(0.0, cfg.grid_size, size=(int(arrived.sum()), 2))


def _reassociate(net: Network, cfg: TopologyConfig, rng: np.random.Generator,
                 delta: TopologyDelta) -> None:
    reach = _reachable_bs(net)
    bs = np.array([b for b in range(net.K) if b not in net.failed and b in reach])
    if bs.size == 0:
        return
    for u in net.ue_indices():
        current = sorted(net.parents[u])
        cand_d = np.hypot(*(net.pos[bs] - net.pos[u]).T)
        best, best_d = None, math.inf
        for b, d in zip(bs.tolist(), cand_d.tolist()):
            if b in net.parents[u] or net.ue_children[b] >= cfg.max_ue_children:
                continue
            if d < best_d:
                best, best_d = b, d
        if best is None:
            continue
        if len(current) < cfg.max_ue_parents:
            delay = _draw_delay(cfg, rng)
            net.add_link(u, best, delay)
            delta.added.append((u, best, delay))
            continue
        far = max(current, key=lambda p: (net.distance(u, p), p))
        if best_d < net.distance(u, far):
            net.remove_link(u, far)
            delta.removed.append((u, far))
            delay = _draw_delay(cfg, rng)
            net.add_link(u, best, delay)
            delta.added.append((u, best, delay))


def _reachable_bs(net: Network) -> set[int]:
    return {n for n in net.donor_reachable() if n < net.K}


def _reattach(net: Network, orphans: list[int], rng: np.random.Generator,
              delta: TopologyDelta) -> None:
    """Give every orphan one replacement parent reachable from a donor."""
    cfg = net.cfg
    pending = sorted(orphans)
    progress = True
    while pending and progress:
        progress = False
        reach = _reachable_bs(net)
        for node in list(pending):
            if net.nodes[node].kind is Kind.UE:
                limit, cap = cfg.max_ue_parents, lambda c: net.ue_children[c] < cfg.max_ue_children
            else:
                limit, cap = cfg.max_iab_parents, lambda c: net.iab_children[c] < cfg.max_iab_children
            if len(net.parents[node]) >= limit:
                pending.remove(node)
                continue
            pool = [c for c in reach if c != node and c not in net.failed and c not in net.adj[node]]
            chosen = _nearest_with_capacity(net, node, pool, cap, 1)
            if chosen:
                d = _draw_delay(cfg, rng)
                net.add_link(node, chosen[0], d)
                delta.added.append((node, chosen[0], d))
                pending.remove(node)
                progress = True
                reach = _reachable_bs(net)
    reach = net.donor_reachable()
    delta.unreachable.extend(
        i for i in range(net.num_nodes) if i not in net.failed and i not in reach)


def fail_node(net: Network, node: int, rng: np.random.Generator | None = None) -> TopologyDelta:
    """Remove an IAB node's links and greedily re-home its children."""
    net._check(node)
    if net.nodes[node].kind is not Kind.IAB:
        raise NotFailable(f"node {node} is a {net.nodes[node].kind.value}; only IAB nodes fail")
    if node in net.failed:
        raise AlreadyFailed(f"node {node} already failed")
    rng = rng if rng is not None else np.random.default_rng(0)
    delta = TopologyDelta(failed=[node])
    orphans = [m for m in net.adj[node] if node in net.parents[m]]
    for m in sorted(net.adj[node]):
        net.remove_link(node, m)
        delta.removed.append(_key(node, m))
    net.failed.add(node)
    _reattach(net, orphans, rng, delta)
    return delta


def recover_node(net: Network, node: int, rng: np.random.Generator | None = None) -> TopologyDelta:
    """Bring a failed IAB node back and attach it greedily."""
    net._check(node)
    if node not in net.failed:
        raise NotFailed(f"node {node} is not failed")
    rng = rng if rng is not None else np.random.default_rng(0)
    cfg = net.cfg
    net.failed.discard(node)
    delta = TopologyDelta(recovered=[node])
    pool = [c for c in _reachable_bs(net) if c != node]
    chosen = _nearest_with_capacity(
        net, node, pool, lambda c: net.iab_children[c] < cfg.max_iab_children,
        cfg.max_iab_parents)
    for p in chosen:
        d = _draw_delay(cfg, rng)
        net.add_link(node, p, d)
        delta.added.append((node, p, d))
    if not chosen:
        delta.unreachable.append(node)
    return delta
