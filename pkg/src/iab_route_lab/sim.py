"""Time-slotted packet engine.

Each slot runs, in order: topology dynamics, air arrivals, Poisson
injection, head-of-queue promotion, routing decisions, hop execution,
TTL expiry and reporting.  Packet modes follow Off -> Queue -> Decision ->
Air -> (Queue | Off); a promoted packet the policy declines to move goes
back to its queue.
"""
from __future__ import annotations

import enum
import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import AuditMismatch, PolicyReturnedInvalidHop
from .network import Network, TopologyDelta, fail_node, recover_node, step_dynamics


class Mode(enum.Enum):
    OFF = "off"
    QUEUE = "queue"
    DECISION = "decision"
    AIR = "air"


LEGAL_TRANSITIONS = frozenset({
    (Mode.OFF, Mode.QUEUE),
    (Mode.QUEUE, Mode.DECISION),
    (Mode.DECISION, Mode.AIR),
    (Mode.DECISION, Mode.QUEUE),  # null action: packet held at its station
    (Mode.AIR, Mode.AIR),
    (Mode.AIR, Mode.QUEUE),
    (Mode.QUEUE, Mode.OFF),
    (Mode.DECISION, Mode.OFF),
    (Mode.AIR, Mode.OFF),
})


@dataclass(eq=False)
class Packet:
    id: int
    dest: int
    current_node: int
    created_slot: int
    ttl_init: int
    mode: Mode = Mode.OFF
    queue_entry_slot: int = 0
    arrive_slot: int = 0
    seq: int = 0

    @property
    def deadline(self) -> int:
        """Last slot in which the packet is still alive."""
        return self.created_slot + self.ttl_init - 1

    def ttl(self, slot: int) -> int:
        return self.deadline - slot + 1

    def queue_wait(self, slot: int) -> int:
        return slot - self.queue_entry_slot

    def air_remaining(self, slot: int) -> int:
        return max(0, self.arrive_slot - slot)


@dataclass
class TrafficConfig:
    lam: float = 3.0
    # packets/slot placed at the donor; None means the donor's channel count
    donor_bandwidth: int | None = None
    ttl_init: int = 50

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.ttl_init < 1:
            raise ValueError("ttl_init must be >= 1")
        if self.donor_bandwidth is not None and self.donor_bandwidth < 0:
            raise ValueError("donor_bandwidth must be non-negative")


class BaseStationQueue:
    """Unbounded queue ordered by remaining TTL, then arrival sequence.

    All packets share one ``ttl_init`` so ordering by deadline is ordering
    by remaining TTL.  Removal is lazy: stale heap entries are skipped.
    """

    def __init__(self, owner: int):
        self.owner = owner
        self._heap: list[tuple[int, int, Packet]] = []
        self.size = 0

    def push(self, p: Packet) -> None:
        heapq.heappush(self._heap, (p.deadline, p.seq, p))
        self.size += 1

    def _live(self, entry) -> bool:
        _, seq, p = entry
        return p.mode is Mode.QUEUE and p.current_node == self.owner and p.seq == seq

    def pop(self) -> Packet | None:
        while self._heap:
            entry = heapq.heappop(self._heap)
            if self._live(entry):
                self.size -= 1
                return entry[2]
        return None

    def discard(self, p: Packet) -> None:
        """Account for a packet leaving by a path other than pop()."""
        self.size -= 1

    def __len__(self) -> int:
        return self.size

    def packets(self) -> list[Packet]:
        """Live packets in extraction order."""
        return [e[2] for e in sorted(self._heap, key=lambda e: e[:2]) if self._live(e)]

    def compact(self) -> None:
        if len(self._heap) > 4 * self.size + 64:
            self._heap = [e for e in self._heap if self._live(e)]
            heapq.heapify(self._heap)


@dataclass
class SlotReport:
    slot: int
    injected: int = 0
    delivered: int = 0
    dropped: int = 0
    latencies: list = field(default_factory=list)
    decider_delays: list = field(default_factory=list)
    reward: float = 0.0


class WindowStats(NamedTuple):
    arrival_ratio: float
    avg_delay: float
    dropped: int
    empty: bool


class MetricsWindow:
    """Sliding window over the last ``length`` slot reports."""

    def __init__(self, length: int = 100):
        if length < 1:
            raise ValueError("window length must be >= 1")
        self.length = length
        self.ring: deque[SlotReport] = deque()
        self._injected = self._delivered = self._dropped = 0
        self._latency_sum = 0

    def push(self, r: SlotReport) -> None:
        self.ring.append(r)
        self._injected += r.injected
        self._delivered += r.delivered
        self._dropped += r.dropped
        self._latency_sum += sum(r.latencies)
        if len(self.ring) > self.length:
            old = self.ring.popleft()
            self._injected -= old.injected
            self._delivered -= old.delivered
            self._dropped -= old.dropped
            self._latency_sum -= sum(old.latencies)

    @property
    def injected(self) -> int:
        return self._injected


def window_metrics(mw: MetricsWindow) -> WindowStats:
    """Arrival ratio, mean delivery latency and drop count over the window.

    With no terminations the ratio is reported as 1.0 and ``empty`` is set;
    with no deliveries the average delay is NaN.
    """
    done = mw._delivered + mw._dropped
    empty = done == 0
    ratio = 1.0 if empty else mw._delivered / done
    avg = mw._latency_sum / mw._delivered if mw._delivered else float("nan")
    return WindowStats(ratio, avg, mw._dropped, empty)


def agent_delay(queue_wait: int, link_delay: int) -> int:
    """Immediate delay of one hop; the reward is its negation."""
    return queue_wait + link_delay


def inject_arrivals(net: Network, tc: TrafficConfig, slot: int, rng: np.random.Generator,
                    start_id: int = 0, count: int | None = None) -> list[Packet]:
    """Draw this slot's Poisson arrivals and place them at base stations.

    The donor takes the first ``donor_bandwidth`` packets; the rest land
    on uniformly chosen live IAB nodes.  Destinations are uniform over UEs.
    """
    n = int(rng.poisson(tc.lam)) if count is None else count
    if n == 0:
        return []
    ues = net.cfg.num_ues
    if ues == 0:
        raise ValueError("traffic needs at least one UE destination")
    bw = net.cfg.channels if tc.donor_bandwidth is None else tc.donor_bandwidth
    donors = net.cfg.num_donors
    iab = [b for b in net.iab_indices() if b not in net.failed]
    at_donor = min(n, bw) if iab else n
    sources = []
    if at_donor:
        sources += [0] * at_donor if donors == 1 else rng.integers(0, donors, at_donor).tolist()
    if n > at_donor:
        sources += [iab[i] for i in rng.integers(0, len(iab), n - at_donor).tolist()]
    dests = (net.K + rng.integers(0, ues, n)).tolist()
    return [Packet(start_id + i, d, s, slot, tc.ttl_init, Mode.QUEUE, slot)
            for i, (s, d) in enumerate(zip(sources, dests))]


@dataclass
class Decision:
    packet: Packet
    node: int
    queue_wait: int
    ttl: int


@dataclass
class Hop:
    packet: Packet
    src: int
    dst: int
    action: int          # 0..K-1 for a base station, K for "deliver"
    queue_wait: int
    link_delay: int
    ttl: int             # remaining TTL at decision time

    @property
    def delay(self) -> int:
        return agent_delay(self.queue_wait, self.link_delay)

    @property
    def ttl_after(self) -> int:
        return self.ttl - self.link_delay

    @property
    def delivers(self) -> bool:
        return self.dst == self.packet.dest and self.ttl_after > 0

    @property
    def expires(self) -> bool:
        return self.ttl_after <= 0

    @property
    def terminal(self) -> bool:
        return self.dst == self.packet.dest or self.ttl_after <= 0


class RoutingPolicy:
    """Interface the engine drives once per slot."""

    name = "policy"

    def bind(self, sim: "Simulation") -> None:
        """Called once before the first slot."""

    def begin_slot(self, sim: "Simulation") -> None:
        """Called at the top of every slot, before topology dynamics."""

    def schedule(self, sim: "Simulation", node: int, capacity: int) -> list[Packet] | None:
        """Pick packets to promote at ``node``; None means TTL-priority heads."""
        return None

    def decide(self, sim: "Simulation", decisions: list[Decision]) -> list[int | None]:
        raise NotImplementedError

    def feedback(self, sim: "Simulation", hops: list[Hop]) -> None:
        """Learning hook, called after the slot's hops are executed."""

    def on_expire(self, sim: "Simulation", expired: list[tuple[Packet, int, Mode]]) -> None:
        """Packets that hit their deadline this slot, with their node and prior mode."""

    def end_slot(self, sim: "Simulation") -> None:
        pass


class Simulation:
    def __init__(self, net: Network, traffic: TrafficConfig, seed: int = 0, *,
                 window: int = 100, strict: bool = True, dynamics: bool = True):
        traffic.validate()
        self.net = net
        self.traffic = traffic
        self.strict = strict
        self.dynamics = dynamics
        ss = np.random.SeedSequence(seed)
        traffic_ss, dyn_ss, policy_ss, event_ss = ss.spawn(4)
        self.traffic_rng = np.random.default_rng(traffic_ss)
        self.dynamics_rng = np.random.default_rng(dyn_ss)
        self.policy_rng = np.random.default_rng(policy_ss)
        self.event_rng = np.random.default_rng(event_ss)
        self.slot = 0
        self.packets: dict[int, Packet] = {}
        self.queues = [BaseStationQueue(k) for k in range(net.K)]
        self._air: dict[int, list[Packet]] = {}
        self._expiry: dict[int, list[Packet]] = {}
        self.n_air = 0
        self._next_id = 0
        self._seq = 0
        self.injected = self.delivered = self.dropped = 0
        self.failure_drops = 0
        self.window = MetricsWindow(window)
        self.on_transition: Callable[[Packet, Mode, Mode], None] | None = None
        self._pending = TopologyDelta()
        self._pending_injected = self._pending_drops = 0
        self.last_delta = TopologyDelta()
        self._bound: RoutingPolicy | None = None

    # -- bookkeeping -----------------------------------------------------
    def _set_mode(self, p: Packet, mode: Mode) -> None:
        if self.on_transition is not None:
            self.on_transition(p, p.mode, mode)
        p.mode = mode

    def _enqueue(self, p: Packet, node: int, slot: int) -> None:
        p.current_node = node
        p.queue_entry_slot = slot
        self._seq += 1
        p.seq = self._seq
        self._set_mode(p, Mode.QUEUE)
        self.queues[node].push(p)

    def _terminate(self, p: Packet) -> None:
        self._set_mode(p, Mode.OFF)
        del self.packets[p.id]

    def add_packet(self, dest: int, node: int, ttl: int | None = None) -> Packet:
        """Inject one packet by hand; it is counted in the next slot report."""
        p = Packet(self._next_id, dest, node, self.slot,
                   self.traffic.ttl_init if ttl is None else ttl)
        self._next_id += 1
        self._admit(p)
        self._pending_injected += 1
        return p

    def _admit(self, p: Packet) -> None:
        self.packets[p.id] = p
        self.injected += 1
        self._expiry.setdefault(p.deadline, []).append(p)
        p.mode = Mode.OFF
        self._enqueue(p, p.current_node, p.created_slot)

    # -- topology events -------------------------------------------------
    def fail(self, node: int) -> TopologyDelta:
        delta = fail_node(self.net, node, self.event_rng)
        q = self.queues[node]
        lost = q.packets()
        for p in lost:
            q.discard(p)
            self._terminate(p)
        self.dropped += len(lost)
        self.failure_drops += len(lost)
        self._pending_drops += len(lost)
        self._pending.merge(delta)
        return delta

    def recover(self, node: int) -> TopologyDelta:
        delta = recover_node(self.net, node, self.event_rng)
        self._pending.merge(delta)
        return delta

    # -- action space ----------------------------------------------------
    def valid_hops(self, node: int, packet: Packet) -> list[int]:
        """Base-station neighbours in index order, then the destination if adjacent."""
        adj = self.net.adj[node]
        K = self.net.K
        hops = sorted(m for m in adj if m < K)
        if packet.dest in adj:
            hops.append(packet.dest)
        return hops

    def action_mask(self, node: int, packet: Packet) -> np.ndarray:
        K = self.net.K
        mask = np.zeros(K + 1, dtype=bool)
        adj = self.net.adj[node]
        for m in adj:
            if m < K:
                mask[m] = True
        if packet.dest in adj:
            mask[K] = True
        return mask

    def action_index(self, packet: Packet, hop: int) -> int:
        return self.net.K if hop == packet.dest else hop

    def hop_of(self, packet: Packet, action: int) -> int:
        return packet.dest if action == self.net.K else action

    # -- the slot ----------------------------------------------------------
    def advance_slot(self, policy: RoutingPolicy) -> SlotReport:
        if self._bound is not policy:
            policy.bind(self)
            self._bound = policy
        t = self.slot
        net = self.net
        report = SlotReport(t, injected=self._pending_injected, dropped=self._pending_drops)
        self._pending_injected = self._pending_drops = 0
        policy.begin_slot(self)

        if self.dynamics:
            self._pending.merge(step_dynamics(net, net.cfg, self.dynamics_rng))
        self.last_delta, self._pending = self._pending, TopologyDelta()

        # air arrivals
        for p in self._air.pop(t, ()):
            if p.mode is not Mode.AIR:
                continue
            self.n_air -= 1
            if p.current_node == p.dest:
                self._terminate(p)
                self.delivered += 1
                report.delivered += 1
                report.latencies.append(t - p.created_slot)
            elif p.current_node in net.failed:
                self._terminate(p)
                self.dropped += 1
                self.failure_drops += 1
                report.dropped += 1
            else:
                self._enqueue(p, p.current_node, t)

        # injection
        new = inject_arrivals(net, self.traffic, t, self.traffic_rng, self._next_id)
        self._next_id += len(new)
        for p in new:
            self._admit(p)
        report.injected += len(new)

        # promotion
        C = net.cfg.channels
        decisions: list[Decision] = []
        for k in range(net.K):
            q = self.queues[k]
            if q.size == 0 or k in net.failed:
                continue
            chosen = policy.schedule(self, k, C)
            if chosen is None:
                chosen = []
                while len(chosen) < C:
                    p = q.pop()
                    if p is None:
                        break
                    chosen.append(p)
            else:
                for p in chosen:
                    q.discard(p)
            for p in chosen:
                self._set_mode(p, Mode.DECISION)
                decisions.append(Decision(p, k, p.queue_wait(t), p.ttl(t)))

        # routing
        hops: list[Hop] = []
        if decisions:
            choices = policy.decide(self, decisions)
            for d, nxt in zip(decisions, choices):
                p = d.packet
                if nxt is None:
                    self._set_mode(p, Mode.QUEUE)
                    self.queues[d.node].push(p)
                    continue
                if not self._legal(d.node, p, nxt):
                    if self.strict:
                        raise PolicyReturnedInvalidHop(
                            f"{policy.name}: node {d.node} cannot send packet {p.id} to {nxt}")
                    self._terminate(p)
                    self.dropped += 1
                    report.dropped += 1
                    continue
                link = net.link_delay(d.node, nxt)
                hop = Hop(p, d.node, nxt, self.action_index(p, nxt), d.queue_wait, link, d.ttl)
                hops.append(hop)
                report.decider_delays.append(hop.delay)
                self._set_mode(p, Mode.AIR)
                p.current_node = nxt
                p.arrive_slot = t + link
                self._air.setdefault(p.arrive_slot, []).append(p)
                self.n_air += 1
            policy.feedback(self, hops)

        # expiry
        expired = []
        for p in self._expiry.pop(t, ()):
            if p.mode is Mode.OFF:
                continue
            expired.append((p, p.current_node, p.mode))
            if p.mode is Mode.QUEUE:
                self.queues[p.current_node].discard(p)
            elif p.mode is Mode.AIR:
                self.n_air -= 1
            self._terminate(p)
            self.dropped += 1
            report.dropped += 1
        if expired:
            policy.on_expire(self, expired)

        if report.decider_delays:
            report.reward = -sum(report.decider_delays) / len(report.decider_delays) + 0.0
        if t % 64 == 0:
            for q in self.queues:
                q.compact()
        policy.end_slot(self)
        self.window.push(report)
        self.slot += 1
        return report

    def _legal(self, node: int, p: Packet, nxt) -> bool:
        if not isinstance(nxt, (int, np.integer)):
            return False
        if nxt not in self.net.adj[node]:
            return False
        return nxt < self.net.K or nxt == p.dest

    # -- audits ------------------------------------------------------------
    def in_system(self) -> int:
        return sum(q.size for q in self.queues) + self.n_air

    def queue_lengths(self) -> list[int]:
        return [q.size for q in self.queues]


def conservation_audit(sim: Simulation) -> tuple[int, int, int, int]:
    """Check injected = delivered + dropped + in_system and return the four counts."""
    in_system = sim.in_system()
    if len(sim.packets) != in_system:
        raise AuditMismatch(
            f"slot {sim.slot}: {len(sim.packets)} live packets but queues+air hold {in_system}")
    if sim.injected != sim.delivered + sim.dropped + in_system:
        raise AuditMismatch(
            f"slot {sim.slot}: injected {sim.injected} != delivered {sim.delivered}"
            f" + dropped {sim.dropped} + in_system {in_system}")
    return sim.injected, sim.delivered, sim.dropped, in_system
