"""Relational A2C routing: centralized, decentralized and federated training.

Packets are the agents.  A packet waiting at base station ``i`` observes
its remaining TTL, the relational map of its destination (which base
stations the destination is linked to) and how long it has waited in the
current queue; the centralized layout also carries a one-hot of ``i``.
The actor scores K+1 action slots: one per base station plus "deliver to
the destination UE", masked down to the links available at ``i``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import EmptyMask, NotAtBaseStation, ShapeMismatch, ZeroUpdates
from .network import Network, one_hot, relational_map
from .nn import ModelParams
from .sim import Decision, Hop, Packet, RoutingPolicy, Simulation


class Layout(enum.Enum):
    CENTRAL = "central"
    DECENTRALIZED = "decentralized"


def obs_dim(layout: Layout, K: int) -> int:
    return 2 * K + 2 if layout is Layout.CENTRAL else K + 2


def encode(packet: Packet, net: Network, layout: Layout, node: int, ttl: int,
           queue_wait: int, scale: float = 1.0) -> np.ndarray:
    """Observation vector for ``packet`` deciding at ``node``.

    Central: [one_hot(node) | ttl | H(dest) | queue_wait].
    Decentralized: [ttl | H(dest) | queue_wait].
    ``scale`` divides the two integer features (1.0 keeps them raw).
    """
    if not net.is_bs(node):
        raise NotAtBaseStation(f"node {node} is not a base station")
    h = relational_map(packet.dest, net).astype(float)
    tail = [np.array([ttl / scale]), h, np.array([queue_wait / scale])]
    if layout is Layout.CENTRAL:
        tail.insert(0, one_hot(node, net.K).astype(float))
    return np.concatenate(tail)


def encode_batch(net: Network, layout: Layout, nodes, dests, ttls, waits,
                 scale: float = 1.0) -> np.ndarray:
    """Row-wise ``encode`` without the per-row allocations."""
    K = net.K
    n = len(nodes)
    X = np.zeros((n, obs_dim(layout, K)))
    off = K if layout is Layout.CENTRAL else 0
    adj = net.adj
    for r in range(n):
        if layout is Layout.CENTRAL:
            X[r, nodes[r]] = 1.0
        X[r, off] = ttls[r] / scale
        for j in adj[dests[r]]:
            if j < K:
                X[r, off + 1 + j] = 1.0
        X[r, off + K + 1] = waits[r] / scale
    return X


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row; zero-probability slots are never chosen."""
    c = np.cumsum(probs, axis=1)
    c /= c[:, -1:]
    u = rng.random(probs.shape[0])
    return (c > u[:, None]).argmax(axis=1)


def select_action(actor: ModelParams, obs, mask, rng: np.random.Generator) -> int:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("no valid action")
    probs = nn.actor_probs(actor, obs, mask[None, :])
    return int(sample_actions(probs, rng)[0])


def td_error_central(D: float, v: float, v_next: float, gamma: float) -> float:
    """delta = D + gamma * V(o') - V(o); pass v_next = 0 for terminal hops."""
    return D + gamma * v_next - v


def td_error_dec(D: float, v_k: float, v_k_next: float, gamma: float) -> float:
    """Same form, with V(o) from the sender's critic and V(o') from the receiver's."""
    return D + gamma * v_k_next - v_k


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    mask: np.ndarray
    delta: float
    next_obs: np.ndarray | None = None   # needed only for the full-gradient critic


@dataclass
class CentralLearner:
    actor: ModelParams
    critic: ModelParams
    eta: float = 1e-4
    alpha: float = 1e-4
    gamma: float = 0.995
    full_gradient: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.eta < 0 or self.alpha < 0:
            raise ValueError("learning rates must be non-negative")


@dataclass
class DecLearner:
    actors: list
    critics: list
    eta: float = 1e-4
    alpha: float = 1e-4
    gamma: float = 0.995
    counts: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.actors) != len(self.critics):
            raise ShapeMismatch("one actor and one critic per station")
        shapes = {tuple(a.shape for a in m.arrays()) for m in self.actors}
        shapes_c = {tuple(a.shape for a in m.arrays()) for m in self.critics}
        if len(shapes) > 1 or len(shapes_c) > 1:
            raise ShapeMismatch("station models must share one architecture")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not self.counts:
            self.counts = [0] * len(self.actors)
        # per-station models are views into (K, ...) stacks so a slot can be
        # evaluated and updated for every station in one batched pass
        self.actor_stack = nn.StackedParams.from_models(self.actors)
        self.critic_stack = nn.StackedParams.from_models(self.critics)
        self.actors = [self.actor_stack.member(k) for k in range(len(self.actors))]
        self.critics = [self.critic_stack.member(k) for k in range(len(self.critics))]

    @property
    def K(self) -> int:
        return len(self.actors)


@dataclass
class FedScheduler:
    period: float
    learner: DecLearner

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("federated period must be >= 1")

    def due(self, slot: int) -> bool:
        return slot > 0 and self.period != float("inf") and slot % int(self.period) == 0


def _batch(transitions):
    X = np.stack([t.obs for t in transitions])
    M = np.stack([np.asarray(t.mask, dtype=bool) for t in transitions])
    A = np.array([t.action for t in transitions])
    d = np.array([t.delta for t in transitions], dtype=float)
    return X, M, A, d


def _actor_step(actor: ModelParams, X, M, A, advantage: float, eta: float) -> None:
    if eta == 0.0 or advantage == 0.0:
        return
    g = nn.policy_gradient(actor, X, M, A)
    nn.sgd_step_(actor, g, eta * advantage, "ascend")


def update_central(learner: CentralLearner, transitions: list[Transition]) -> None:
    """One slot of Relational A2C updates.

    Actor: theta += eta * sum_n grad log pi(a_n|o_n) * mean(delta).
    Critic: w -= alpha * grad sum_n delta_n^2, with the bootstrap target held
    fixed unless ``full_gradient`` is set.
    """
    if not transitions:
        return
    X, M, A, d = _batch(transitions)
    _actor_step(learner.actor, X, M, A, float(d.mean()), learner.eta)
    if learner.alpha == 0.0:
        return
    # grad of sum delta^2 wrt w is sum 2*delta*(gamma*dV(o') - dV(o))
    g = nn.value_gradient(learner.critic, X, -2.0 * d)
    if learner.full_gradient and learner.gamma:
        live = [i for i, t in enumerate(transitions) if t.next_obs is not None]
        if live:
            Xn = np.stack([transitions[i].next_obs for i in live])
            g.add_(nn.value_gradient(learner.critic, Xn, 2.0 * learner.gamma * d[live]))
    nn.sgd_step_(learner.critic, g, learner.alpha, "descend")


def update_dec(learner: DecLearner, k: int, transitions: list[Transition]) -> None:
    """Station-local update: mean-delta advantage and (1/|I_k|) sum delta^2 critic loss."""
    if not transitions:
        return
    X, M, A, d = _batch(transitions)
    _actor_step(learner.actors[k], X, M, A, float(d.mean()), learner.eta)
    if learner.alpha:
        g = nn.value_gradient(learner.critics[k], X, -2.0 * d / len(d))
        nn.sgd_step_(learner.critics[k], g, learner.alpha, "descend")
    learner.counts[k] += 1


def update_dec_all(learner: DecLearner, X, M, A, deltas, stations, critic_acts=None) -> None:
    """``update_dec`` for every station of one slot in a single batched pass.

    Station models are disjoint and every delta is computed before any
    update, so this equals calling ``update_dec`` station by station.
    """
    stations = np.asarray(stations)
    deltas = np.asarray(deltas, dtype=float)
    K = learner.K
    n_k = np.bincount(stations, minlength=K)
    mean_k = np.bincount(stations, weights=deltas, minlength=K) / np.maximum(n_k, 1)
    if learner.eta:
        S = learner.actor_stack
        logits, acts = nn.stacked_forward(S, X, stations)
        probs = nn.masked_softmax(logits, M)
        dlogits = -probs
        dlogits[np.arange(len(A)), A] += 1.0
        dlogits *= mean_k[stations][:, None]
        nn.stacked_step_(S, nn.stacked_backward(S, stations, acts, dlogits), learner.eta, "ascend")
    if learner.alpha:
        S = learner.critic_stack
        if critic_acts is None:
            _, critic_acts = nn.stacked_forward(S, X, stations)
        dout = (-2.0 * deltas / n_k[stations])[:, None]
        nn.stacked_step_(S, nn.stacked_backward(S, stations, critic_acts, dout), learner.alpha,
                         "descend")
    for k in np.flatnonzero(n_k).tolist():
        learner.counts[k] += 1


def federated_update(param_sets: list[ModelParams], counts) -> ModelParams:
    """Update-count weighted average of shape-identical models."""
    counts = np.asarray(counts, dtype=float)
    if len(param_sets) != len(counts):
        raise ShapeMismatch("one count per model")
    total = counts.sum()
    if total <= 0:
        raise ZeroUpdates("no station updated since the last sync")
    ref = [a.shape for a in param_sets[0].arrays()]
    for m in param_sets[1:]:
        if [a.shape for a in m.arrays()] != ref:
            raise ShapeMismatch("models differ in shape")
    out = param_sets[0].copy()
    for i, acc in enumerate(out.arrays()):
        acc[...] = sum((c / total) * m.arrays()[i] for c, m in zip(counts, param_sets))
    return out


def fed_sync(learner: DecLearner) -> bool:
    """Average actors and critics, broadcast to every station, reset counters."""
    try:
        actor = federated_update(learner.actors, learner.counts)
        critic = federated_update(learner.critics, learner.counts)
    except ZeroUpdates:
        return False
    for models, avg in ((learner.actors, actor), (learner.critics, critic)):
        for m in models:
            for a, v in zip(m.arrays(), avg.arrays()):
                a[...] = v
    learner.counts = [0] * learner.K
    return True


def save_learner(learner, directory) -> list[Path]:
    """Write actor_k<k>.txt / critic_k<k>.txt (``k`` = all for the central learner)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if isinstance(learner, CentralLearner):
        pairs = [("all", learner.actor, learner.critic)]
    else:
        pairs = [(str(k), a, c) for k, (a, c) in enumerate(zip(learner.actors, learner.critics))]
    written = []
    for tag, actor, critic in pairs:
        for role, model in (("actor", actor), ("critic", critic)):
            path = directory / f"{role}_k{tag}.txt"
            nn.save_checkpoint(model, path)
            written.append(path)
    return written


class RelationalA2C(RoutingPolicy):
    """Routing policy wrapping one of the three training paradigms.

    variant: "central" (Algorithm-1 style shared actor/critic), "dec" (one
    actor/critic per station) or "fed" (dec plus periodic FedAvg).
    """

    def __init__(self, variant: str = "central", *, eta: float = 1e-4, alpha: float = 1e-4,
                 gamma: float = 0.995, hidden: tuple[int, ...] = (64, 64),
                 fed_period: float = 1000, normalize: bool = False,
                 drop_penalty: float = 0.0, full_gradient: bool = False, train: bool = True,
                 charge_queue_drops: bool = False):
        if variant not in ("central", "dec", "fed"):
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.name = {"central": "relational-a2c", "dec": "dec-relational-a2c",
                     "fed": "fed-relational-a2c"}[variant]
        self.eta, self.alpha, self.gamma = eta, alpha, gamma
        self.hidden = tuple(hidden)
        self.fed_period = fed_period
        self.normalize = normalize
        self.drop_penalty = drop_penalty
        self.full_gradient = full_gradient
        self.train = train
        self.charge_queue_drops = charge_queue_drops
        self._arrivals: dict[int, tuple] = {}
        self.learner = None
        self.fed: FedScheduler | None = None
        self.sync_slots: list[int] = []
        self._pending: dict[int, tuple] = {}
        self.rng: np.random.Generator | None = None

    @property
    def layout(self) -> Layout:
        return Layout.CENTRAL if self.variant == "central" else Layout.DECENTRALIZED

    def bind(self, sim: Simulation) -> None:
        K = sim.net.K
        self.rng = sim.policy_rng
        self.scale = float(sim.traffic.ttl_init) if self.normalize else 1.0
        if self.learner is not None:
            return
        dim = obs_dim(self.layout, K)
        rng = sim.policy_rng
        if self.variant == "central":
            self.learner = CentralLearner(
                nn.init_mlp(dim, self.hidden, K + 1, rng), nn.init_mlp(dim, self.hidden, 1, rng),
                self.eta, self.alpha, self.gamma, self.full_gradient)
            return
        if self.variant == "fed":
            actor = nn.init_mlp(dim, self.hidden, K + 1, rng)
            critic = nn.init_mlp(dim, self.hidden, 1, rng)
            actors = [actor.copy() for _ in range(K)]
            critics = [critic.copy() for _ in range(K)]
        else:
            actors = [nn.init_mlp(dim, self.hidden, K + 1, rng) for _ in range(K)]
            critics = [nn.init_mlp(dim, self.hidden, 1, rng) for _ in range(K)]
        self.learner = DecLearner(actors, critics, self.eta, self.alpha, self.gamma)
        if self.variant == "fed":
            self.fed = FedScheduler(self.fed_period, self.learner)

    def begin_slot(self, sim: Simulation) -> None:
        if self.fed is not None and self.train and self.fed.due(sim.slot):
            if fed_sync(self.learner):
                self.sync_slots.append(sim.slot)

    def _actor(self, k: int) -> ModelParams:
        return self.learner.actor if self.variant == "central" else self.learner.actors[k]

    def _critic(self, k: int) -> ModelParams:
        return self.learner.critic if self.variant == "central" else self.learner.critics[k]

    def decide(self, sim: Simulation, decisions: list[Decision]) -> list[int | None]:
        net = sim.net
        X = encode_batch(net, self.layout, [d.node for d in decisions],
                         [d.packet.dest for d in decisions], [d.ttl for d in decisions],
                         [d.queue_wait for d in decisions], self.scale)
        M = np.stack([sim.action_mask(d.node, d.packet) for d in decisions])
        ok = M.any(axis=1)
        actions = np.full(len(decisions), -1)
        if self.variant == "central":
            rows = np.flatnonzero(ok)
            if rows.size:
                probs = nn.actor_probs(self.learner.actor, X[rows], M[rows])
                actions[rows] = sample_actions(probs, self.rng)
        else:
            rows = np.flatnonzero(ok)
            if rows.size:
                nodes = np.array([decisions[r].node for r in rows])
                logits, _ = nn.stacked_forward(self.learner.actor_stack, X[rows], nodes)
                actions[rows] = sample_actions(nn.masked_softmax(logits, M[rows]), self.rng)
        self._pending = {}
        for d in decisions:
            self._arrivals.pop(d.packet.id, None)
        out: list[int | None] = []
        for r, d in enumerate(decisions):
            if actions[r] < 0:
                out.append(None)
                continue
            self._pending[d.packet.id] = (X[r], M[r], int(actions[r]))
            out.append(sim.hop_of(d.packet, int(actions[r])))
        return out

    def feedback(self, sim: Simulation, hops: list[Hop]) -> None:
        if not self.train or not hops:
            return
        net = sim.net
        X = np.stack([self._pending[h.packet.id][0] for h in hops])
        live = [i for i, h in enumerate(hops) if not h.terminal]
        v_next = np.zeros(len(hops))
        Xn = None
        if live:
            Xn = encode_batch(net, self.layout, [hops[i].dst for i in live],
                              [hops[i].packet.dest for i in live],
                              [hops[i].ttl_after for i in live], [0] * len(live), self.scale)
        D = np.array([-(h.delay + (self.drop_penalty if h.expires else 0.0)) for h in hops])
        if self.charge_queue_drops:
            for r, i in enumerate(live):
                self._arrivals[hops[i].packet.id] = (Xn[r], hops[i].dst)

        if self.variant == "central":
            critic = self.learner.critic
            v = nn.critic_values(critic, X)
            if live:
                v_next[live] = nn.critic_values(critic, Xn)
            deltas = D + self.gamma * v_next - v
            next_rows = {i: r for r, i in enumerate(live)}
            transitions = [
                Transition(X[i], self._pending[h.packet.id][2], self._pending[h.packet.id][1],
                           float(deltas[i]), Xn[next_rows[i]] if i in next_rows else None)
                for i, h in enumerate(hops)]
            update_central(self.learner, transitions)
            return

        # per-station critics: V(o) from the sender, V(o') from the receiver
        src = np.array([h.src for h in hops])
        out, critic_acts = nn.stacked_forward(self.learner.critic_stack, X, src)
        v = out[:, 0]
        if live:
            dst = np.array([hops[i].dst for i in live])
            v_next[live] = nn.stacked_forward(self.learner.critic_stack, Xn, dst)[0][:, 0]
        deltas = D + self.gamma * v_next - v
        M = np.stack([self._pending[h.packet.id][1] for h in hops])
        A = np.array([self._pending[h.packet.id][2] for h in hops])
        update_dec_all(self.learner, X, M, A, deltas, src, critic_acts)

    def on_expire(self, sim: Simulation, expired) -> None:
        """Optionally charge queue deaths to the value of the state the packet arrived in.

        A packet that expires while queued never reaches another decision, so
        its wait would otherwise go unpenalised.  The critic entry for its
        arrival observation is pulled toward -(wait + drop_penalty).
        """
        if not (self.train and self.charge_queue_drops) or not self.alpha:
            return
        rows, targets, stations = [], [], []
        for p, node, mode in expired:
            entry = self._arrivals.pop(p.id, None)
            if entry is None or mode.value != "queue":
                continue
            rows.append(entry[0])
            stations.append(entry[1])
            targets.append(-(p.queue_wait(sim.slot) + 1 + self.drop_penalty))
        if not rows:
            return
        X = np.stack(rows)
        targets = np.array(targets, dtype=float)
        if self.variant == "central":
            d = targets - nn.critic_values(self.learner.critic, X)
            g = nn.value_gradient(self.learner.critic, X, -2.0 * d)
            nn.sgd_step_(self.learner.critic, g, self.alpha, "descend")
            return
        S = self.learner.critic_stack
        stations = np.array(stations)
        out, acts = nn.stacked_forward(S, X, stations)
        d = targets - out[:, 0]
        n_k = np.bincount(stations, minlength=S.K)
        dout = (-2.0 * d / n_k[stations])[:, None]
        nn.stacked_step_(S, nn.stacked_backward(S, stations, acts, dout), self.alpha, "descend")

    def end_slot(self, sim: Simulation) -> None:
        if self._arrivals and sim.slot % 1000 == 0:
            live = sim.packets
            self._arrivals = {i: v for i, v in self._arrivals.items() if i in live}
