"""Scenario scripts: timed changes to load, node health and UE speed."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .errors import BadWindow

EVENT_KINDS = ("lam", "fail", "recover", "speed")


@dataclass(frozen=True)
class Event:
    slot: int
    kind: str
    value: float


@dataclass
class ScenarioScript:
    """Events keyed by slot offset from the start of the run (or sweep point)."""
    events: list = field(default_factory=list)
    label: str = ""
    lam: float | None = None   # load for the whole point, if fixed

    def validate(self, T: int) -> None:
        last = -1
        for e in self.events:
            if e.kind not in EVENT_KINDS:
                raise ValueError(f"unknown event kind {e.kind!r}")
            if not 0 <= e.slot < T:
                raise BadWindow(f"event at slot {e.slot} outside [0, {T})")
            if e.slot <= last:
                raise BadWindow("event slots must be strictly increasing")
            last = e.slot

    def at(self, slot: int) -> list[Event]:
        return [e for e in self.events if e.slot == slot]


def sweep_order(lams, direction: str) -> list[float]:
    lams = list(lams)
    if direction == "up":
        return lams
    if direction == "down":
        return lams[::-1]
    if direction == "both":
        return lams + lams[::-1]
    raise ValueError(f"unknown direction {direction!r}")


def scenario_load_sweep(cfg: ExperimentConfig, lams, direction: str) -> list[ScenarioScript]:
    """One script per load point, in sweep order; the runner carries state across them."""
    if not len(lams):
        raise ValueError("sweep needs at least one load")
    return [ScenarioScript([], f"lam={lam:g}", float(lam)) for lam in sweep_order(lams, direction)]


def scenario_burst(cfg: ExperimentConfig, lam_low: float, lam_high: float,
                   t1: int, t2: int) -> ScenarioScript:
    """lam_low on [0, t1), lam_high on [t1, t2), lam_low on [t2, T)."""
    T = cfg.experiment.slots
    if not 0 <= t1 <= t2 <= T:
        raise BadWindow(f"burst window needs 0 <= t1 <= t2 <= T, got t1={t1}, t2={t2}, T={T}")
    if t1 == t2:
        return ScenarioScript([], "burst", float(lam_low))
    events = []
    if t1 > 0:
        events.append(Event(0, "lam", float(lam_low)))
    events.append(Event(t1, "lam", float(lam_high)))
    if t2 < T:
        events.append(Event(t2, "lam", float(lam_low)))
    s = ScenarioScript(events, "burst")
    s.validate(T)
    return s


def scenario_node_failure(cfg: ExperimentConfig, fail_slot: int, recover_slot: int,
                          rng: np.random.Generator) -> ScenarioScript:
    """A uniformly chosen IAB node is down on [fail_slot, recover_slot)."""
    T = cfg.experiment.slots
    if fail_slot == recover_slot:
        return ScenarioScript([], "failure")
    if not 0 <= fail_slot < recover_slot <= T:
        raise BadWindow(f"outage needs 0 <= fail < recover <= T, got {fail_slot}, {recover_slot}")
    topo = cfg.topology
    if topo.num_iab < 1:
        raise BadWindow("no IAB node to fail")
    node = topo.num_donors + int(rng.integers(topo.num_iab))
    events = [Event(fail_slot, "fail", node)]
    if recover_slot < T:
        events.append(Event(recover_slot, "recover", node))
    s = ScenarioScript(events, f"failure node={node}")
    s.validate(T)
    return s


def scenario_mobility(cfg: ExperimentConfig, speeds) -> list[ScenarioScript]:
    """One independent run per UE speed."""
    return [ScenarioScript([Event(0, "speed", float(v))], f"speed={v:g}") for v in speeds]
