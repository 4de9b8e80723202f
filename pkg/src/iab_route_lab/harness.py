"""Experiment runner: builds topologies, policies and scenarios, writes CSVs."""
from __future__ import annotations

import copy
import csv
import dataclasses
import math
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import a2c, baselines
from .config import ExperimentConfig, serialize_config
from .network import generate_topology
from .scenarios import (ScenarioScript, scenario_burst, scenario_load_sweep,
                        scenario_mobility, scenario_node_failure)
from .sim import Simulation, conservation_audit, window_metrics

METRICS_HEADER = ["slot", "injected", "delivered", "dropped",
                  "avg_delay_window", "arrival_ratio_window", "reward"]
SUMMARY_HEADER = ["point", "label", "runs", "avg_delay_mean", "avg_delay_median",
                  "arrival_ratio_mean", "arrival_ratio_median", "dropped_mean"]
RUNS_HEADER = ["point", "label", "topology_seed", "seed", "avg_delay", "arrival_ratio",
               "injected", "delivered", "dropped", "file"]


def make_policy(cfg: ExperimentConfig):
    tag = cfg.experiment.algorithm
    lc = cfg.learning
    if tag in ("relational-a2c", "dec-relational-a2c", "fed-relational-a2c"):
        variant = {"relational-a2c": "central", "dec-relational-a2c": "dec",
                   "fed-relational-a2c": "fed"}[tag]
        return a2c.RelationalA2C(
            variant, eta=lc.eta, alpha=lc.alpha, gamma=lc.gamma, hidden=tuple(lc.hidden),
            fed_period=lc.fed_period, normalize=lc.normalize, drop_penalty=lc.drop_penalty,
            full_gradient=lc.full_gradient, charge_queue_drops=lc.charge_queue_drops)
    if tag == "centralized":
        return baselines.ShortestPathPolicy(queue_aware=True)
    if tag == "minhop":
        return baselines.ShortestPathPolicy(queue_aware=False)
    if tag == "backpressure":
        return baselines.BackpressurePolicy(lc.bp_staleness, lc.raw_ids)
    if tag in ("q-routing", "full-echo", "hybrid"):
        return baselines.TabularPolicy(
            tag, alpha=lc.q_alpha, gamma=lc.gamma, epsilon=lc.epsilon, eps_decay=lc.eps_decay,
            eps_min=lc.eps_min, raw_ids=lc.raw_ids, drop_penalty=lc.drop_penalty)
    if tag == "random":
        return baselines.RandomPolicy()
    raise ValueError(f"unknown algorithm {tag!r}")


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


@dataclass
class PointResult:
    point: int
    label: str
    topology_seed: int
    seed: int
    avg_delay: float
    arrival_ratio: float
    injected: int
    delivered: int
    dropped: int
    file: str
    rows: list


def tail_stats(rows: list, tail_fraction: float, window: int) -> dict:
    """Summary of the final ``tail_fraction`` of a point's per-slot rows.

    Rows are dicts or lists in METRICS_HEADER order.  The delay is the
    mean of the 100-slot window averages at non-overlapping block ends
    inside the tail; the ratio and counts are exact tail sums.
    """
    def get(r, k):
        return float(r[k] if isinstance(r, dict) else r[METRICS_HEADER.index(k)])

    n = len(rows)
    start = n - max(1, math.ceil(tail_fraction * n))
    tail = rows[start:]
    inj = sum(get(r, "injected") for r in tail)
    dlv = sum(get(r, "delivered") for r in tail)
    drp = sum(get(r, "dropped") for r in tail)
    ends = [get(rows[i], "avg_delay_window") for i in range(start, n) if (i + 1) % window == 0]
    if not ends:
        ends = [get(rows[-1], "avg_delay_window")]
    ends = [v for v in ends if not math.isnan(v)]
    delay = sum(ends) / len(ends) if ends else float("nan")
    ratio = dlv / (dlv + drp) if dlv + drp else 1.0
    return {"avg_delay": delay, "arrival_ratio": ratio,
            "injected": int(inj), "delivered": int(dlv), "dropped": int(drp)}


def _apply(sim: Simulation, script: ScenarioScript, offset: int) -> None:
    for e in script.at(offset):
        if e.kind == "lam":
            sim.traffic.lam = float(e.value)
        elif e.kind == "fail":
            sim.fail(int(e.value))
        elif e.kind == "recover":
            sim.recover(int(e.value))
        elif e.kind == "speed":
            sim.net.cfg.ue_speed = float(e.value)


def _write_metrics(path: Path, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(rows)


def run_points(cfg: ExperimentConfig, topology_seed: int, seed: int,
               scripts: list[ScenarioScript], out_dir: Path | None = None,
               continue_state: bool = True, policy=None, audit: bool = True,
               on_slot=None) -> list[PointResult]:
    """Run every script for one (topology seed, seed) pair.

    With ``continue_state`` all points share one simulation and learner (a
    load sweep); otherwise each point starts afresh.  Each point lasts
    ``cfg.experiment.slots`` slots.
    """
    T = cfg.experiment.slots
    window = cfg.experiment.window
    results = []
    sim = None
    for k, script in enumerate(scripts):
        if sim is None or not continue_state:
            topo = dataclasses.replace(cfg.topology)
            net = generate_topology(topo, topology_seed)
            sim = Simulation(net, copy.copy(cfg.traffic), seed, window=window,
                             dynamics=cfg.experiment.dynamics)
            if policy is None or not continue_state:
                pol = make_policy(cfg)
            else:
                pol = policy
        if script.lam is not None:
            sim.traffic.lam = script.lam
        rows = []
        for off in range(T):
            _apply(sim, script, off)
            rep = sim.advance_slot(pol)
            if audit:
                conservation_audit(sim)
            ws = window_metrics(sim.window)
            rows.append([rep.slot, rep.injected, rep.delivered, rep.dropped,
                         _fmt(ws.avg_delay), _fmt(ws.arrival_ratio), _fmt(rep.reward)])
            if on_slot is not None:
                on_slot(sim, rep)
        fname = f"metrics_t{topology_seed}_s{seed}_p{k}.csv"
        if out_dir is not None:
            _write_metrics(out_dir / fname, rows)
            if cfg.experiment.checkpoint:
                _checkpoint(pol, out_dir / "checkpoints" / f"t{topology_seed}_s{seed}_p{k}")
        st = tail_stats(rows, cfg.experiment.tail_fraction, window)
        results.append(PointResult(k, script.label or f"point{k}", topology_seed, seed,
                                   st["avg_delay"], st["arrival_ratio"], st["injected"],
                                   st["delivered"], st["dropped"], fname, rows))
    return results


def _checkpoint(policy, directory: Path) -> None:
    if isinstance(policy, a2c.RelationalA2C) and policy.learner is not None:
        a2c.save_learner(policy.learner, directory)
    elif isinstance(policy, baselines.TabularPolicy):
        directory.mkdir(parents=True, exist_ok=True)
        baselines.dump_qtable(policy.qt, directory / "qtable.csv")


def build_scripts(cfg: ExperimentConfig) -> tuple[list[ScenarioScript], bool]:
    """Scripts for the configured scenario and whether points share state."""
    sc = cfg.scenario
    kind = sc.kind
    if kind in ("static", "converge"):
        return [ScenarioScript([], kind)], True
    if kind == "sweep":
        return scenario_load_sweep(cfg, sc.lams, sc.direction), True
    if kind == "burst":
        return [scenario_burst(cfg, sc.lam_low, sc.lam_high, sc.t1, sc.t2)], True
    if kind == "mobility":
        return scenario_mobility(cfg, sc.speeds), False
    raise ValueError(f"scenario {kind!r} needs a per-run generator")


def emit_summary(results: list[PointResult]) -> list[list]:
    """Mean and median of the per-run tail statistics, one row per point."""
    by_point: dict[int, list[PointResult]] = {}
    for r in results:
        by_point.setdefault(r.point, []).append(r)
    out = []
    for k in sorted(by_point):
        rs = by_point[k]
        delays = [r.avg_delay for r in rs if not math.isnan(r.avg_delay)]
        ratios = [r.arrival_ratio for r in rs]
        out.append([k, rs[0].label, len(rs),
                    _fmt(statistics.fmean(delays)) if delays else "nan",
                    _fmt(statistics.median(delays)) if delays else "nan",
                    _fmt(statistics.fmean(ratios)), _fmt(statistics.median(ratios)),
                    _fmt(statistics.fmean([r.dropped for r in rs]))])
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> list[PointResult]:
    """All (topology seed, seed) replications; writes metrics, runs and summary CSVs."""
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.experiment.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(serialize_config(cfg), encoding="utf-8")
    results: list[PointResult] = []
    for ts in cfg.experiment.topology_seeds:
        for seed in cfg.experiment.seeds:
            if cfg.scenario.kind == "failure":
                rng = np.random.default_rng([ts, seed, 0xFA11])
                scripts = [scenario_node_failure(cfg, cfg.scenario.fail_slot,
                                                 cfg.scenario.recover_slot, rng)]
                shared = True
            else:
                scripts, shared = build_scripts(cfg)
            results += run_points(cfg, ts, seed, scripts, out, continue_state=shared)
    with open(out / "runs.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RUNS_HEADER)
        for r in results:
            w.writerow([r.point, r.label, r.topology_seed, r.seed, _fmt(r.avg_delay),
                        _fmt(r.arrival_ratio), r.injected, r.delivered, r.dropped, r.file])
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerows(emit_summary(results))
    return results


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
