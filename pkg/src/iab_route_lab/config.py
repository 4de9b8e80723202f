"""Experiment configuration: a sectioned ``key = value`` text file.

Sections are [topology], [traffic], [learning], [experiment] and
[scenario].  Missing keys take the defaults below, which reproduce the
network and algorithm hyper-parameter tables.  Unknown sections or keys
are errors that name the offending line.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .network import TopologyConfig
from .sim import TrafficConfig

ALGORITHMS = (
    "relational-a2c", "dec-relational-a2c", "fed-relational-a2c",
    "centralized", "minhop", "backpressure", "q-routing", "full-echo", "hybrid",
)
# reference policy used only as a yardstick in tests and ablations
EXTRA_ALGORITHMS = ("random",)
SCENARIOS = ("static", "sweep", "burst", "failure", "mobility", "converge")


@dataclass
class LearningConfig:
    gamma: float = 0.995
    alpha: float = 1e-4          # critic rate
    eta: float = 1e-4            # actor rate
    eps_decay: float = 0.9999
    eps_min: float = 0.01
    epsilon: float = 1.0
    fed_period: float = 1000.0
    q_alpha: float = 0.1         # tabular learning rate (Q-Routing family)
    hidden: tuple = (64, 64)
    normalize: bool = False
    drop_penalty: float = 0.0
    charge_queue_drops: bool = False
    full_gradient: bool = False
    raw_ids: bool = False
    bp_staleness: int = 1


@dataclass
class ScenarioConfig:
    kind: str = "static"
    lams: tuple = (2.0, 3.0, 4.0, 5.0)
    direction: str = "up"
    lam_low: float = 2.0
    lam_high: float = 5.0
    t1: int = 1000
    t2: int = 2000
    fail_slot: int = 1000
    recover_slot: int = 2000
    speeds: tuple = (0.0, 3.0, 6.0)


@dataclass
class ExperimentSettings:
    algorithm: str = "relational-a2c"
    slots: int = 10000
    seeds: tuple = (0, 1, 2, 3, 4)
    topology_seeds: tuple = (0, 1)
    window: int = 100
    tail_fraction: float = 0.2
    out_dir: str = "runs"
    checkpoint: bool = False
    dynamics: bool = True


@dataclass
class ExperimentConfig:
    topology: TopologyConfig = field(default_factory=lambda: TopologyConfig(ue_speed=3.0))
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    learning: LearningConfig = field(default_factory=LearningConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)

    def validate(self) -> None:
        e = self.experiment
        if e.algorithm not in ALGORITHMS + EXTRA_ALGORITHMS:
            raise ConfigError(f"unknown algorithm {e.algorithm!r}", field="algorithm")
        if e.slots < 1:
            raise ConfigError("slots must be >= 1", field="slots")
        if not e.seeds:
            raise ConfigError("at least one seed is required", field="seeds")
        if not e.topology_seeds:
            raise ConfigError("at least one topology seed is required", field="topology_seeds")
        if not 0.0 < e.tail_fraction <= 1.0:
            raise ConfigError("tail_fraction must lie in (0, 1]", field="tail_fraction")
        if self.scenario.kind not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario.kind!r}", field="kind")
        if self.scenario.direction not in ("up", "down", "both"):
            raise ConfigError("direction must be up, down or both", field="direction")
        if not self.scenario.lams:
            raise ConfigError("lams must not be empty", field="lams")
        if not 0.0 <= self.learning.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)", field="gamma")
        if self.learning.fed_period < 1:
            raise ConfigError("fed_period must be >= 1", field="fed_period")
        for section, obj in (("topology", self.topology), ("traffic", self.traffic)):
            try:
                obj.validate()
            except ValueError as exc:
                raise ConfigError(str(exc), field=section) from None


_SECTIONS = ("topology", "traffic", "learning", "experiment", "scenario")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        if value == float("inf"):
            return "inf"
        return repr(value)
    return str(value)


def _parse_value(text: str, default, name: str, line: int | None):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"expected true/false, got {text!r}")
        if isinstance(default, tuple):
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            elem = default[0] if default else 0.0
            return tuple(_parse_value(t, elem, name, line) for t in items)
        if default is None or name == "donor_bandwidth":
            return None if text.lower() == "none" else int(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(str(exc), line=line, field=name) from None


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Line number of every key, for diagnostics configparser does not keep."""
    out = {}
    section = None
    for n, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            out[(section, "")] = n
        elif "=" in s and section is not None:
            out[(section, s.split("=", 1)[0].strip().lower())] = n
    return out


def parse_config_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    lines = _key_lines(text)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], line=getattr(exc, "lineno", None)) from None
    cfg = ExperimentConfig()
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]", line=lines.get((section, "")))
        target = getattr(cfg, section)
        known = {f.name: f for f in dataclasses.fields(target)}
        for key, raw in cp.items(section):
            line = lines.get((section, key))
            if key not in known:
                raise ConfigError(f"unknown key '{key}' in [{section}]", line=line, field=key)
            setattr(target, key, _parse_value(raw, getattr(target, key), key, line))
    cfg.validate()
    return cfg


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"))


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; parse_config_text(serialize_config(c)) == c."""
    out = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        out.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            out.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


def default_config_text() -> str:
    return serialize_config(ExperimentConfig())
