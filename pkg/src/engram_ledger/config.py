"""Strict JSON run configuration.

One file drives every subcommand. Top-level keys are simulation settings;
the optional ``sharding``, ``drill`` and ``memory`` objects hold the
parameters of the matching experiments. Unknown keys, duplicate keys,
wrong types and out-of-range values are all rejected.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .adversary import BadScenario, scenario_from_dict, scenario_to_dict
from .hashing import SeparatorParams
from .mnemochain import EngramParams, MemoryParams
from .netsim import ConfigInvalid, SimConfig
from .sharding import PolicyKind


class ConfigError(ValueError):
    pass


class ParseError(ConfigError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnknownKey(ConfigError):
    def __init__(self, name: str):
        super().__init__(f"unknown key {name!r}")
        self.name = name


class RangeError(ConfigError):
    def __init__(self, field_name: str, message: str = "out of range"):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ShardingParams:
    trials: int = 10_000
    n_nodes: int = 100
    policies: tuple = tuple(k.value for k in PolicyKind)
    latency_txns: int = 10_000
    per_txn_cost: float = 1.0
    per_segment_cost: float = 30.0
    segment_counts: tuple = (2, 5, 10, 20, 50)
    lb_seeds: int = 0
    lb_rounds: int = 1000
    lb_initial_nodes: int = 50
    lb_join_fraction: float = 0.2
    lb_segments_per_round: int = 80
    lb_capacity: int = 5
    lb_tau_node: float = 20.0
    lb_floor: float = 4.0


@dataclass(frozen=True)
class DrillParams:
    rounds: int = 100
    per_round: int = 20
    learning_rate: float = 0.1
    margin: float = 0.5
    held_out: int = 1000
    low: float = 0.1
    high: float = 0.6
    noise: float = 0.01
    grid_points: int = 51


@dataclass(frozen=True)
class MemorySection:
    n_neurons: int = 2048
    engram_size: int = 40
    boost: float = 4.0
    tau_mem: float = 10.0
    floor: float = 1.0
    tau_young: float = 20.0
    young_gain: float = 2.0
    input_dim: int = 1024
    code_size: int = 2048
    code_k: int = 40
    elements_per_episode: int = 3
    element_dim: int = 16
    retention: float = 0.75
    alternatives: int = 4
    h1_seeds: int = 100
    h2_probes: int = 1000
    h3_trials: int = 200
    linking_pairs: int = 2000
    linking_lags: int = 10

    def params(self) -> MemoryParams:
        return MemoryParams(
            n_neurons=self.n_neurons,
            engram=EngramParams(self.engram_size, self.boost, self.tau_mem, self.floor,
                                self.tau_young, self.young_gain),
            separator=SeparatorParams(self.input_dim, self.code_size, self.code_k),
            elements_per_episode=self.elements_per_episode, element_dim=self.element_dim,
            retention=self.retention, alternatives=self.alternatives,
            h1_seeds=self.h1_seeds, h2_probes=self.h2_probes, h3_trials=self.h3_trials)


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    sharding: ShardingParams = ShardingParams()
    drill: DrillParams = DrillParams()
    memory: MemorySection = MemorySection()

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self.sim)
        data["latency"] = list(self.sim.latency)
        data["node_join_schedule"] = [list(p) for p in self.sim.node_join_schedule]
        data["adversaries"] = [a if isinstance(a, dict) else scenario_to_dict(a)
                               for a in self.sim.adversaries]
        for name in ("sharding", "drill", "memory"):
            section = dataclasses.asdict(getattr(self, name))
            data[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return data

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, sim=dataclasses.replace(self.sim, seed=seed))


# --- parsing -------------------------------------------------------------

_SECTIONS = {"sharding": ShardingParams, "drill": DrillParams, "memory": MemorySection}
_OPTIONAL_INT = {"quorum", "run_time"}
_LISTS = {"latency", "node_join_schedule", "adversaries", "policies", "segment_counts"}


def _reject_constant(name: str):
    raise ValueError(f"{name} is not valid JSON")


def _no_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise ValueError(f"duplicate key {key!r}")
        seen[key] = value
    return seen


def _check_type(name: str, value: Any, default: Any) -> Any:
    if name in _OPTIONAL_INT:
        if value is None:
            return None
        default = 0
    if name in _LISTS:
        if not isinstance(value, list):
            raise RangeError(name, "must be a list")
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise RangeError(name, f"expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _build(cls, data: dict, prefix: str = ""):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise UnknownKey(prefix + key)
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        kwargs[key] = _check_type(prefix + key, value, default)
    return cls(**kwargs)


def _validate_section(name: str, section) -> None:
    for f in dataclasses.fields(section):
        value = getattr(section, f.name)
        if isinstance(value, (int, float)) and not isinstance(value, bool) and value < 0:
            raise RangeError(f"{name}.{f.name}", "must be non-negative")
    if isinstance(section, ShardingParams):
        known = {k.value for k in PolicyKind}
        for p in section.policies:
            if p not in known:
                raise RangeError("sharding.policies", f"unknown policy {p!r}")
        if section.n_nodes < 3 or section.lb_initial_nodes < 3:
            raise RangeError("sharding.n_nodes", "need at least 3 nodes")
        if any(not isinstance(s, int) or s < 1 for s in section.segment_counts):
            raise RangeError("sharding.segment_counts", "must be positive integers")
        if section.lb_tau_node <= 0:
            raise RangeError("sharding.lb_tau_node", "must be positive")
    elif isinstance(section, DrillParams):
        if not 0 <= section.low <= section.high <= 1:
            raise RangeError("drill.low", "need 0 <= low <= high <= 1")
        if section.rounds < 1 or section.grid_points < 1 or section.held_out < 1:
            raise RangeError("drill.rounds", "rounds, grid_points and held_out must be positive")
    elif isinstance(section, MemorySection):
        if section.engram_size > section.n_neurons:
            raise RangeError("memory.engram_size", "must not exceed n_neurons")
        if not 0 <= section.retention <= 1:
            raise RangeError("memory.retention", "must be in [0, 1]")
        if section.alternatives < 2 or section.elements_per_episode < 2:
            raise RangeError("memory.alternatives", "need at least 2 alternatives and elements")
        if section.tau_mem <= 0 or section.floor <= 0 or section.young_gain < 1:
            raise RangeError("memory.tau_mem", "tau_mem, floor > 0 and young_gain >= 1")
        if section.code_k * 10 > section.code_size or section.code_k < 1:
            raise RangeError("memory.code_k", "need 1 <= k and 10k <= code_size")
        if section.linking_lags < 2 or section.linking_pairs < section.linking_lags:
            raise RangeError("memory.linking_lags", "need >= 2 lags and a pair per lag")


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ParseError(1, "top level must be a JSON object")
    data = dict(data)
    sections = {}
    for name, cls in _SECTIONS.items():
        raw = data.pop(name, {})
        if not isinstance(raw, dict):
            raise RangeError(name, "must be an object")
        sections[name] = _build(cls, raw, name + ".")
        for key in ("policies", "segment_counts"):
            if hasattr(sections[name], key):
                sections[name] = dataclasses.replace(
                    sections[name], **{key: tuple(getattr(sections[name], key))})
        _validate_section(name, sections[name])
    sim = _build(SimConfig, data)
    try:
        sim.adversaries = [scenario_to_dict(scenario_from_dict(a)) if isinstance(a, dict)
                           else _raise(RangeError("adversaries", "entries must be objects"))
                           for a in sim.adversaries]
    except BadScenario as exc:
        raise RangeError("adversaries", str(exc)) from None
    try:
        sim.validate()
    except ConfigInvalid as exc:
        raise RangeError(str(exc).split(":")[0], str(exc)) from None
    except (TypeError, ValueError) as exc:
        raise RangeError("config", str(exc)) from None
    return RunConfig(sim, **sections)


def _raise(exc):
    raise exc


def parse_config_text(text: str) -> RunConfig:
    try:
        data = json.loads(text, object_pairs_hook=_no_duplicates,
                          parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from None
    except ValueError as exc:
        raise ParseError(1, str(exc)) from None
    return config_from_dict(data)


def parse_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def dump_config(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"


# --- presets -------------------------------------------------------------

# Throughput labels only: the rates keep the 7 : 20 : 2000 ratio.
PRESET_RATES = {"preset-bitcoin": 7, "preset-ethereum": 20, "preset-visa": 2000}
_BASE_RATE = 0.01


def preset(name: str) -> RunConfig:
    if name not in PRESET_RATES:
        raise UnknownKey(name)
    rate = _BASE_RATE * PRESET_RATES[name]
    verification = "sharded" if name == "preset-visa" else "full"
    sim = SimConfig(txn_rate=rate, verification=verification,
                    max_block_txns=max(100, int(rate * 40)))
    return RunConfig(sim.validate())


def load_config(source: str | None) -> tuple[RunConfig, bytes]:
    """Parse a path or preset name; returns the config and the bytes it came from."""
    if source is None:
        config = RunConfig()
        return config, dump_config(config).encode()
    if source in PRESET_RATES:
        config = preset(source)
        return config, dump_config(config).encode()
    raw = Path(source).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(1, f"not UTF-8: {exc}") from None
    return parse_config_text(text), raw
