"""Experiment configuration: JSON schema with defaults, validation and hashing.

Errors name the offending field with a JSON pointer such as ``/train/gamma``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .gridworld import EnvConfig
from .learner import TrainConfig
from .mdp import ConfigError
from .nnet import NetworkSpec

SCENARIO_RE = re.compile(r"^(standard|adhoc_reversed|team_size:(\d+))$")


@dataclass
class EvalConfig:
    episodes: int = 200
    scenarios: tuple = ("standard", "adhoc_reversed", "team_size:2", "team_size:4")

    def validate(self, path: str = "/eval") -> None:
        if self.episodes < 1:
            raise ConfigError(f"{path}/episodes: must be >= 1")
        for n, s in enumerate(self.scenarios):
            if not isinstance(s, str) or not SCENARIO_RE.match(s):
                raise ConfigError(f"{path}/scenarios/{n}: unknown scenario {s!r}")


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    net: NetworkSpec = field(default_factory=NetworkSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs"

    def validate(self) -> None:
        self.env.validate("/env")
        self.train.validate("/train")
        self.net.validate("/net")
        self.eval.validate("/eval")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("/seed: must be a non-negative integer")
        if self.net.o_alone_dim != self.env.o_alone_dim:
            raise ConfigError(f"/net/o_alone_dim: {self.net.o_alone_dim} does not match the "
                              f"environment's {self.env.o_alone_dim}")
        if self.net.token_dim != self.env.token_dim:
            raise ConfigError(f"/net/token_dim: {self.net.token_dim} does not match the "
                              f"environment's {self.env.token_dim}")
        if self.net.num_actions != 5:
            raise ConfigError("/net/num_actions: the grid world has 5 actions")
        for s in self.eval.scenarios:
            m = SCENARIO_RE.match(s)
            if s == "adhoc_reversed" and self.env.resource_types != 2:
                raise ConfigError("/eval/scenarios: adhoc_reversed needs env.resource_types == 2")
            if m and m.group(2) is not None:
                k, K = int(m.group(2)), self.env.num_agents
                if k < 1 or abs(k - K) > K - 1:
                    raise ConfigError(f"/eval/scenarios: {s} is out of range for K={K}")

    def to_dict(self) -> dict:
        return to_plain(self)


def to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    return obj


def _coerce(value, default, path):
    """Check ``value`` against the type of its default and convert containers."""
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(value)
    return value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '/'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ConfigError(f"{path}/{key}: unknown key")
    base = cls()
    kwargs = {}
    for name, value in data.items():
        default = getattr(base, name)
        sub = f"{path}/{name}"
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        else:
            kwargs[name] = _coerce(value, default, sub)
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Defaults fill missing keys; network input dims follow the environment unless given."""
    if not isinstance(data, dict):
        raise ConfigError("/: expected an object")
    cfg = _build(ExperimentConfig, data, "")
    net = data.get("net", {})
    if "o_alone_dim" not in net:
        cfg.net.o_alone_dim = cfg.env.o_alone_dim
    if "token_dim" not in net:
        cfg.net.token_dim = cfg.env.token_dim
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"/: invalid JSON ({e.msg} at line {e.lineno})") from e
    return config_from_dict(data)


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def config_hash(cfg: ExperimentConfig) -> bytes:
    """sha256 over what determines trained parameters: env, train, net and seed."""
    d = cfg.to_dict()
    keep = {k: d[k] for k in ("env", "train", "net", "seed")}
    return hashlib.sha256(canonical_json(keep).encode()).digest()
