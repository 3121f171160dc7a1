"""Zero-shot evaluation: held-out reward rankings, changed team size, policy maps.

All rollouts are greedy (epsilon = 0). Episode ``e`` of a report draws its
layout from ``rng_stream(seed, "adhoc", e)``, so two policies evaluated
with the same seed face the same layouts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import gridworld as gw
from .learner import AgentNets
from .mdp import ACTION_DELTAS, ConfigError
from .nnet import ParamStore
from .seeding import rng_stream


@dataclass
class EvalReport:
    scenario: str
    episodes: int
    mean_return: float
    std_err: float
    returns: list = field(default_factory=list)
    seed: int = 0

    @classmethod
    def from_returns(cls, scenario: str, returns, seed: int) -> "EvalReport":
        returns = [float(r) for r in returns]
        mean, se = summarize(returns)
        return cls(scenario, len(returns), mean, se, returns, seed)

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "episodes": self.episodes,
            "mean_return": self.mean_return,
            "std_err": self.std_err,
            "returns": self.returns,
            "seed": self.seed,
        }


def summarize(returns) -> tuple[float, float]:
    """Mean and standard error (sample std / sqrt(n)); 0 error below two samples."""
    x = np.asarray(returns, dtype=np.float64)
    if x.size == 0:
        return 0.0, 0.0
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(x.mean()), se


def nets_policy(nets: AgentNets):
    """Greedy joint policy over stacked observations ``(K, D)``, ``(K, N, td)``."""
    dt = nets.dtype

    def policy(o_alone, tokens, mask):
        out = nets.q(o_alone[:, None].astype(dt), tokens[:, None].astype(dt), mask[:, None])
        return np.argmax(out.q[:, 0], axis=-1)

    return policy


def uniform_random_policy(rng: np.random.Generator):
    def policy(o_alone, tokens, mask):
        return rng.integers(0, len(ACTION_DELTAS), size=o_alone.shape[0])

    return policy


def evaluate_policy(policy, env_config: gw.EnvConfig, episodes: int, seed: int,
                    scenario: str = "standard") -> EvalReport:
    env_config.validate("/env")
    returns = [gw_rollout(env_config, policy, rng_stream(seed, "adhoc", e))
               for e in range(episodes)]
    return EvalReport.from_returns(scenario, returns, seed)


def gw_rollout(env_config: gw.EnvConfig, policy, rng: np.random.Generator) -> float:
    state = gw.reset(env_config, rng)
    total = 0.0
    while not state.done:
        o, t = gw.observe_all(env_config, state)
        mask = np.ones(t.shape[:-1], dtype=bool)
        state, r, _, _ = gw.step(env_config, state, policy(o, t, mask))
        total += r
    return total


def evaluate(nets: AgentNets, env_config: gw.EnvConfig, episodes: int, seed: int,
             scenario: str = "standard") -> EvalReport:
    if env_config.num_agents != nets.num_agents:
        raise ConfigError(f"nets hold {nets.num_agents} agents, environment has "
                          f"{env_config.num_agents}")
    nets.check_layout(env_config.o_alone_dim, env_config.token_dim)
    return evaluate_policy(nets_policy(nets), env_config, episodes, seed, scenario)


def adhoc_reversed_test(nets: AgentNets, env_config: gw.EnvConfig, episodes: int,
                        seed: int) -> EvalReport:
    """Evaluate on the reversed-ranking reward table, never seen in training."""
    if env_config.resource_types != 2:
        raise ConfigError("the reversed-ranking test needs exactly two resource types")
    cfg = replace(env_config, num_agents=nets.num_agents, reward_sampler="reversed_ranking",
                  fixed_rho=None)
    return evaluate(nets, cfg, episodes, seed, scenario="adhoc_reversed")


def adhoc_team_size_test(nets: AgentNets, env_config: gw.EnvConfig, test_K: int,
                         episodes: int, seed: int) -> EvalReport:
    """Evaluate nets trained at K with ``test_K`` agents; extra agents clone agent K-1."""
    K = nets.num_agents
    if test_K < 1:
        raise ConfigError("test_K must be >= 1")
    if abs(test_K - K) > K - 1:
        raise ConfigError(f"test_K={test_K} is too far from the trained team size {K}")
    cfg = replace(env_config, num_agents=test_K)
    if cfg.reward_sampler == "fixed":
        raise ConfigError("a fixed reward table cannot follow a change of team size")
    return evaluate(nets.resize(test_K), cfg, episodes, seed, scenario=f"team_size:{test_K}")


@dataclass
class PolicyMap:
    agent: int
    width: int
    height: int
    alone: list  # [y][x] greedy action under Q_alone, None where the cell is not free
    full: list  # same for the full Q
    state: gw.EnvState
    rho: np.ndarray

    def free_cells(self) -> list:
        return [(x, y) for y in range(self.height) for x in range(self.width)
                if self.alone[y][x] is not None]

    def to_json(self) -> dict:
        return {
            "agent": self.agent,
            "width": self.width,
            "height": self.height,
            "alone": self.alone,
            "full": self.full,
            "state": self.state.to_json(),
            "rho": self.rho.tolist(),
        }


def _free_cells(env_config: gw.EnvConfig, state: gw.EnvState, i: int) -> list:
    taken = {tuple(p) for k, p in enumerate(state.agent_positions.tolist()) if k != i}
    taken |= {tuple(c) for c, live in zip(state.site_cells.tolist(), state.live) if live}
    return [(x, y) for y in range(env_config.height) for x in range(env_config.width)
            if (x, y) not in taken]


def policy_map_export(nets: AgentNets, env_config: gw.EnvConfig, state: gw.EnvState,
                      i: int) -> PolicyMap:
    """Greedy actions of agent ``i`` at every free cell, teammates frozen."""
    K = state.agent_positions.shape[0]
    if not 0 <= i < K:
        raise ConfigError(f"agent {i} out of range for {K} agents")
    if K > nets.num_agents:
        nets = nets.resize(K)
    nets.check_layout(env_config.o_alone_dim, env_config.token_dim)
    cells = _free_cells(env_config, state, i)
    obs = []
    for x, y in cells:
        s = state.copy()
        s.agent_positions[i] = (x, y)
        obs.append(gw.observe(env_config, s, i))
    dt = nets.dtype
    one = lambda store: ParamStore((k, v[i:i + 1]) for k, v in store.items())
    single = AgentNets(one(nets.params), one(nets.target), nets.algo, nets.variant,
                       nets.num_heads)
    o = np.stack([ob.o_alone for ob in obs]).astype(dt)[None]
    t = np.stack([ob.tokens for ob in obs]).astype(dt)[None]
    out = single.q(o, t, np.ones(t.shape[:-1], dtype=bool))
    a_alone = np.argmax(out.q_alone[0], axis=-1)
    a_full = np.argmax(out.q[0], axis=-1)
    alone = [[None] * env_config.width for _ in range(env_config.height)]
    full = [[None] * env_config.width for _ in range(env_config.height)]
    for (x, y), a1, a2 in zip(cells, a_alone, a_full):
        alone[y][x], full[y][x] = int(a1), int(a2)
    return PolicyMap(i, env_config.width, env_config.height, alone, full, state.copy(),
                     state.rho.copy())
