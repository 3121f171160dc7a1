"""Multi-agent resource collection on a grid.

Agents share one team reward. Every episode draws a reward table
``rho[type, agent]`` that all agents can see: collecting a resource of type
``t`` with agent ``k`` pays ``rho[t, k]`` to the team. Collection happens on
occupancy; when several agents land on a site the lowest index collects.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .mdp import ACTION_DELTAS, ConfigError

LEMON, APPLE = 0, 1
SAMPLERS = ("ranked_random", "fixed", "reversed_ranking")
DEFAULT_LADDER = (10.0, 7.0, 4.0, 2.0, 1.0)


class EpisodeOverError(RuntimeError):
    pass


def value_ladder(K: int, ladder=DEFAULT_LADDER) -> np.ndarray:
    """Descending reward values, padded with 1.0 past the ladder's end."""
    vals = list(ladder[:K]) + [1.0] * max(0, K - len(ladder))
    return np.array(vals, dtype=np.float64)


@dataclass
class EnvConfig:
    width: int = 7
    height: int = 7
    num_agents: int = 3
    resource_types: int = 2
    num_sites: int = 4
    step_cap: int = 50
    reward_sampler: str = "ranked_random"
    rho_max: float = 10.0
    fixed_rho: list | None = None  # T x K, only for the "fixed" sampler
    ladder: tuple = DEFAULT_LADDER

    def validate(self, path: str = "") -> None:
        def fail(key, msg):
            raise ConfigError(f"{path}/{key}: {msg}")

        for key in ("width", "height", "num_agents", "resource_types", "num_sites", "step_cap"):
            if int(getattr(self, key)) < 1 and key != "num_sites":
                fail(key, "must be a positive integer")
        if self.num_sites < 0:
            fail("num_sites", "must be non-negative")
        if self.num_sites + self.num_agents > self.width * self.height:
            fail("num_sites", "not enough distinct cells for agents and sites")
        if not self.rho_max > 0:
            fail("rho_max", "must be positive")
        if self.reward_sampler not in SAMPLERS:
            fail("reward_sampler", f"unknown sampler {self.reward_sampler!r}")
        if self.reward_sampler == "reversed_ranking" and self.resource_types != 2:
            fail("reward_sampler", "reversed_ranking needs exactly 2 resource types")
        if self.reward_sampler == "fixed":
            rho = np.asarray(self.fixed_rho, dtype=np.float64) if self.fixed_rho is not None else None
            if rho is None or rho.shape != (self.resource_types, self.num_agents):
                fail("fixed_rho", "must be a resource_types x num_agents table")
            if np.any(rho <= 0) or np.any(rho > self.rho_max):
                fail("fixed_rho", "entries must lie in (0, rho_max]")
        if max(value_ladder(self.num_agents, self.ladder)) > self.rho_max:
            fail("ladder", "ladder values exceed rho_max")

    @property
    def o_alone_dim(self) -> int:
        return 2 + self.num_sites * (3 + self.resource_types)

    @property
    def token_dim(self) -> int:
        return 3 + self.resource_types


@dataclass
class EnvState:
    agent_positions: np.ndarray  # (K, 2) of (x, y)
    site_cells: np.ndarray  # (num_sites, 2)
    site_types: np.ndarray  # (num_sites,)
    live: np.ndarray  # (num_sites,) bool
    rho: np.ndarray  # (T, K)
    steps_elapsed: int = 0
    done: bool = False

    def copy(self) -> "EnvState":
        return EnvState(
            self.agent_positions.copy(), self.site_cells.copy(), self.site_types.copy(),
            self.live.copy(), self.rho.copy(), self.steps_elapsed, self.done,
        )

    def to_json(self) -> dict:
        return {
            "agent_positions": self.agent_positions.tolist(),
            "sites": [
                {"cell": c.tolist(), "type": int(t), "live": bool(l)}
                for c, t, l in zip(self.site_cells, self.site_types, self.live)
            ],
            "rho": self.rho.tolist(),
            "steps_elapsed": self.steps_elapsed,
            "done": self.done,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EnvState":
        sites = d["sites"]
        return cls(
            agent_positions=np.array(d["agent_positions"], dtype=np.int64).reshape(-1, 2),
            site_cells=np.array([s["cell"] for s in sites], dtype=np.int64).reshape(-1, 2),
            site_types=np.array([s["type"] for s in sites], dtype=np.int64),
            live=np.array([s.get("live", True) for s in sites], dtype=bool),
            rho=np.array(d["rho"], dtype=np.float64),
            steps_elapsed=int(d.get("steps_elapsed", 0)),
            done=bool(d.get("done", False)),
        )


def reversed_rho(K: int, ladder=DEFAULT_LADDER) -> np.ndarray:
    """Lemon row descends with agent index, apple row ascends."""
    vals = value_ladder(K, ladder)
    return np.stack([vals, vals[::-1]])


def is_reversed_family(rho: np.ndarray, ladder=DEFAULT_LADDER) -> bool:
    rho = np.asarray(rho)
    if rho.shape[0] != 2:
        return False
    return bool(np.array_equal(rho, reversed_rho(rho.shape[1], ladder)))


def sample_reward_table(rng: np.random.Generator, K: int, T: int, sampler: str,
                        fixed=None, ladder=DEFAULT_LADDER) -> np.ndarray:
    if K < 1 or T < 1:
        raise ConfigError("K and T must be >= 1")
    if sampler == "fixed":
        return np.array(fixed, dtype=np.float64)
    if sampler == "reversed_ranking":
        if T != 2:
            raise ConfigError("reversed_ranking is defined for exactly two resource types")
        return reversed_rho(K, ladder)
    if sampler != "ranked_random":
        raise ConfigError(f"unknown sampler {sampler!r}")
    vals = value_ladder(K, ladder)
    while True:
        rho = np.stack([vals[rng.permutation(K)] for _ in range(T)])
        # with K == 1 every table is the reversed one; nothing left to exclude
        if K == 1 or not is_reversed_family(rho, ladder):
            return rho


def reset(config: EnvConfig, rng: np.random.Generator) -> EnvState:
    K, n = config.num_agents, config.num_sites
    cells = config.width * config.height
    if K + n > cells:
        raise ConfigError("not enough distinct cells for agents and sites")
    picks = rng.choice(cells, size=K + n, replace=False)
    xy = np.stack([picks % config.width, picks // config.width], axis=1).astype(np.int64)
    types = rng.integers(0, config.resource_types, size=n)
    rho = sample_reward_table(rng, K, config.resource_types, config.reward_sampler,
                              config.fixed_rho, config.ladder)
    return EnvState(
        agent_positions=xy[:K].copy(),
        site_cells=xy[K:].copy(),
        site_types=types.astype(np.int64),
        live=np.ones(n, dtype=bool),
        rho=rho,
        steps_elapsed=0,
        done=n == 0,
    )


def move(pos: np.ndarray, action: int, width: int, height: int) -> np.ndarray:
    dx, dy = ACTION_DELTAS[action]
    return np.array([min(max(pos[0] + dx, 0), width - 1), min(max(pos[1] + dy, 0), height - 1)])


def step(config: EnvConfig, state: EnvState, joint_action):
    """Advance one step. Returns ``(next_state, team_reward, done, collected)``.

    ``collected`` lists ``(site, agent)`` pairs picked up on this step.
    """
    if state.done:
        raise EpisodeOverError("step() called on a finished episode")
    K = state.agent_positions.shape[0]
    if len(joint_action) != K:
        raise ValueError(f"expected {K} actions, got {len(joint_action)}")
    nxt = state.copy()
    for k, a in enumerate(joint_action):
        nxt.agent_positions[k] = move(state.agent_positions[k], int(a), config.width, config.height)
    reward = 0.0
    collected = []
    for m in np.nonzero(nxt.live)[0]:
        for k in range(K):  # lowest index collects
            if np.array_equal(nxt.agent_positions[k], nxt.site_cells[m]):
                reward += float(nxt.rho[nxt.site_types[m], k])
                nxt.live[m] = False
                collected.append((int(m), k))
                break
    nxt.steps_elapsed += 1
    nxt.done = bool(not nxt.live.any() or nxt.steps_elapsed >= config.step_cap)
    return nxt, reward, nxt.done, collected


def _scales(config: EnvConfig):
    return max(config.width - 1, 1), max(config.height - 1, 1)


@dataclass
class ObservationPair:
    o_alone: np.ndarray
    tokens: np.ndarray  # (num_other_agents, token_dim)


def observe(config: EnvConfig, state: EnvState, i: int) -> ObservationPair:
    sx, sy = _scales(config)
    T = config.resource_types
    pos = state.agent_positions[i]
    o = np.zeros(config.o_alone_dim)
    o[0], o[1] = pos[0] / sx, pos[1] / sy
    slot = 3 + T
    for m in range(config.num_sites):
        if not state.live[m]:
            continue
        base = 2 + m * slot
        o[base] = 1.0
        o[base + 1] = (state.site_cells[m, 0] - pos[0]) / sx
        o[base + 2] = (state.site_cells[m, 1] - pos[1]) / sy
        t = state.site_types[m]
        o[base + 3 + t] = state.rho[t, i] / config.rho_max
    K = state.agent_positions.shape[0]
    tokens = np.zeros((K - 1, config.token_dim))
    for row, j in enumerate(k for k in range(K) if k != i):
        dx = state.agent_positions[j] - pos
        tokens[row, 0] = dx[0] / sx
        tokens[row, 1] = dx[1] / sy
        tokens[row, 2] = 1.0
        tokens[row, 3:] = state.rho[:, j] / config.rho_max
    return ObservationPair(o, tokens)


def observe_all(config: EnvConfig, state: EnvState):
    """Stacked observations: o_alone (K, D) and tokens (K, K-1, token_dim)."""
    K = state.agent_positions.shape[0]
    obs = [observe(config, state, i) for i in range(K)]
    o_alone = np.stack([ob.o_alone for ob in obs])
    tokens = np.stack([ob.tokens for ob in obs]) if K > 1 else np.zeros((K, 0, config.token_dim))
    return o_alone, tokens


def episode_trace_line(step_idx, state, actions, reward, collected) -> dict:
    return {
        "step": step_idx,
        "positions": state.agent_positions.tolist(),
        "actions": [int(a) for a in actions],
        "reward": reward,
        "collected": [list(c) for c in collected],
    }


def all_ranked_tables(K: int, T: int, ladder=DEFAULT_LADDER):
    """Every table ranked_random can emit (before exclusion); small K only."""
    vals = value_ladder(K, ladder)
    perms = [vals[list(p)] for p in itertools.permutations(range(K))]
    for rows in itertools.product(perms, repeat=T):
        yield np.stack(rows)
