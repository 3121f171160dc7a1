"""Deterministic tabular MDPs and finite-horizon dynamic programming.

Everything here is float64 and pure. Actions on grid MDPs are ordered
(up, down, left, right, stay) and every tie-break picks the lowest index.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

UP, DOWN, LEFT, RIGHT, STAY = range(5)
ACTION_NAMES = ("up", "down", "left", "right", "stay")
# (dx, dy) per action; y grows downward (row index)
ACTION_DELTAS = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))

UNREACHABLE = -1


class ConfigError(ValueError):
    pass


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class TabularMdp:
    """Deterministic finite-horizon MDP.

    ``transition[s, a]`` is the successor of state ``s`` under action ``a``.
    ``horizon`` counts backups; values at step ``horizon`` are zero.
    """

    transition: np.ndarray
    horizon: int
    discount: float

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=np.int64)
        if t.ndim != 2 or t.shape[0] < 1 or t.shape[1] < 1:
            raise ConfigError("transition must be a non-empty (states, actions) table")
        if t.min() < 0 or t.max() >= t.shape[0]:
            raise ConfigError("transition maps outside the state space")
        if self.horizon < 0:
            raise ConfigError(f"horizon must be >= 0, got {self.horizon}")
        if not 0.0 < self.discount < 1.0:
            raise ConfigError(f"discount must lie in (0, 1), got {self.discount}")
        t.setflags(write=False)
        object.__setattr__(self, "transition", t)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def zero_reward(self) -> np.ndarray:
        return np.zeros((self.num_states, self.num_actions))


def build_grid_mdp(width: int, height: int, discount: float, horizon: int) -> TabularMdp:
    """Row-major grid with 5 actions; moves off the border leave the agent in place."""
    if width < 1 or height < 1:
        raise ConfigError(f"grid dimensions must be positive, got {width}x{height}")
    trans = np.empty((width * height, len(ACTION_DELTAS)), dtype=np.int64)
    for y in range(height):
        for x in range(width):
            for a, (dx, dy) in enumerate(ACTION_DELTAS):
                nx = min(max(x + dx, 0), width - 1)
                ny = min(max(y + dy, 0), height - 1)
                trans[y * width + x, a] = ny * width + nx
    return TabularMdp(trans, horizon, discount)


def unroll_horizon(mdp: TabularMdp) -> TabularMdp:
    """Time-indexed copy of ``mdp``: state ``h * n + x`` is state ``x`` at step ``h``.

    A reward placed on an unrolled state can be collected at most once along
    any trajectory, and its shortest-path distance from a step-0 state is its
    step index (or unreachable). Steps run 0..H-1; the last layer self-loops,
    which never matters because values at step H are zero.
    """
    n, H = mdp.num_states, max(mdp.horizon, 1)
    layers = []
    for h in range(H):
        nxt = min(h + 1, H - 1)
        layers.append(mdp.transition + nxt * n)
    return TabularMdp(np.concatenate(layers, axis=0), mdp.horizon, mdp.discount)


def _check_reward(mdp: TabularMdp, r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.size != mdp.num_states * mdp.num_actions:
        raise DimensionError(
            f"reward has {r.size} entries, expected {mdp.num_states}x{mdp.num_actions}"
        )
    return r.reshape(mdp.num_states, mdp.num_actions)


def shortest_path_distance(mdp: TabularMdp, source: int, target: int) -> int:
    """Number of transitions on a shortest path, or UNREACHABLE."""
    return int(distances_from(mdp, source)[target])


def distances_from(mdp: TabularMdp, source: int) -> np.ndarray:
    """BFS distances from ``source`` to every state (UNREACHABLE where none)."""
    dist = np.full(mdp.num_states, UNREACHABLE, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        s = queue.popleft()
        for nxt in mdp.transition[s]:
            if dist[nxt] == UNREACHABLE:
                dist[nxt] = dist[s] + 1
                queue.append(nxt)
    return dist


def value_iteration(mdp: TabularMdp, r) -> np.ndarray:
    """Backward induction; returns values of shape (H + 1, num_states).

    ``V[h, x] = max_a r(x, a) + gamma * V[h + 1, T(x, a)]`` with ``V[H] = 0``.
    """
    r = _check_reward(mdp, r)
    H = mdp.horizon
    v = np.zeros((H + 1, mdp.num_states))
    for h in range(H - 1, -1, -1):
        q = r + mdp.discount * v[h + 1][mdp.transition]
        v[h] = q.max(axis=1)
    return v


def greedy_action(mdp: TabularMdp, r, v: np.ndarray, state: int, step: int) -> int:
    if not 0 <= step < mdp.horizon:
        raise ValueError(f"no action is defined at step {step} (horizon {mdp.horizon})")
    r = _check_reward(mdp, r)
    q = r[state] + mdp.discount * v[step + 1][mdp.transition[state]]
    return int(np.argmax(q))  # argmax returns the first maximum


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    rhs: float
    holds: bool


def lemma_bound_check(mdp: TabularMdp, s: int, r1, r2, tol: float = 1e-9) -> BoundReport:
    """Check |V(s; r1) - V(s; r2)| <= sum_{x,a} gamma^dist(s,x) |r1 - r2|.

    Unreachable states contribute zero to the right-hand side.
    """
    r1 = _check_reward(mdp, r1)
    r2 = _check_reward(mdp, r2)
    lhs = abs(value_iteration(mdp, r1)[0, s] - value_iteration(mdp, r2)[0, s])
    dist = distances_from(mdp, s)
    weight = np.where(dist == UNREACHABLE, 0.0, mdp.discount ** np.maximum(dist, 0))
    rhs = float(np.sum(weight[:, None] * np.abs(r1 - r2)))
    return BoundReport(float(lhs), rhs, bool(lhs <= rhs + tol))


def lemma_max_holds(a1: float, a1_prime: float, a2: float) -> bool:
    """0 <= max(a1', a2) - max(a1, a2) <= a1' - a1 for a1' >= a1."""
    diff = max(a1_prime, a2) - max(a1, a2)
    return 0.0 <= diff <= a1_prime - a1
