"""Exact solver for the joint reward-assignment problem and its locality bound.

``R`` is an ``M x K`` matrix: column ``i`` is the reward agent ``i`` perceives
at each of the ``M`` reward sites. A matrix is feasible when, for every site
``m``, ``sum_i w[m, i] * R[m, i] <= budget[m]``.

Each agent's optimal value is convex in its own column, so the maximum of
the summed values over the feasible polytope sits on a vertex: every site is
given wholly to one agent or to nobody. The solver enumerates those vertices.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .mdp import UNREACHABLE, TabularMdp, distances_from, value_iteration

TOL = 1e-9
MAX_PATTERNS = 10**7
INF_DISTANCE = math.inf


class FeasibilityError(ValueError):
    pass


class SizeGuardError(RuntimeError):
    pass


@dataclass(frozen=True)
class Site:
    state: int
    action: int
    budget: float


@dataclass(frozen=True)
class RewardSiteSet:
    sites: tuple[Site, ...]

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        seen = set()
        for site in self.sites:
            if not site.budget > 0:
                raise ValueError(f"site budgets must be positive, got {site.budget}")
            key = (site.state, site.action)
            if key in seen:
                raise ValueError(f"duplicate reward site {key}")
            seen.add(key)

    @property
    def M(self) -> int:
        return len(self.sites)

    @property
    def budgets(self) -> np.ndarray:
        return np.array([s.budget for s in self.sites], dtype=np.float64)


def check_weights(w, M: int, K: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (M, K):
        raise ValueError(f"weights must have shape {(M, K)}, got {w.shape}")
    if not np.all(w > 0):
        raise ValueError("weights must be strictly positive")
    return w


def check_feasible(R: np.ndarray, sites: RewardSiteSet, w: np.ndarray) -> None:
    if np.any(R < -TOL):
        m, i = np.argwhere(R < -TOL)[0]
        raise FeasibilityError(f"negative assignment at site {m}, agent {i}")
    used = np.sum(w * R, axis=1)
    over = np.nonzero(used > sites.budgets + TOL)[0]
    if over.size:
        m = int(over[0])
        raise FeasibilityError(
            f"site {m} over budget: assigned {used[m]:.12g} > {sites.budgets[m]:.12g}"
        )


def expand_column(mdp: TabularMdp, sites: RewardSiteSet, column) -> np.ndarray:
    """Full (state, action) reward array, zero off-site."""
    r = mdp.zero_reward()
    for site, value in zip(sites.sites, column):
        r[site.state, site.action] = value
    return r


def agent_value(mdp: TabularMdp, state: int, sites: RewardSiteSet, column) -> float:
    return float(value_iteration(mdp, expand_column(mdp, sites, column))[0, state])


def objective_J(mdps, states, sites: RewardSiteSet, R, w=None) -> float:
    """Sum over agents of V_i(s_i; r_i)."""
    R = np.asarray(R, dtype=np.float64)
    K = len(states)
    if len(mdps) != K or R.shape != (sites.M, K):
        raise ValueError(f"inconsistent agent count: {len(mdps)} mdps, {K} states, R {R.shape}")
    w = np.ones((sites.M, K)) if w is None else check_weights(w, sites.M, K)
    check_feasible(R, sites, w)
    return float(sum(agent_value(mdps[i], states[i], sites, R[:, i]) for i in range(K)))


def enumerate_vertex_assignments(M: int, K: int):
    """Yield every vertex pattern as a tuple of length M.

    Entry ``0`` leaves the site unassigned; entry ``i`` (1-based) gives it to
    agent ``i``. Patterns come out in lexicographic order.
    """
    if M < 1 or K < 1:
        raise ValueError("M and K must be >= 1")
    if (K + 1) ** M > MAX_PATTERNS:
        raise SizeGuardError(
            f"{K + 1}^{M} vertex patterns exceed the {MAX_PATTERNS} guard; "
            "use solve_assignment_approx"
        )
    yield from itertools.product(range(K + 1), repeat=M)


def pattern_matrix(pattern, sites: RewardSiteSet, w: np.ndarray) -> np.ndarray:
    R = np.zeros(w.shape)
    budgets = sites.budgets
    for m, owner in enumerate(pattern):
        if owner:
            R[m, owner - 1] = budgets[m] / w[m, owner - 1]
    return R


class _SubsetValues:
    """Memoised V_i(s_i) for every subset of sites fully given to agent i."""

    def __init__(self, mdps, states, sites, w):
        self.mdps, self.states, self.sites, self.w = mdps, states, sites, w
        self.cache: dict[tuple[int, frozenset], float] = {}

    def __call__(self, i: int, subset: frozenset) -> float:
        key = (i, subset)
        if key not in self.cache:
            col = np.zeros(self.sites.M)
            for m in subset:
                col[m] = self.sites.sites[m].budget / self.w[m, i]
            self.cache[key] = agent_value(self.mdps[i], self.states[i], self.sites, col)
        return self.cache[key]


def solve_assignment(mdps, states, sites: RewardSiteSet, w=None, agents=None):
    """Exact maximiser over vertex patterns.

    ``agents`` restricts which columns may receive reward (0-based indices);
    the others stay zero. Ties go to the lexicographically smallest pattern.
    Returns ``(R_star, J_star)``.
    """
    K = len(states)
    w = np.ones((sites.M, K)) if w is None else check_weights(w, sites.M, K)
    allowed = list(range(K)) if agents is None else sorted(agents)
    values = _SubsetValues(mdps, states, sites, w)
    best, best_J = None, -math.inf
    for choice in enumerate_vertex_assignments(sites.M, len(allowed)):
        pattern = tuple(0 if c == 0 else allowed[c - 1] + 1 for c in choice)
        J = 0.0
        for i in range(K):
            owned = frozenset(m for m, owner in enumerate(pattern) if owner == i + 1)
            J += values(i, owned)
        if J > best_J + TOL:
            best, best_J = pattern, J
    return pattern_matrix(best, sites, w), best_J


def solve_assignment_approx(mdps, states, sites: RewardSiteSet, w=None, restarts=8, seed=0):
    """Seeded random-restart coordinate search over vertex patterns.

    For instances above the enumeration guard; the result is not certified
    optimal.
    """
    K = len(states)
    w = np.ones((sites.M, K)) if w is None else check_weights(w, sites.M, K)
    values = _SubsetValues(mdps, states, sites, w)
    rng = np.random.default_rng(seed)

    def score(pattern):
        return sum(
            values(i, frozenset(m for m, o in enumerate(pattern) if o == i + 1))
            for i in range(K)
        )

    best, best_J = None, -math.inf
    for _ in range(restarts):
        pattern = list(rng.integers(0, K + 1, size=sites.M))
        J = score(pattern)
        improved = True
        while improved:
            improved = False
            for m in range(sites.M):
                for owner in range(K + 1):
                    if owner == pattern[m]:
                        continue
                    trial = pattern.copy()
                    trial[m] = owner
                    tJ = score(trial)
                    if tJ > J + TOL:
                        pattern, J, improved = trial, tJ, True
        if J > best_J + TOL:
            best, best_J = tuple(int(o) for o in pattern), J
    return pattern_matrix(best, sites, w), best_J


def truncate_to_local(r_col, local_sites) -> np.ndarray:
    r_col = np.asarray(r_col, dtype=np.float64)
    out = np.zeros_like(r_col)
    idx = sorted(local_sites)
    out[idx] = r_col[idx]
    return out


@dataclass(frozen=True)
class LocalitySpec:
    local_agents: frozenset
    C: int
    local_sites: frozenset
    D: float  # math.inf when there are no remote agents


def site_distances(mdp: TabularMdp, state: int, sites: RewardSiteSet) -> np.ndarray:
    dist = distances_from(mdp, state)
    out = np.array([dist[s.state] for s in sites.sites], dtype=np.float64)
    out[out == UNREACHABLE] = math.inf
    return out


def locality_from_states(states, local_agents, C: int, mdp: TabularMdp,
                         sites: RewardSiteSet, local_sites=None) -> LocalitySpec:
    """Vicinity union over local agents and the distance D to remote agents.

    ``local_sites`` may be given explicitly; it must cover every local
    agent's vicinity.
    """
    local_agents = frozenset(local_agents)
    K = len(states)
    cover = set()
    for j in local_agents:
        d = site_distances(mdp, states[j], sites)
        cover.update(int(m) for m in np.nonzero(d <= C)[0])
    if local_sites is None:
        local_sites = frozenset(cover)
    else:
        local_sites = frozenset(local_sites)
        if not cover <= local_sites:
            raise ValueError("explicit local site set misses part of a local vicinity")
    remote = [j for j in range(K) if j not in local_agents]
    D = math.inf
    for j in remote:
        d = site_distances(mdp, states[j], sites)
        for m in local_sites:
            D = min(D, d[m])
    return LocalitySpec(local_agents, int(C), local_sites, D)


def discount_pow(gamma: float, d: float) -> float:
    return 0.0 if math.isinf(d) else gamma ** d


def construct_local_assignment(R_star, loc: LocalitySpec, mdps, states, sites: RewardSiteSet,
                               w=None) -> np.ndarray:
    """Build the locally-determined assignment R_hat from an optimum R_star.

    Local columns come from the local-only optimum with non-local rows
    cleared; remote columns come from R_star after pushing their local-site
    shares onto the nearest local agent and clearing (non-local, local).
    With no remote agents the local-only optimum is already feasible and is
    returned untouched.
    """
    R_star = np.asarray(R_star, dtype=np.float64)
    K = len(states)
    M = sites.M
    w = np.ones((M, K)) if w is None else check_weights(w, M, K)
    local = sorted(loc.local_agents)
    remote = [j for j in range(K) if j not in loc.local_agents]
    in_local = np.zeros(M, dtype=bool)
    in_local[sorted(loc.local_sites)] = True

    R_local, _ = solve_assignment(mdps, states, sites, w, agents=local)
    if not remote:
        return R_local

    # push remote shares of local sites onto the nearest local agent
    R_tilde = R_star.copy()
    dist_local = {j: site_distances(mdps[j], states[j], sites) for j in local}
    for m in np.nonzero(in_local)[0]:
        target = min(local, key=lambda j: (dist_local[j][m], j))
        for j in remote:
            share = w[m, j] * R_tilde[m, j]
            if share > 0:
                R_tilde[m, target] += share / w[m, target]
                R_tilde[m, j] = 0.0
    R_tilde0 = R_tilde.copy()
    R_tilde0[np.ix_(~in_local, local)] = 0.0

    R_local0 = R_local.copy()
    R_local0[np.ix_(~in_local, local)] = 0.0

    R_hat = np.zeros((M, K))
    R_hat[:, local] = R_local0[:, local]
    R_hat[:, remote] = R_tilde0[:, remote]
    check_feasible(R_hat, sites, w)
    return R_hat


def r_max(sites: RewardSiteSet, w: np.ndarray) -> float:
    return float(np.max(sites.budgets[:, None] / w))


@dataclass
class AssignmentInstance:
    mdps: list
    states: list
    sites: RewardSiteSet
    local_agents: frozenset
    C: int
    w: np.ndarray | None = None
    local_sites: frozenset | None = None


@dataclass
class GapReport:
    j_star: float
    j_hat: float
    bound: float
    holds: bool
    C: int
    D: float
    R_max: float
    M: int
    K: int
    R_star: np.ndarray = field(repr=False, default=None)
    R_hat: np.ndarray = field(repr=False, default=None)

    def to_json(self) -> dict:
        return {
            "j_star": self.j_star,
            "j_hat": self.j_hat,
            "gap": self.j_star - self.j_hat,
            "bound": self.bound,
            "holds": self.holds,
            "C": self.C,
            "D": None if math.isinf(self.D) else self.D,
            "R_max": self.R_max,
            "M": self.M,
            "K": self.K,
            "R_star": None if self.R_star is None else np.asarray(self.R_star).tolist(),
            "R_hat": None if self.R_hat is None else np.asarray(self.R_hat).tolist(),
        }


def theorem1_gap_check(inst: AssignmentInstance) -> GapReport:
    K = len(inst.states)
    M = inst.sites.M
    w = np.ones((M, K)) if inst.w is None else check_weights(inst.w, M, K)
    # all agents share one grid; distances are measured on agent 0's MDP
    loc = locality_from_states(inst.states, inst.local_agents, inst.C, inst.mdps[0],
                               inst.sites, inst.local_sites)
    R_star, j_star = solve_assignment(inst.mdps, inst.states, inst.sites, w)
    R_hat = construct_local_assignment(R_star, loc, inst.mdps, inst.states, inst.sites, w)
    j_hat = objective_J(inst.mdps, inst.states, inst.sites, R_hat, w)
    gamma = inst.mdps[0].discount
    rm = r_max(inst.sites, w)
    bound = (discount_pow(gamma, inst.C) + discount_pow(gamma, loc.D)) * rm * M * K
    return GapReport(
        j_star=j_star, j_hat=j_hat, bound=bound,
        holds=bool(j_hat >= j_star - bound - TOL),
        C=inst.C, D=loc.D, R_max=rm, M=M, K=K, R_star=R_star, R_hat=R_hat,
    )
