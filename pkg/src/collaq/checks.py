"""Randomized property sweeps shared by the CLI and the test suite.

Each sweep draws its instances from a seeded generator and returns the
per-instance outcomes, so callers decide what counts as failure.
"""

from __future__ import annotations

import numpy as np

from . import gridworld as gw
from .assignment import (
    AssignmentInstance, RewardSiteSet, Site, objective_J, solve_assignment, theorem1_gap_check,
)
from .learner import ReplayBuffer, TrainConfig, loss_and_grads, new_learner, td_target
from .mdp import build_grid_mdp, lemma_bound_check, lemma_max_holds, unroll_horizon
from .nnet import NetworkSpec, finite_diff_gradcheck

GAMMAS = (0.5, 0.9, 0.992)
GRADCHECK_EPS = (1e-4, 1e-5, 1e-6)


def lemma_max_sweep(n: int, seed: int = 0) -> list:
    """Max-lemma outcome for each of ``n`` random triples with a1 <= a1'."""
    rng = np.random.default_rng(seed)
    a1 = rng.normal(0, 10, n)
    a1p = a1 + np.abs(rng.normal(0, 10, n))
    a2 = rng.normal(0, 10, n)
    return [lemma_max_holds(x, y, z) for x, y, z in zip(a1, a1p, a2)]


def random_lemma_instance(rng: np.random.Generator, max_side: int = 5, max_h: int = 8):
    """Time-indexed grid MDP with two non-negative reward vectors and a step-0 state."""
    w, h = (int(v) for v in rng.integers(1, max_side + 1, 2))
    H = int(rng.integers(1, max_h + 1))
    mdp = unroll_horizon(build_grid_mdp(w, h, float(rng.choice(GAMMAS)), H))
    shape = (mdp.num_states, mdp.num_actions)
    r1 = rng.uniform(0, 5, shape) * (rng.random(shape) < 0.3)
    r2 = r1.copy()
    hit = rng.random(shape) < rng.uniform(0.02, 0.5)
    r2[hit] = rng.uniform(0, 5, int(hit.sum()))
    s = int(rng.integers(0, w * h))
    return mdp, s, r1, r2


def lemma_bound_sweep(n: int, seed: int = 0, tol: float = 1e-9) -> list:
    rng = np.random.default_rng(seed)
    return [lemma_bound_check(*random_lemma_instance(rng), tol=tol) for _ in range(n)]


def random_assignment_instance(rng: np.random.Generator, max_k: int = 3, max_m: int = 4,
                               max_side: int = 6, max_h: int = 6, remote: bool | None = None,
                               weights: bool | None = None) -> AssignmentInstance:
    """Agents on one time-indexed grid; each site is a (step, cell, action) triple.

    ``remote=False`` makes every agent local; ``None`` draws the local set.
    """
    w, h = (int(v) for v in rng.integers(2, max_side + 1, 2))
    H = int(rng.integers(2, max_h + 1))
    mdp = unroll_horizon(build_grid_mdp(w, h, float(rng.choice(GAMMAS)), H))
    n = w * h
    K = int(rng.integers(1, max_k + 1))
    M = int(rng.integers(1, max_m + 1))
    starts = [int(c) for c in rng.choice(n, size=K, replace=False)]
    picked = set()
    sites = []
    while len(sites) < M:
        key = (int(rng.integers(0, H)) * n + int(rng.integers(0, n)), int(rng.integers(0, 5)))
        if key in picked:
            continue
        picked.add(key)
        sites.append(Site(key[0], key[1], float(rng.uniform(0.5, 5.0))))
    if remote is None:
        remote = K > 1 and rng.random() < 0.7
    if remote and K > 1:
        size = int(rng.integers(1, K))
        local = frozenset(int(i) for i in rng.choice(K, size=size, replace=False))
    else:
        local = frozenset(range(K))
    use_w = rng.random() < 0.5 if weights is None else weights
    wt = rng.uniform(0.5, 2.0, (M, K)) if use_w else None
    return AssignmentInstance([mdp] * K, starts, RewardSiteSet(tuple(sites)), local,
                              int(rng.integers(0, H + 1)), w=wt)


def theorem_sweep(n: int, seed: int = 0, **kw) -> list:
    rng = np.random.default_rng(seed)
    return [theorem1_gap_check(random_assignment_instance(rng, **kw)) for _ in range(n)]


def random_feasible_matrix(rng: np.random.Generator, sites: RewardSiteSet,
                           w: np.ndarray) -> np.ndarray:
    """Split each budget among agents plus a slack share; sparse draws land near vertices."""
    M, K = w.shape
    conc = float(rng.choice([1.0, 0.1]))
    shares = rng.dirichlet(np.full(K + 1, conc), size=M)[:, :K]
    return shares * sites.budgets[:, None] / w


def oracle_sweep(n: int = 20, seed: int = 0, draws: int = 1000, **kw) -> list:
    """Per instance, ``(J*, best J over random feasible matrices)``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        inst = random_assignment_instance(rng, **kw)
        w = np.ones((inst.sites.M, len(inst.states))) if inst.w is None else inst.w
        _, j_star = solve_assignment(inst.mdps, inst.states, inst.sites, w)
        best = max(objective_J(inst.mdps, inst.states, inst.sites,
                               random_feasible_matrix(rng, inst.sites, w), w)
                   for _ in range(draws))
        out.append((j_star, best))
    return out


def random_gradcheck_case(rng: np.random.Generator, samples: int = 8):
    """Random float64 CollaQ network, replay batch and fixed target.

    Biases get N(0, 0.1) noise: at the all-zero initial biases many ReLUs sit
    exactly on their kink, where central differences are meaningless.
    Returns ``(params, loss_fn, grad_fn)``.
    """
    K = int(rng.integers(1, 4))
    env = gw.EnvConfig(width=5, height=5, num_agents=K, num_sites=3)
    heads = int(rng.choice([1, 2]))
    spec = NetworkSpec(
        o_alone_dim=env.o_alone_dim, token_dim=env.token_dim,
        alone_hidden=tuple(int(x) for x in rng.choice([4, 8, 16], size=rng.integers(1, 3))),
        encoder_hidden=tuple(int(x) for x in rng.choice([4, 8], size=rng.integers(0, 2))),
        model_dim=int(rng.choice([4, 8])) * heads, num_heads=heads,
        num_layers=int(rng.integers(1, 3)), head_hidden=(int(rng.choice([4, 8])),),
        precision="float64",
    )
    cfg = TrainConfig(algo="collaq", variant=str(rng.choice(["hard", "soft", "soft_target"])),
                      mara_actions=str(rng.choice(["sampled", "all"])),
                      alpha=float(rng.uniform(0.1, 2.0)))
    learner = new_learner(spec, cfg, K, rng)
    params = learner.params
    for k in params:
        if "/b" in k:
            params[k] = params[k] + rng.normal(0, 0.1, params[k].shape)
    target = params.copy()
    for k in target:
        target[k] = target[k] + rng.normal(0, 0.01, target[k].shape)
    buf = ReplayBuffer(100, K, env.o_alone_dim, K - 1, env.token_dim, np.float64)
    state = gw.reset(env, rng)
    o, t = gw.observe_all(env, state)
    for _ in range(40):
        a = rng.integers(0, 5, K)
        nxt, r, done, _ = gw.step(env, state, a)
        o2, t2 = gw.observe_all(env, nxt)
        buf.push(o, t, a, r, o2, t2, done)
        if done:
            nxt = gw.reset(env, rng)
            o2, t2 = gw.observe_all(env, nxt)
        state, o, t = nxt, o2, t2
    batch = buf.sample(samples, rng)
    y = td_target(batch, target, cfg, heads)

    def loss_fn(p):
        return loss_and_grads(p, batch, y, cfg, heads, target=target, need_grads=False)[0].total

    def grad_fn(p):
        return loss_and_grads(p, batch, y, cfg, heads, target=target)[1]

    return params, loss_fn, grad_fn


def gradcheck_sweep(n: int = 20, seed: int = 0, num_coords: int = 200) -> list:
    """Per spec, the smallest max relative error over the step sizes in GRADCHECK_EPS."""
    out = []
    for trial in range(n):
        rng = np.random.default_rng([seed, trial])
        params, lf, gf = random_gradcheck_case(rng)
        errs = [finite_diff_gradcheck(params, lf, gf, eps=e, num_coords=num_coords,
                                      rng=np.random.default_rng([seed, trial, 1]))
                for e in GRADCHECK_EPS]
        out.append(min(errs))
    return out
