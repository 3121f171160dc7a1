"""CollaQ learner: decomposed Q-values, MARA loss, DQN training loop.

Per agent, ``Q = Q_alone(o_alone) + Q_collab(o)``. ``Q_collab`` encodes
``o_alone`` into a query that attends over teammate tokens; evaluating it
with no tokens gives ``Q_collab(o_alone)``, which the MARA term drives to
zero. The soft variants subtract ``Q_collab(o_alone)`` inside ``Q`` (with
online or target parameters).

Baselines share the machinery: ``iql`` is one tower over ``o_alone`` plus
mean/max pooled tokens; ``sum_two_nets`` adds that tower to the collab
stack without the alone/collab split and without MARA.

All per-agent parameters are stacked along axis 0, and batches are laid
out agent-first: ``o_alone`` is ``(K, B, D)``, tokens ``(K, B, N, token_dim)``.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gridworld as gw
from .mdp import ConfigError
from .nnet import (
    DimensionError,
    NetworkSpec,
    ParamStore,
    _attention_backward,
    _mlp_backward,
    attention_forward,
    fill_zeros,
    init_params,
    mlp_forward,
)
from .seeding import rng_stream

log = logging.getLogger(__name__)

ALGOS = ("collaq", "iql", "sum_two_nets")
VARIANTS = ("hard", "soft", "soft_target")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.01
    anneal_steps: int = 100_000


@dataclass
class TrainConfig:
    gamma: float = 0.992
    lr: float = 4e-5
    alpha: float = 1.0
    batch_size: int = 128
    target_update_period: int = 10_000
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    total_steps: int = 150_000
    buffer_capacity: int = 100_000
    learn_start: int = 1_000
    variant: str = "soft_target"
    algo: str = "collaq"
    mixer: str = "none"
    mara_actions: str = "sampled"
    rms_decay: float = 0.99
    rms_eps: float = 1e-5
    metrics_every: int = 500
    eval_every: int = 10_000
    eval_episodes: int = 10

    def validate(self, path: str = "") -> None:
        def fail(key, msg):
            raise ConfigError(f"{path}/{key}: {msg}")

        if not 0.0 < self.gamma < 1.0:
            fail("gamma", f"must lie in (0, 1), got {self.gamma}")
        if not self.lr > 0:
            fail("lr", "must be positive")
        if self.alpha < 0:
            fail("alpha", "must be >= 0")
        eps = self.epsilon
        if not 1.0 >= eps.start >= eps.end >= 0.0:
            fail("epsilon", "need 1 >= start >= end >= 0")
        if eps.anneal_steps < 0:
            fail("epsilon/anneal_steps", "must be >= 0")
        for key in ("batch_size", "target_update_period", "buffer_capacity",
                    "metrics_every", "eval_every"):
            if getattr(self, key) < 1:
                fail(key, "must be >= 1")
        for key in ("total_steps", "learn_start", "eval_episodes"):
            if getattr(self, key) < 0:
                fail(key, "must be >= 0")
        if self.variant not in VARIANTS:
            fail("variant", f"one of {VARIANTS}")
        if self.algo not in ALGOS:
            fail("algo", f"one of {ALGOS}")
        if self.mixer not in ("none", "additive"):
            fail("mixer", "one of ('none', 'additive')")
        if self.mara_actions not in ("sampled", "all"):
            fail("mara_actions", "one of ('sampled', 'all')")
        if not 0 <= self.rms_decay < 1:
            fail("rms_decay", "must lie in [0, 1)")

    @property
    def uses_mara(self) -> bool:
        return self.algo == "collaq"


def epsilon(step: int, schedule: EpsilonSchedule) -> float:
    if schedule.anneal_steps == 0 or step >= schedule.anneal_steps:
        return float(schedule.end)
    frac = step / schedule.anneal_steps
    return float(schedule.start + frac * (schedule.end - schedule.start))


# -- forward / backward -----------------------------------------------------

def pool_tokens(tokens, mask):
    """Mean and max over present tokens; zeros where none are present."""
    m = mask[..., None].astype(tokens.dtype)
    count = m.sum(axis=-2)
    mean = (tokens * m).sum(axis=-2) / np.maximum(count, 1)
    big = np.where(m > 0, tokens, -np.inf)
    mx = big.max(axis=-2) if tokens.shape[-2] else np.zeros_like(mean)
    mx = np.where(count > 0, mx, 0.0).astype(tokens.dtype)
    return np.concatenate([mean, mx], axis=-1)


@dataclass
class QOutput:
    q: np.ndarray
    q_alone: np.ndarray
    qc_o: np.ndarray | None = None
    qc_alone: np.ndarray | None = None
    traces: dict | None = None


def _collab_at_alone(params, o_alone):
    """Q_collab(o_alone) only: encoder then head with a zero attention embedding."""
    e, _ = mlp_forward(params, "cenc", o_alone, final_relu=True)
    X = np.concatenate([e, np.zeros_like(e)], axis=-1)
    return mlp_forward(params, "head", X)[0]


def forward_q(params: ParamStore, algo: str, variant: str, o_alone, tokens, mask,
              num_heads: int, target: ParamStore | None = None,
              want_trace: bool = False) -> QOutput:
    """Q-values for every action. Inputs carry a batch axis before features."""
    if algo == "iql":
        x = np.concatenate([o_alone, pool_tokens(tokens, mask)], axis=-1)
        qa, tra = mlp_forward(params, "alone", x, want_trace)
        return QOutput(qa, qa, traces={"alone": tra} if want_trace else None)

    xa = o_alone if algo == "collaq" else np.concatenate(
        [o_alone, pool_tokens(tokens, mask)], axis=-1)
    qa, tra = mlp_forward(params, "alone", xa, want_trace)
    e, tre = mlp_forward(params, "cenc", o_alone, want_trace, final_relu=True)
    t, trt = mlp_forward(params, "tenc", tokens, want_trace, final_relu=True)
    att, trat = attention_forward(params, e, t, mask, want_trace, num_heads=num_heads)
    B = o_alone.shape[-2]
    X = np.concatenate([
        np.concatenate([e, att], axis=-1),
        np.concatenate([e, np.zeros_like(att)], axis=-1),
    ], axis=-2)
    qh, trh = mlp_forward(params, "head", X, want_trace)
    qc_alone = qh[..., B:, :]
    # rows without teammates share the o_alone branch so the soft variant cancels bitwise
    empty = ~mask.any(axis=-1)
    qc_o = np.where(empty[..., None], qc_alone, qh[..., :B, :])

    if algo == "sum_two_nets" or variant == "hard":
        q = qa + qc_o
    elif variant == "soft":
        q = qa + (qc_o - qc_alone)
    else:
        sub = _collab_at_alone(target if target is not None else params, o_alone)
        q = qa + (qc_o - sub)
    traces = None
    if want_trace:
        traces = {"alone": tra, "cenc": tre, "tenc": trt, "attn": trat, "head": trh, "B": B,
                  "empty": empty}
    return QOutput(q, qa, qc_o, qc_alone, traces)


def backward_q(params: ParamStore, algo: str, variant: str, out: QOutput, g_q,
               g_qc_alone=None) -> ParamStore:
    """Gradients given d(loss)/dQ and an optional extra d(loss)/dQ_collab(o_alone)."""
    grads = ParamStore()
    tr = out.traces
    _mlp_backward(params, tr["alone"], g_q, grads)
    if algo == "iql":
        return fill_zeros(params, grads)
    g_alone_term = np.zeros_like(g_q) if g_qc_alone is None else g_qc_alone
    g_top = g_q
    if algo == "collaq" and variant == "soft":
        g_alone_term = g_alone_term - g_q
    empty = tr["empty"][..., None]
    if empty.any():
        g_alone_term = g_alone_term + np.where(empty, g_top, 0)
        g_top = np.where(empty, 0, g_top)
    gX = _mlp_backward(params, tr["head"], np.concatenate([g_top, g_alone_term], axis=-2),
                       grads, need_dx=True)
    B = tr["B"]
    d = gX.shape[-1] // 2
    ge = gX[..., :B, :d] + gX[..., B:, :d]
    gatt = gX[..., :B, d:]
    ge_att, gtok = _attention_backward(params, tr["attn"], gatt, grads)
    ge = ge + ge_att
    _mlp_backward(params, tr["tenc"], gtok, grads)
    _mlp_backward(params, tr["cenc"], ge, grads)
    return fill_zeros(params, grads)


def q_values(params: ParamStore, obs: gw.ObservationPair, cfg: TrainConfig, num_heads: int,
             target: ParamStore | None = None) -> np.ndarray:
    """Per-action Q for one agent's observation (unstacked params)."""
    dt = params[next(iter(params))].dtype
    o = np.asarray(obs.o_alone, dtype=dt)[None]
    toks = np.asarray(obs.tokens, dtype=dt)[None]
    mask = np.ones(toks.shape[:-1], dtype=bool)
    return forward_q(params, cfg.algo, cfg.variant, o, toks, mask, num_heads, target=target).q[0]


# -- losses ---------------------------------------------------------------

@dataclass
class Batch:
    o_alone: np.ndarray  # (K, B, D)
    tokens: np.ndarray  # (K, B, N, td)
    mask: np.ndarray  # (K, B, N)
    actions: np.ndarray  # (K, B)
    reward: np.ndarray  # (B,)
    next_o_alone: np.ndarray
    next_tokens: np.ndarray
    next_mask: np.ndarray
    done: np.ndarray  # (B,)


def td_target(batch: Batch, target: ParamStore, cfg: TrainConfig, num_heads: int) -> np.ndarray:
    """Per-agent targets (K, B); with the additive mixer, joint targets (B,)."""
    out = forward_q(target, cfg.algo, cfg.variant, batch.next_o_alone, batch.next_tokens,
                    batch.next_mask, num_heads, target=target)
    best = out.q.max(axis=-1)
    cont = (1.0 - batch.done.astype(best.dtype)) * cfg.gamma
    r = batch.reward.astype(best.dtype)
    if cfg.mixer == "additive":
        return r + cont * best.sum(axis=0)
    return r[None, :] + cont[None, :] * best


@dataclass
class LossParts:
    dqn: float
    mara: float
    total: float
    mean_abs_q_alone: float = 0.0
    mean_abs_q_collab_at_alone: float = 0.0


def loss_and_grads(params: ParamStore, batch: Batch, y, cfg: TrainConfig, num_heads: int,
                   target: ParamStore | None = None, need_grads: bool = True):
    """DQN loss plus alpha times the MARA penalty, averaged over agents and batch."""
    out = forward_q(params, cfg.algo, cfg.variant, batch.o_alone, batch.tokens, batch.mask,
                    num_heads, target=target, want_trace=need_grads)
    K, B = batch.actions.shape
    a = batch.actions[..., None]
    q_taken = np.take_along_axis(out.q, a, axis=-1)[..., 0]
    g_q = np.zeros_like(out.q)
    if cfg.mixer == "additive":
        err = y - q_taken.sum(axis=0)
        dqn = float(np.mean(err.astype(np.float64) ** 2))
        g_taken = np.broadcast_to(-2.0 * err / B, (K, B))
    else:
        err = y - q_taken
        dqn = float(np.mean(err.astype(np.float64) ** 2))
        g_taken = -2.0 * err / (K * B)
    np.put_along_axis(g_q, a, g_taken[..., None].astype(g_q.dtype), axis=-1)

    mara = 0.0
    g_mara = None
    qc_alone = out.qc_alone
    if cfg.uses_mara:
        if cfg.mara_actions == "sampled":
            sel = np.take_along_axis(qc_alone, a, axis=-1)[..., 0]
            mara = float(np.mean(sel.astype(np.float64) ** 2))
            g_mara = np.zeros_like(qc_alone)
            np.put_along_axis(g_mara, a, (2.0 * cfg.alpha * sel / (K * B))[..., None]
                              .astype(g_mara.dtype), axis=-1)
        else:
            mara = float(np.mean(qc_alone.astype(np.float64) ** 2))
            g_mara = (2.0 * cfg.alpha / qc_alone.size) * qc_alone
        if cfg.alpha == 0:
            g_mara = None
    total = dqn + cfg.alpha * mara if cfg.uses_mara else dqn
    if not np.isfinite(total):
        raise TrainingDiverged(f"non-finite loss: dqn={dqn} mara={mara}")
    parts = LossParts(
        dqn, mara, total,
        float(np.mean(np.abs(out.q_alone))),
        float(np.mean(np.abs(qc_alone))) if qc_alone is not None else 0.0,
    )
    if not need_grads:
        return parts, None
    return parts, backward_q(params, cfg.algo, cfg.variant, out, g_q, g_mara)


# -- optimisation -----------------------------------------------------------

@dataclass
class LearnerState:
    params: ParamStore
    target: ParamStore
    sq: ParamStore  # RMSProp running mean of squared gradients
    step: int = 0


@dataclass
class AgentNets:
    """Stacked per-agent parameters plus what a policy needs to evaluate them."""

    params: ParamStore
    target: ParamStore
    algo: str = "collaq"
    variant: str = "soft_target"
    num_heads: int = 2

    @property
    def num_agents(self) -> int:
        return int(self.params[next(iter(self.params))].shape[0])

    @property
    def dtype(self):
        return self.params[next(iter(self.params))].dtype

    def check_layout(self, o_alone_dim: int, token_dim: int) -> None:
        """Raise DimensionError when an environment's observations do not fit the nets."""
        if self.algo == "iql":
            want, got = o_alone_dim + 2 * token_dim, self.params["alone/W0"].shape[1]
            if want != got:
                raise DimensionError(f"iql input is {got} wide, observation gives {want}")
            return
        for name, want in (("cenc/W0", o_alone_dim), ("tenc/W0", token_dim)):
            got = self.params[name].shape[1]
            if got != want:
                raise DimensionError(f"{name} expects {got} inputs, observation gives {want}")

    def q(self, o_alone, tokens, mask) -> "QOutput":
        tgt = self.target if self.variant == "soft_target" else None
        return forward_q(self.params, self.algo, self.variant, o_alone, tokens, mask,
                         self.num_heads, target=tgt)

    def resize(self, K: int) -> "AgentNets":
        """Keep the first ``K`` agents; extra agents clone the last trained agent."""
        if K < 1:
            raise ConfigError("team size must be >= 1")
        idx = [min(i, self.num_agents - 1) for i in range(K)]
        take = lambda store: ParamStore((k, v[idx].copy()) for k, v in store.items())
        return AgentNets(take(self.params), take(self.target), self.algo, self.variant,
                         self.num_heads)

    @classmethod
    def from_learner(cls, learner: "LearnerState", cfg: TrainConfig, num_heads: int) -> "AgentNets":
        return cls(learner.params, learner.target, cfg.algo, cfg.variant, num_heads)


def new_learner(spec: NetworkSpec, cfg: TrainConfig, K: int, rng) -> LearnerState:
    params = init_params(spec, rng, cfg.algo, num_agents=K)
    return LearnerState(params, params.copy(), params.zeros_like(), 0)


def rmsprop_update(state: LearnerState, grads: ParamStore, cfg: TrainConfig) -> None:
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {k}")
    for k, g in grads.items():
        sq = state.sq[k]
        sq *= cfg.rms_decay
        sq += (1.0 - cfg.rms_decay) * g * g
        state.params[k] -= (cfg.lr * g / (np.sqrt(sq) + cfg.rms_eps)).astype(g.dtype)


def train_step(state: LearnerState, batch: Batch, cfg: TrainConfig, num_heads: int,
               global_step: int) -> LossParts:
    """One RMSProp step on the total loss; refresh the target on period boundaries."""
    y = td_target(batch, state.target, cfg, num_heads)
    parts, grads = loss_and_grads(state.params, batch, y, cfg, num_heads, target=state.target)
    rmsprop_update(state, grads, cfg)
    state.step += 1
    if global_step % cfg.target_update_period == 0:
        state.target = state.params.copy()
    return parts


def act(params: ParamStore, cfg: TrainConfig, num_heads: int, o_alone, tokens, mask,
        eps: float, rng: np.random.Generator, target: ParamStore | None = None) -> np.ndarray:
    """Epsilon-greedy joint action for stacked params; inputs (K, D), (K, N, td), (K, N)."""
    K = o_alone.shape[0]
    dt = params[next(iter(params))].dtype
    explore = rng.random(K) < eps
    random_actions = rng.integers(0, 5, size=K)
    if explore.all():
        return random_actions
    out = forward_q(params, cfg.algo, cfg.variant, o_alone[:, None].astype(dt),
                    tokens[:, None].astype(dt), mask[:, None], num_heads, target=target)
    greedy = np.argmax(out.q[:, 0], axis=-1)
    return np.where(explore, random_actions, greedy)


# -- replay -----------------------------------------------------------------

class ReplayBuffer:
    """Ring buffer stored agent-first; uniform sampling with replacement."""

    def __init__(self, capacity: int, K: int, o_dim: int, n_tokens: int, tok_dim: int,
                 dtype=np.float32):
        self.capacity, self.size, self.pos = capacity, 0, 0
        self.o = np.zeros((K, capacity, o_dim), dtype)
        self.t = np.zeros((K, capacity, n_tokens, tok_dim), dtype)
        self.o2 = np.zeros_like(self.o)
        self.t2 = np.zeros_like(self.t)
        self.a = np.zeros((K, capacity), np.int64)
        self.r = np.zeros(capacity, dtype)
        self.d = np.zeros(capacity, bool)
        self.mask = np.ones((K, 1, n_tokens), bool)

    def push(self, o, t, a, r, o2, t2, done) -> None:
        i = self.pos
        self.o[:, i], self.t[:, i], self.a[:, i] = o, t, a
        self.o2[:, i], self.t2[:, i] = o2, t2
        self.r[i], self.d[i] = r, done
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = rng.integers(0, self.size, size=batch_size)
        mask = np.broadcast_to(self.mask, (self.o.shape[0], batch_size, self.t.shape[2]))
        return Batch(self.o[:, idx], self.t[:, idx], mask, self.a[:, idx], self.r[idx],
                     self.o2[:, idx], self.t2[:, idx], mask, self.d[idx])


# -- training loop -------------------------------------------------------------

METRIC_COLUMNS = ("step", "episode", "epsilon", "loss_dqn", "loss_mara", "mean_abs_q_alone",
                  "mean_abs_q_collab_at_alone", "train_return_window", "eval_return")


@dataclass
class TrainResult:
    learner: LearnerState
    rows: list
    episode_tables: list  # reward tables seen in training, in order
    num_heads: int


def greedy_policy(params, cfg, num_heads, target=None):
    def policy(o_alone, tokens, mask):
        out = forward_q(params, cfg.algo, cfg.variant, o_alone[:, None], tokens[:, None],
                        mask[:, None], num_heads, target=target)
        return np.argmax(out.q[:, 0], axis=-1)
    return policy


def rollout_return(env_cfg: gw.EnvConfig, policy, rng: np.random.Generator,
                   dtype=np.float32) -> float:
    state = gw.reset(env_cfg, rng)
    total = 0.0
    while not state.done:
        o, t = gw.observe_all(env_cfg, state)
        mask = np.ones(t.shape[:-1], dtype=bool)
        actions = policy(o.astype(dtype), t.astype(dtype), mask)
        state, r, _, _ = gw.step(env_cfg, state, actions)
        total += r
    return total


def run_training(env_cfg: gw.EnvConfig, cfg: TrainConfig, spec: NetworkSpec, seed: int,
                 on_row=None) -> TrainResult:
    """Episodic DQN loop; deterministic per seed.

    ``on_row`` is called with each metrics row (a dict keyed by METRIC_COLUMNS).
    """
    env_rng = rng_stream(seed, "env")
    explore_rng = rng_stream(seed, "explore")
    replay_rng = rng_stream(seed, "replay")
    learner = new_learner(spec, cfg, env_cfg.num_agents, rng_stream(seed, "init"))
    H = spec.num_heads
    K = env_cfg.num_agents
    dt = spec.dtype
    buf = ReplayBuffer(cfg.buffer_capacity, K, env_cfg.o_alone_dim, K - 1, env_cfg.token_dim, dt)
    mask = np.ones((K, K - 1), dtype=bool)

    rows = []
    window = {"dqn": [], "mara": [], "qa": [], "qc": []}
    returns = deque(maxlen=100)
    tables = []
    episode = 0
    eval_value = 0.0
    ep_return = 0.0
    state = gw.reset(env_cfg, env_rng)
    tables.append(state.rho.copy())
    o, t = gw.observe_all(env_cfg, state)

    def emit(step_idx):
        nonlocal eval_value
        if step_idx > 0 and (step_idx % cfg.eval_every == 0 or step_idx == cfg.total_steps):
            eval_value = evaluate_return(learner, env_cfg, cfg, H, seed, step_idx)
        row = {
            "step": step_idx,
            "episode": episode,
            "epsilon": epsilon(step_idx, cfg.epsilon),
            "loss_dqn": float(np.mean(window["dqn"])) if window["dqn"] else 0.0,
            "loss_mara": float(np.mean(window["mara"])) if window["mara"] else 0.0,
            "mean_abs_q_alone": float(np.mean(window["qa"])) if window["qa"] else 0.0,
            "mean_abs_q_collab_at_alone": float(np.mean(window["qc"])) if window["qc"] else 0.0,
            "train_return_window": float(np.mean(returns)) if returns else 0.0,
            "eval_return": eval_value,
        }
        for v in window.values():
            v.clear()
        rows.append(row)
        if on_row is not None:
            on_row(row)

    for step_idx in range(cfg.total_steps):
        if step_idx % cfg.metrics_every == 0:
            emit(step_idx)
        eps = epsilon(step_idx, cfg.epsilon)
        target = learner.target if cfg.variant == "soft_target" else None
        actions = act(learner.params, cfg, H, o, t, mask, eps, explore_rng, target)
        state, r, done, _ = gw.step(env_cfg, state, actions)
        o2, t2 = gw.observe_all(env_cfg, state)
        buf.push(o, t, actions, r, o2, t2, done)
        ep_return += r
        if done:
            returns.append(ep_return)
            ep_return = 0.0
            episode += 1
            state = gw.reset(env_cfg, env_rng)
            tables.append(state.rho.copy())
            o, t = gw.observe_all(env_cfg, state)
        else:
            o, t = o2, t2
        global_step = step_idx + 1
        if buf.size >= max(cfg.learn_start, 1):
            batch = buf.sample(cfg.batch_size, replay_rng)
            try:
                parts = train_step(learner, batch, cfg, H, global_step)
            except TrainingDiverged as e:
                # parameters are untouched by the failed step: hand back the last good state
                e.learner, e.step = learner, global_step
                raise
            window["dqn"].append(parts.dqn)
            window["mara"].append(parts.mara)
            window["qa"].append(parts.mean_abs_q_alone)
            window["qc"].append(parts.mean_abs_q_collab_at_alone)
        elif global_step % cfg.target_update_period == 0:
            learner.target = learner.params.copy()
    emit(cfg.total_steps)
    return TrainResult(learner, rows, tables, H)


def evaluate_return(learner, env_cfg, cfg, num_heads, seed, step_idx) -> float:
    """Mean greedy return on the training distribution; its own RNG stream."""
    if cfg.eval_episodes == 0:
        return 0.0
    rng = rng_stream(seed, "eval", step_idx)
    target = learner.target if cfg.variant == "soft_target" else None
    policy = greedy_policy(learner.params, cfg, num_heads, target)
    vals = [rollout_return(env_cfg, policy, rng, learner.params[next(iter(learner.params))].dtype)
            for _ in range(cfg.eval_episodes)]
    return float(np.mean(vals))


def train_config_to_json(cfg: TrainConfig) -> dict:
    return asdict(cfg)
