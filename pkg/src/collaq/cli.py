"""Command-line entry point: ``collaq <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 a property check failed.
When ``COLLAQ_OUT_DIR`` is set it replaces ``--out``, and relative checkpoint
and scene paths are resolved against it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checks
from .adhoc import policy_map_export
from .assignment import AssignmentInstance, RewardSiteSet, Site, theorem1_gap_check
from .config import config_from_dict, load_config
from .experiments import CONFIG, evaluate_scenario, nets_from_checkpoint, train_run
from .gridworld import EnvState
from .learner import TrainingDiverged
from .mdp import ACTION_DELTAS, ConfigError, DimensionError, build_grid_mdp, unroll_horizon
from .storage import CheckpointError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
ACTION_NAMES = {"up": 0, "down": 1, "left": 2, "right": 3, "stay": 4}
GRADCHECK_TOL = 1e-6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _out_dir(arg: str | None, default: str) -> Path:
    env = os.environ.get("COLLAQ_OUT_DIR")
    return Path(env) if env else Path(arg or default)


def _resolve(path: str) -> Path:
    p = Path(path)
    env = os.environ.get("COLLAQ_OUT_DIR")
    if env and not p.is_absolute():
        return Path(env) / p
    return p


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_train(args) -> int:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = config_from_dict(data)
    out = _out_dir(args.out, cfg.out_dir)
    cfg.out_dir = str(out)
    train_run(cfg, out)
    print(f"trained {cfg.train.algo} seed {cfg.seed} -> {out}")
    return EXIT_OK


def _config_for_checkpoint(ckpt: Path, config_arg: str | None):
    path = Path(config_arg) if config_arg else ckpt.parent / CONFIG
    if not path.exists():
        raise ConfigError(f"no config found at {path}; pass --config")
    return load_config(path)


def cmd_eval(args) -> int:
    ckpt = _resolve(args.checkpoint)
    cfg = _config_for_checkpoint(ckpt, args.config)
    nets = nets_from_checkpoint(ckpt, cfg, force=args.force)
    report = evaluate_scenario(nets, cfg, args.scenario, args.episodes, args.seed)
    _emit(report.to_json())
    return EXIT_OK


def _action(a) -> int:
    if isinstance(a, str):
        if a not in ACTION_NAMES:
            raise ConfigError(f"unknown action {a!r}")
        return ACTION_NAMES[a]
    if not 0 <= int(a) < len(ACTION_DELTAS):
        raise ConfigError(f"action {a} out of range")
    return int(a)


def oracle_instance(d: dict) -> AssignmentInstance:
    """Build an assignment instance on a time-indexed grid from an oracle JSON config.

    Keys: width, height, horizon, gamma, agents [[x, y], ...], sites
    [{cell, step, action, budget}], optional local_agents, C, weights.
    """
    known = {"width", "height", "horizon", "gamma", "agents", "sites", "local_agents", "C",
             "weights", "local_sites"}
    for k in d:
        if k not in known:
            raise ConfigError(f"/{k}: unknown key")
    try:
        w, h, H = int(d["width"]), int(d["height"]), int(d["horizon"])
        gamma = float(d.get("gamma", 0.9))
        agents = d["agents"]
        raw_sites = d["sites"]
    except KeyError as e:
        raise ConfigError(f"/{e.args[0]}: required") from e
    mdp = unroll_horizon(build_grid_mdp(w, h, gamma, H))
    n = w * h

    def cell(xy, where):
        x, y = (int(v) for v in xy)
        if not (0 <= x < w and 0 <= y < h):
            raise ConfigError(f"{where}: cell {xy} is off the grid")
        return y * w + x

    states = [cell(a, f"/agents/{i}") for i, a in enumerate(agents)]
    sites = []
    for m, s in enumerate(raw_sites):
        step = int(s.get("step", 0))
        if not 0 <= step < H:
            raise ConfigError(f"/sites/{m}/step: must lie in [0, {H})")
        sites.append(Site(step * n + cell(s["cell"], f"/sites/{m}/cell"),
                          _action(s.get("action", "stay")), float(s["budget"])))
    K = len(states)
    local = frozenset(d.get("local_agents", range(K)))
    weights = d.get("weights")
    return AssignmentInstance(
        [mdp] * K, states, RewardSiteSet(tuple(sites)), local, int(d.get("C", H)),
        w=None if weights is None else np.asarray(weights, dtype=np.float64),
        local_sites=None if d.get("local_sites") is None else frozenset(d["local_sites"]),
    )


def cmd_oracle(args) -> int:
    report = theorem1_gap_check(oracle_instance(json.loads(Path(args.config).read_text())))
    _emit(report.to_json())
    return EXIT_OK if report.holds else EXIT_CHECK


def cmd_lemmas(args) -> int:
    """Sweep i pairs one random bound instance with one random max-lemma triple."""
    n = args.sweeps
    bound = checks.lemma_bound_sweep(n, seed=args.seed)
    maxes = checks.lemma_max_sweep(n, seed=args.seed)
    print(f"max lemma: {sum(maxes)}/{n} hold")
    print(f"bound lemma: {sum(r.holds for r in bound)}/{n} hold")
    held = sum(r.holds and m for r, m in zip(bound, maxes))
    print(f"{held}/{n} hold")
    return EXIT_OK if held == n else EXIT_CHECK


def cmd_gradcheck(args) -> int:
    errs = checks.gradcheck_sweep(args.specs, seed=args.seed)
    for i, e in enumerate(errs):
        print(f"spec {i}: max relative error {e:.3e}")
    ok = sum(e <= GRADCHECK_TOL for e in errs)
    print(f"{ok}/{len(errs)} within {GRADCHECK_TOL:g}")
    return EXIT_OK if ok == len(errs) else EXIT_CHECK


def scene_state(scene: dict, env) -> EnvState:
    """Parse a scene (an ``EnvState`` JSON) and check it fits the environment."""
    try:
        state = EnvState.from_json(scene.get("state", scene))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"/state: malformed scene ({e!r})") from e
    K, M = state.agent_positions.shape[0], state.site_cells.shape[0]
    if K < 1:
        raise ConfigError("/state/agent_positions: need at least one agent")
    if M != env.num_sites:
        raise ConfigError(f"/state/sites: {M} sites, environment has {env.num_sites}")
    cells = np.concatenate([state.agent_positions, state.site_cells])
    if np.any(cells < 0) or np.any(cells >= (env.width, env.height)):
        raise ConfigError("/state: a cell lies off the grid")
    if np.any((state.site_types < 0) | (state.site_types >= env.resource_types)):
        raise ConfigError("/state/sites: resource type out of range")
    if state.rho.shape != (env.resource_types, K):
        raise ConfigError(f"/state/rho: expected shape {(env.resource_types, K)}, "
                          f"got {state.rho.shape}")
    return state


def cmd_viz(args) -> int:
    ckpt = _resolve(args.checkpoint)
    cfg = _config_for_checkpoint(ckpt, args.config)
    nets = nets_from_checkpoint(ckpt, cfg, force=args.force)
    scene = json.loads(_resolve(args.scene).read_text())
    agent = int(scene.get("agent", args.agent))
    state = scene_state(scene, cfg.env)
    _emit(policy_map_export(nets, cfg.env, state, agent).to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="collaq", description="CollaQ workbench")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scenario", default="standard")
    e.add_argument("--config")
    e.add_argument("--episodes", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle", help="exact assignment and locality bound")
    o.add_argument("--config", required=True)
    o.set_defaults(func=cmd_oracle)

    lm = sub.add_parser("lemmas", help="random lemma sweeps")
    lm.add_argument("--sweeps", type=int, default=200)
    lm.add_argument("--seed", type=int, default=0)
    lm.set_defaults(func=cmd_lemmas)

    g = sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    g.add_argument("--specs", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("viz", help="export Q_alone vs Q policy maps")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--scene", required=True)
    v.add_argument("--config")
    v.add_argument("--agent", type=int, default=0)
    v.add_argument("--force", action="store_true")
    v.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        print(parser.format_help(), file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if args.command is None:
        print(parser.format_help(), file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, DimensionError, CheckpointError, TrainingDiverged, OSError,
            json.JSONDecodeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
