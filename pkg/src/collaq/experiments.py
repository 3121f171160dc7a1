"""Training runs on disk and scenario evaluation.

A run directory holds ``config.json``, ``metrics.csv``, ``checkpoint.clq``,
``tables.json`` (reward tables seen in training) and, once finished,
``run.json`` recording the config hash. :func:`ensure_run` reuses a finished
run whose hash matches instead of training again.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import adhoc
from .config import (
    ExperimentConfig, SCENARIO_RE, config_from_dict, config_hash, load_config, save_config,
)
from .gridworld import is_reversed_family
from .learner import AgentNets, TrainingDiverged, run_training
from .mdp import ConfigError
from .storage import append_metrics, read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)

CONFIG, METRICS, CHECKPOINT, TABLES, DONE = (
    "config.json", "metrics.csv", "checkpoint.clq", "tables.json", "run.json")


def table_summary(tables, ladder) -> dict:
    """Distinct reward tables in first-seen order with counts."""
    seen: dict[tuple, int] = {}
    rows = {}
    for rho in tables:
        key = tuple(np.asarray(rho).ravel().tolist())
        if key not in seen:
            seen[key] = 0
            rows[key] = np.asarray(rho).tolist()
        seen[key] += 1
    return {
        "episodes": len(tables),
        "reversed_count": sum(bool(is_reversed_family(t, ladder)) for t in tables),
        "distinct": [{"rho": rows[k], "count": c} for k, c in seen.items()],
    }


def train_run(cfg: ExperimentConfig, out_dir) -> Path:
    """Train from scratch into ``out_dir``; earlier outputs there are replaced."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in (METRICS, CHECKPOINT, TABLES, DONE):
        (out / name).unlink(missing_ok=True)
    save_config(cfg, out / CONFIG)
    h = config_hash(cfg)
    try:
        res = run_training(cfg.env, cfg.train, cfg.net, cfg.seed,
                           on_row=lambda row: append_metrics(row, out / METRICS))
    except TrainingDiverged as e:
        learner = getattr(e, "learner", None)
        if learner is not None:
            write_checkpoint(learner.params, learner.target, h, out / "checkpoint_last_good.clq")
        raise
    write_checkpoint(res.learner.params, res.learner.target, h, out / CHECKPOINT)
    (out / TABLES).write_text(json.dumps(table_summary(res.episode_tables, cfg.env.ladder)) + "\n")
    (out / DONE).write_text(json.dumps({"config_hash": h.hex()}) + "\n")
    return out


def is_finished(cfg: ExperimentConfig, out_dir) -> bool:
    done = Path(out_dir) / DONE
    if not done.exists():
        return False
    return json.loads(done.read_text()).get("config_hash") == config_hash(cfg).hex()


def ensure_run(cfg: ExperimentConfig, out_dir) -> Path:
    if is_finished(cfg, out_dir):
        return Path(out_dir)
    log.info("training %s (seed %d) into %s", cfg.train.algo, cfg.seed, out_dir)
    return train_run(cfg, out_dir)


def nets_from_checkpoint(path, cfg: ExperimentConfig, force: bool = False) -> AgentNets:
    ck = read_checkpoint(path, config_hash(cfg), force)
    return AgentNets(ck.params, ck.target, cfg.train.algo, cfg.train.variant, cfg.net.num_heads)


def load_run(out_dir) -> tuple[ExperimentConfig, AgentNets]:
    out = Path(out_dir)
    cfg = load_config(out / CONFIG)
    return cfg, nets_from_checkpoint(out / CHECKPOINT, cfg)


def evaluate_scenario(nets: AgentNets, cfg: ExperimentConfig, scenario: str,
                      episodes: int | None = None, seed: int | None = None) -> adhoc.EvalReport:
    m = SCENARIO_RE.match(scenario)
    if not m:
        raise ConfigError(f"unknown scenario {scenario!r}")
    n = cfg.eval.episodes if episodes is None else episodes
    s = cfg.seed if seed is None else seed
    if scenario == "standard":
        return adhoc.evaluate(nets, cfg.env, n, s)
    if scenario == "adhoc_reversed":
        return adhoc.adhoc_reversed_test(nets, cfg.env, n, s)
    return adhoc.adhoc_team_size_test(nets, cfg.env, int(m.group(2)), n, s)


def cached_evaluation(out_dir, nets: AgentNets, cfg: ExperimentConfig, scenario: str,
                      episodes: int, seed: int) -> adhoc.EvalReport:
    """Evaluate once per (scenario, episodes, seed) and keep the report in the run dir."""
    path = Path(out_dir) / "evals" / f"{scenario.replace(':', '_')}_{episodes}_{seed}.json"
    h = config_hash(cfg).hex()
    if path.exists():
        saved = json.loads(path.read_text())
        if saved.get("config_hash") == h:
            rep = saved["report"]
            return adhoc.EvalReport(rep["scenario"], rep["episodes"], rep["mean_return"],
                                    rep["std_err"], rep["returns"], rep["seed"])
    rep = evaluate_scenario(nets, cfg, scenario, episodes, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"config_hash": h, "report": rep.to_json()}) + "\n")
    return rep


def mara_decay_ratio(rows, column: str = "mean_abs_q_collab_at_alone",
                     window: float = 0.1) -> tuple[float, float, float]:
    """``(final-window mean / peak, peak, final-window mean)`` of a metrics column.

    The final window holds the rows whose step lies in the last ``window``
    fraction of training.
    """
    total = rows[-1]["step"]
    values = [r[column] for r in rows]
    peak = max(values)
    final = [r[column] for r in rows if r["step"] > (1.0 - window) * total]
    mean_final = float(np.mean(final))
    return (mean_final / peak if peak > 0 else float("nan")), float(peak), mean_final


def relative_degradation(base: float, other: float) -> float:
    """Fractional return lost when moving from ``base`` to ``other``."""
    if base <= 0:
        return float("nan")
    return (base - other) / base


def experiment_config(base: dict, algo: str, seed: int, alpha: float | None = None
                      ) -> ExperimentConfig:
    data = json.loads(json.dumps(base))
    train = data.setdefault("train", {})
    train["algo"] = algo
    if alpha is not None:
        train["alpha"] = alpha
    data["seed"] = seed
    return config_from_dict(data)


def acceptance_runs(base: dict, seeds=range(5)) -> dict:
    """Run name -> config for the learning criteria: CollaQ and IQL per seed, alpha=0 once."""
    runs = {}
    for s in seeds:
        runs[f"collaq_s{s}"] = experiment_config(base, "collaq", s)
        runs[f"iql_s{s}"] = experiment_config(base, "iql", s)
    runs["collaq_alpha0_s0"] = experiment_config(base, "collaq", 0, alpha=0.0)
    return runs
