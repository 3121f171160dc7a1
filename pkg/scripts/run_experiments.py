"""Train and evaluate the gridworld runs behind the learning criteria.

Usage: python scripts/run_experiments.py [--base configs/gridworld.json]
       [--results results] [--only NAME ...] [--episodes 200] [--no-eval]

Finished runs are reused (matched by config hash), so the script can be
interrupted and restarted. The summary goes to <results>/summary.json.
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from collaq.experiments import (
    CHECKPOINT, METRICS, acceptance_runs, cached_evaluation, ensure_run, mara_decay_ratio,
    nets_from_checkpoint, relative_degradation,
)
from collaq.storage import read_metrics

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ("standard", "adhoc_reversed", "team_size:2", "team_size:4")


def summarize_run(name, cfg, out, episodes):
    rows = read_metrics(out / METRICS)
    ratio, peak, final = mara_decay_ratio(rows)
    nets = nets_from_checkpoint(out / CHECKPOINT, cfg)
    evals = {s: cached_evaluation(out, nets, cfg, s, episodes, cfg.seed) for s in SCENARIOS}
    base = evals["standard"].mean_return
    return {
        "name": name,
        "algo": cfg.train.algo,
        "alpha": cfg.train.alpha,
        "seed": cfg.seed,
        "final_train_return_window": rows[-1]["train_return_window"],
        "mara_peak": peak,
        "mara_final_window": final,
        "mara_ratio": ratio,
        "returns": {s: {"mean": r.mean_return, "std_err": r.std_err} for s, r in evals.items()},
        "degradation": {s: relative_degradation(base, evals[s].mean_return)
                        for s in ("team_size:2", "team_size:4")},
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--base", default=str(ROOT / "configs" / "gridworld.json"))
    ap.add_argument("--results", default=str(ROOT / "results"))
    ap.add_argument("--only", nargs="*")
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--no-eval", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = json.loads(Path(args.base).read_text())
    runs = acceptance_runs(base)
    if args.only:
        runs = {k: v for k, v in runs.items() if k in args.only}
    results = Path(args.results)
    summary = []
    for name, cfg in runs.items():
        t0 = time.time()
        out = ensure_run(cfg, results / name)
        logging.info("%s ready (%.0f s)", name, time.time() - t0)
        if not args.no_eval:
            summary.append(summarize_run(name, cfg, out, args.episodes))
            logging.info("%s: %s", name, json.dumps(summary[-1]["returns"]))
    if summary:
        (results / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        for algo in ("collaq", "iql"):
            rev = [s["returns"]["adhoc_reversed"]["mean"] for s in summary
                   if s["algo"] == algo and s["alpha"] > 0]
            if rev:
                logging.info("%s reversed-ranking mean over seeds %.3f", algo, np.mean(rev))


if __name__ == "__main__":
    main()
