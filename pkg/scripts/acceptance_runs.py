"""Long-running acceptance runs: imitation over three seeds, coverage of the
shifted prior, the strike KL-weight comparison and the self-play league.

Each stage merges its numbers into a JSON file that tests/test_acceptance.py
reads.  Stages share one run directory produced through the command-line
pipeline, so the checkpoints are the same ones a user would get.

    python3 scripts/acceptance_runs.py                      # everything
    python3 scripts/acceptance_runs.py --stages strike      # one stage
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from catprior import checkpoint as ck
from catprior.cli import Run, main as cli_main
from catprior.config import load_config
from catprior.evaluate import read_csv
from catprior.imitation import evaluate_tracking, train_imitation
from catprior.upper import play_matches, train_task

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)
DEFAULT_CONFIG = os.path.join(ROOT, "configs", "acceptance.cfg")
DEFAULT_OUT = os.path.join(ROOT, "acceptance", "results.json")
STAGES = ("pipeline", "imitation", "coverage", "strike", "compete")
SEEDS = (0, 1, 2)


def cli(command: str, args) -> None:
    code = cli_main([command, "--config", args.config, "--run-dir", args.run_dir])
    if code != 0:
        raise SystemExit(f"`catprior {command}` failed with exit code {code}")


def stage_pipeline(args, run: Run) -> dict:
    """Data, imitation (master seed), distillation and shifting through the CLI."""
    t = time.time()
    for cmd in ("gen-data", "train-imitate", "distill-prior", "shift-prior"):
        cli(cmd, args)
    return {"seconds": time.time() - t}


def stage_imitation(args, run: Run) -> dict:
    """Tracking after the full step budget for three seeds, plus the sampler priority check."""
    ds = run.dataset()
    out = {"seeds": {}, "sampler_rows": 0, "sampler_violations": 0}
    for seed in SEEDS:
        t = time.time()
        if seed == run.cfg["seed"]:
            policy = run.policy()
            steps = ck.load(run.require("imitation.ckpt"), ["head"]).meta["steps"]
            cols, rows = read_csv(run.require("sampler.csv"))
        else:
            r = run.derive(seed=seed)
            res = train_imitation(ds, r.imitation_config(), r.cfg.rng("policy"), r.cfg.rng("sim"))
            policy, steps = res.policy, res.steps
            cols, rows = res.sampler_log.columns, res.sampler_log.rows
        w, m = cols.index("is_worst"), cols.index("is_max_p")
        out["sampler_rows"] += len(rows)
        out["sampler_violations"] += sum(1 for row in rows if int(row[w]) and not int(row[m]))
        per_clip = evaluate_tracking(policy, ds, starts_per_clip=4)
        out["seeds"][str(seed)] = {"per_clip": [float(x) for x in per_clip], "mean": float(per_clip.mean()),
                                   "steps": int(steps), "seconds": time.time() - t}
        print(f"imitation seed {seed}: {per_clip.round(3)} mean {per_clip.mean():.3f}", flush=True)
    out["mean"] = float(np.mean([s["mean"] for s in out["seeds"].values()]))
    return out


def stage_coverage(args, run: Run) -> dict:
    t = time.time()
    cli("evaluate", args)
    cols, rows = read_csv(run.path("score_summary.csv"))
    row = dict(zip(cols, rows[0]))
    return {"pool_size": int(row["pool_size"]), "ratio": float(row["ratio"]), "seconds": time.time() - t}


def tail_mean(values, frac: float = 0.1) -> float:
    """Mean of the finite entries among the last ``frac`` of ``values`` (NaN when there are none)."""
    v = np.asarray(values, dtype=np.float64)
    v = v[-max(1, int(len(v) * frac)):]
    v = v[np.isfinite(v)]
    return float(v.mean()) if len(v) else float("nan")


def stage_strike(args, run: Run) -> dict:
    """Final reward (last 10% of updates) and run-mean KL to the prior for each KL weight and seed."""
    ds = run.dataset()
    policy = run.policy(decoder_only=True)
    prior = run.prior("prior_shifted.ckpt")
    out = {}
    for alpha in (0.0, 0.05):
        runs = {}
        for seed in SEEDS:
            t = time.time()
            r = run.derive(seed=seed, task__alpha_kl=alpha)
            res = train_task(policy, prior, ds, r.upper_config("strike"), r.cfg.rng("policy"), r.cfg.rng("sim"))
            cols = res.log.columns
            rows = res.log.rows
            reward = [row[cols.index("reward_mean")] for row in rows]
            kl = [row[cols.index("kl")] for row in rows]
            success = [row[cols.index("success_rate")] for row in rows]
            runs[str(seed)] = {"final_reward": tail_mean(reward), "mean_kl": float(np.mean(kl)),
                               "final_success": tail_mean(success),
                               "steps": res.steps, "seconds": time.time() - t}
            print(f"strike alpha_kl={alpha} seed {seed}: {runs[str(seed)]}", flush=True)
        out[f"alpha_{alpha}"] = {
            "runs": runs,
            "final_reward": float(np.mean([r["final_reward"] for r in runs.values()])),
            "mean_kl": float(np.mean([r["mean_kl"] for r in runs.values()])),
        }
    return out


def stage_compete(args, run: Run) -> dict:
    """League run, final-vs-first matches, and the round-robin Elo quartile comparison."""
    t = time.time()
    cli("train-compete", args)
    ds = run.dataset()
    policy = run.policy(decoder_only=True)
    bundle = run.load("compete.ckpt")
    league = ck.league_from(bundle)
    final = ck.paramset_from(bundle.components["policy"])
    cfg = run.upper_config("compete").compete
    n = run.cfg["tournament.matches"]
    w, d, l = play_matches(policy, ds, final, league.pool[0], n, run.cfg.rng("eval"), cfg, hold=run.cfg["latent.hold"])
    t_league = time.time() - t
    t = time.time()
    cli("tournament", args)
    cols, rows = read_csv(run.path("elo.csv"))
    elo = np.array([float(r[cols.index("elo")]) for r in rows])
    q = max(1, len(elo) // 4)
    return {
        "pool_size": len(league), "matches": n, "wins": w, "draws": d, "losses": l,
        "win_rate": (w + 0.5 * d) / n, "elo": elo.tolist(),
        "first_quartile_mean": float(elo[:q].mean()), "last_quartile_mean": float(elo[-q:].mean()),
        "league_seconds": t_league, "tournament_seconds": time.time() - t,
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=DEFAULT_CONFIG)
    p.add_argument("--run-dir", default=os.path.join(ROOT, "acceptance", "runs"))
    p.add_argument("--out", default=DEFAULT_OUT)
    p.add_argument("--stages", default=",".join(STAGES), help=f"comma-separated subset of {', '.join(STAGES)}")
    args = p.parse_args(argv)
    stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    unknown = set(stages) - set(STAGES)
    if unknown:
        p.error(f"unknown stages: {', '.join(sorted(unknown))}")
    results = {}
    if os.path.exists(args.out):
        with open(args.out) as fh:
            results = json.load(fh)
    run = Run(load_config(args.config), args.run_dir)
    handlers = {"pipeline": stage_pipeline, "imitation": stage_imitation, "coverage": stage_coverage,
                "strike": stage_strike, "compete": stage_compete}
    for s in stages:
        print(f"== {s}", flush=True)
        results[s] = handlers[s](args, run)
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
