"""Command-line pipeline: every stage reads its upstream checkpoints from a
run directory, trains or evaluates, and writes checkpoints and CSV tables
back into it.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import copy
import logging
import os
import sys

import numpy as np

from catprior import checkpoint as ck
from catprior import evaluate as ev
from catprior.config import RunConfig, load_config, run_root
from catprior.errors import CatPriorError, DataError, UsageError
from catprior.imitation import EpisodeConfig, ImitationConfig, ImitationLossConfig, evaluate_tracking, train_imitation
from catprior.motion import MotionDataset, default_clips, load_clip, load_manifest, save_clip, save_manifest
from catprior.prior import (
    DecoderEnv, DistillConfig, MatchConfig, PriorNet, ShiftConfig, SimEncoderLabeler, distill_prior, shift_prior,
)
from catprior.rl import PpoConfig
from catprior.sim import load_model
from catprior.upper import (
    CompeteConfig, StrikeConfig, UpperConfig, play_matches, tournament_elo, train_task,
)

log = logging.getLogger("catprior")

COMMANDS = ("gen-data", "train-imitate", "distill-prior", "shift-prior", "train-strike", "train-compete",
            "evaluate", "tournament", "report")

# checkpoint file -> the command that produces it
PRODUCERS = {
    "data/manifest.txt": "gen-data",
    "imitation.ckpt": "train-imitate",
    "prior_distilled.ckpt": "distill-prior",
    "prior_shifted.ckpt": "shift-prior",
    "strike.ckpt": "train-strike",
    "compete.ckpt": "train-compete",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="catprior", description="Discrete latent motion prior pipeline for a planar character.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value config file (with include support)")
    p.add_argument("--run-dir", help="run directory root (default: $CATPRIOR_RUN_DIR or ./runs)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


# ------------------------------------------------------------------ run context
class Run:
    """Paths, config and shared loaders for one run directory."""

    def __init__(self, cfg: RunConfig, root: str):
        self.cfg = cfg
        self.dir = os.path.join(root, cfg["run_name"])
        os.makedirs(self.dir, exist_ok=True)
        self.model = load_model()

    def derive(self, **overrides) -> "Run":
        """Same run directory, config with ``overrides`` (dotted keys written with '__')."""
        other = copy.copy(self)
        other.cfg = self.cfg.with_overrides({k.replace("__", "."): str(v) for k, v in overrides.items()})
        return other

    def structural(self) -> dict:
        return dict(self.cfg.structural(), model=self.model.fingerprint())

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def require(self, name: str) -> str:
        p = self.path(name)
        if not os.path.exists(p):
            raise UsageError(f"missing {name} in {self.dir}; run `catprior {PRODUCERS[name]}` first")
        return p

    def write(self, name: str, text: str) -> None:
        with open(self.path(name), "w", newline="") as fh:
            fh.write(text)

    def dataset(self) -> MotionDataset:
        manifest = self.require("data/manifest.txt")
        base = os.path.dirname(manifest)
        clips = [load_clip(os.path.join(base, p), self.model) for p, _ in load_manifest(manifest)]
        if not clips:
            raise DataError(f"{manifest}: no clips listed")
        return MotionDataset(clips, self.model)

    def load(self, name: str, components=None) -> ck.Bundle:
        b = ck.load(self.require(name), components)
        ck.check_structural(b, self.structural(), PRODUCERS.get(name, name))
        return b

    def policy(self, decoder_only: bool = False):
        comps = ["codebook", "decoder", "head"] if decoder_only else None
        return ck.imitation_from(self.load("imitation.ckpt", comps))

    def prior(self, name: str) -> PriorNet:
        return PriorNet(ck.paramset_from(self.load(name, ["prior"]).components["prior"]))

    def save(self, name: str, kind: str, components: dict, meta: dict | None = None) -> str:
        b = ck.Bundle(kind, components, self.cfg.digest(), self.structural(), meta or {})
        return ck.save(b, self.path(name))

    def ppo(self, lr_key: str) -> PpoConfig:
        c = self.cfg
        return PpoConfig(gamma=c["ppo.gamma"], lam=c["ppo.lam"], clip=c["ppo.clip"], minibatch=c["ppo.minibatch"],
                         epochs=c["ppo.epochs"], horizon=c["ppo.horizon"], lr=c[lr_key],
                         value_coef=c["ppo.value_coef"], max_grad_norm=c["ppo.max_grad_norm"])

    def latent_env(self, policy, dataset):
        c = self.cfg
        return DecoderEnv(policy, dataset, c["latent.n_envs"], hold=c["latent.hold"],
                          episode_length=c["latent.episode_length"])

    def match(self) -> MatchConfig:
        return MatchConfig(threshold=self.cfg["match.threshold"])

    def imitation_config(self) -> ImitationConfig:
        c = self.cfg
        return ImitationConfig(
            k=c["imitation.k"], d=c["imitation.d"], hidden=c["imitation.hidden"], n_envs=c["imitation.n_envs"],
            steps=c["imitation.steps"], alpha=c["imitation.alpha"], normalize_obs=c["imitation.normalize_obs"],
            restart_dead_after=c["imitation.restart_dead_after"],
            loss=ImitationLossConfig(beta=c["imitation.beta"], rl_weight=c["imitation.rl_weight"]),
            ppo=self.ppo("imitation.lr"),
            episode=EpisodeConfig(low_reward=c["imitation.low_reward"],
                                  low_reward_steps=c["imitation.low_reward_steps"]),
        )

    def upper_config(self, task: str) -> UpperConfig:
        c = self.cfg
        return UpperConfig(
            task=task, steps=c["task.steps"], n_envs=c["task.n_envs"], hidden=c["task.hidden"],
            alpha_kl=c["task.alpha_kl"], alpha_h=c["task.alpha_h"], hold=c["latent.hold"],
            pool_interval=c["task.pool_interval"], ppo=self.ppo("task.lr"),
            strike=StrikeConfig(episode_length=c["strike.episode_length"], target_speed=c["strike.target_speed"]),
            compete=CompeteConfig(episode_length=c["compete.episode_length"],
                                  damage_clip=(c["compete.damage_low"], c["compete.damage_high"]),
                                  damage_scale=1.0 / c["compete.damage_high"]),
        )


# ------------------------------------------------------------------ commands
def cmd_gen_data(run: Run) -> None:
    c = run.cfg
    clips = default_clips(seed=c["seed"], skills=c["data.skills"], duration=c["data.duration"])
    os.makedirs(run.path("data"), exist_ok=True)
    entries = []
    for clip in clips:
        name = f"{clip.clip_id}.clip"
        save_clip(clip, run.path(os.path.join("data", name)))
        entries.append((name, clip.skill or "-"))
    save_manifest(entries, run.path("data/manifest.txt"))


def cmd_train_imitate(run: Run) -> None:
    c = run.cfg
    ds = run.dataset()
    res = train_imitation(ds, run.imitation_config(), c.rng("policy"), c.rng("sim"))
    comps = ck.imitation_components(res.policy)
    comps["optimizer"] = ck.adam_component(res.optimizers)
    comps["sampler"] = ck.Component({"rewards": res.sampler.rewards}, {"alpha": res.sampler.alpha})
    run.save("imitation.ckpt", "imitation", comps, {"steps": res.steps})
    run.write("imitation_train.csv", res.log.text())
    run.write("sampler.csv", res.sampler_log.text())
    usage = res.policy.codebook.usage
    run.write("codebook_usage.csv", ev.csv_text(["code", "count"], [[i, int(u)] for i, u in enumerate(usage)]))


def cmd_distill_prior(run: Run) -> None:
    c = run.cfg
    ds = run.dataset()
    policy = run.policy()
    rng = c.rng("policy")
    prior = PriorNet.init(policy.state_dim, policy.K, c["prior.hidden"], rng)
    env = run.latent_env(policy, ds)
    cfg = DistillConfig(iterations=c["distill.iterations"], horizon=c["distill.horizon"], lr=c["distill.lr"])
    prior, dlog, opt = distill_prior(prior, env, SimEncoderLabeler(policy, ds), cfg, rng)
    run.save("prior_distilled.ckpt", "prior", {"prior": ck.paramset_component(prior.params),
                                               "optimizer": ck.adam_component({"prior": opt})})
    run.write("distill.csv", dlog.text())


def cmd_shift_prior(run: Run) -> None:
    c = run.cfg
    prior = run.prior("prior_distilled.ckpt")
    ds = run.dataset()
    policy = run.policy(decoder_only=True)
    cfg = ShiftConfig(steps=c["shift.steps"], n_envs=c["latent.n_envs"], window=c["shift.window"],
                      match=run.match(), ppo=run.ppo("shift.lr"), critic_hidden=c["shift.critic_hidden"])
    rng = c.rng("policy")
    shifted, table, slog = shift_prior(prior, run.latent_env(policy, ds), ds, cfg, rng)
    before = ev.visit_histogram(prior, run.latent_env(policy, ds), ds, c["eval.visit_steps"], c.rng("eval"), run.match())
    after = ev.visit_histogram(shifted, run.latent_env(policy, ds), ds, c["eval.visit_steps"], c.rng("eval"), run.match())
    run.save("prior_shifted.ckpt", "prior", {"prior": ck.paramset_component(shifted.params),
                                             "counts": ck.count_table_component(table)})
    run.write("shift.csv", slog.text())
    run.write("visit_histogram.csv", ev.csv_text(ev.HISTOGRAM_COLUMNS, ev.histogram_rows(before, after)))


def _train_upper(run: Run, task: str) -> None:
    c = run.cfg
    ds = run.dataset()
    policy = run.policy(decoder_only=True)
    prior = run.prior("prior_shifted.ckpt")
    res = train_task(policy, prior, ds, run.upper_config(task), c.rng("policy"), c.rng("sim"))
    comps = {"policy": ck.paramset_component(res.actor.net), "value": ck.paramset_component(res.actor.critic)}
    if res.league is not None:
        comps.update(ck.league_components(res.league))
    run.save(f"{task}.ckpt", task, comps, {"steps": res.steps})
    run.write(f"{task}_train.csv", res.log.text())
    if res.match_log is not None:
        run.write("matches.csv", res.match_log.text())
        rows = [[i, a, float(p)] for i, (a, p) in enumerate(zip(res.league.added_at, res.league.win_prob))]
        run.write("league.csv", ev.csv_text(["entry", "added_at_update", "win_prob"], rows))


def cmd_evaluate(run: Run) -> None:
    c = run.cfg
    ds = run.dataset()
    policy = run.policy()
    prior = run.prior("prior_shifted.ckpt")
    tracking = evaluate_tracking(policy, ds)
    run.write("tracking_eval.csv", ev.csv_text(["clip", "mean_reward"],
                                               [[cl.clip_id, float(r)] for cl, r in zip(ds.clips, tracking)]))
    pool = ev.sample_frame_pool(prior, run.latent_env(policy, ds), c["eval.pool_size"], c.rng("eval"))
    report = ev.reconstruction_score(ds, pool, c["eval.score_threshold"])
    run.write("scores.csv", ev.csv_text(ev.SCORE_COLUMNS, ev.score_rows(ds, report)))
    run.write("score_summary.csv", ev.csv_text(["pool_size", "threshold", "ratio"],
                                               [[len(pool), report.threshold, report.ratio]]))
    proj = ev.latent_projection(policy.codebook.codes)
    run.write("codebook_projection.csv", ev.csv_text(ev.PROJECTION_COLUMNS,
                                                     [[i, float(x), float(y)] for i, (x, y) in enumerate(proj.coords)]))


def cmd_tournament(run: Run) -> None:
    c = run.cfg
    ds = run.dataset()
    policy = run.policy(decoder_only=True)
    league = ck.league_from(run.load("compete.ckpt"))
    n = min(c["tournament.entries"], len(league))
    picks = np.unique(np.linspace(0, len(league) - 1, n).round().astype(int))
    rng = c.rng("league")
    cfg = run.upper_config("compete").compete
    table = tournament_elo(len(picks), c["tournament.matches"],
                           lambda i, j, m: play_matches(policy, ds, league.pool[picks[i]], league.pool[picks[j]],
                                                        m, rng, cfg, hold=c["latent.hold"]))
    run.write("elo.csv", ev.csv_text(["entry", "added_at_update", "elo"],
                                     [[int(p), league.added_at[p], float(r)] for p, r in zip(picks, table.ratings)]))
    rows = [[int(picks[i]), int(picks[j]), float(table.payoff[i, j])]
            for i in range(len(picks)) for j in range(len(picks)) if i != j]
    run.write("payoff.csv", ev.csv_text(["row_entry", "col_entry", "score"], rows))


def cmd_report(run: Run) -> None:
    tables = {}
    for name in sorted(os.listdir(run.dir)):
        if name.endswith(".csv"):
            cols, rows = ev.read_csv(run.path(name))
            tables[name[:-4]] = (cols, rows)
    if not tables:
        raise UsageError(f"no CSV outputs in {run.dir}; run the training stages first")
    hashes = {n: ck.file_hash(run.path(n)) for n in PRODUCERS if n.endswith(".ckpt") and os.path.exists(run.path(n))}
    seeds = {"master": run.cfg["seed"]}
    ev.export_report(tables, run.path("report"), run.cfg.canonical(), seeds, hashes)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-imitate": cmd_train_imitate,
    "distill-prior": cmd_distill_prior,
    "shift-prior": cmd_shift_prior,
    "train-strike": lambda run: _train_upper(run, "strike"),
    "train-compete": lambda run: _train_upper(run, "compete"),
    "evaluate": cmd_evaluate,
    "tournament": cmd_tournament,
    "report": cmd_report,
}


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs:
        if "=" not in p:
            raise UsageError(f"--set expects KEY=VALUE, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        overrides = _overrides(args.set)
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        cfg = load_config(args.config, overrides)
        run = Run(cfg, run_root(args.run_dir))
        HANDLERS[args.command](run)
        return 0
    except CatPriorError as exc:
        print(f"catprior: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"catprior: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
