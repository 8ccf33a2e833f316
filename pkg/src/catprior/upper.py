"""Task-level control over codes: a categorical policy that drives the frozen
decoder, kept close to the state-conditional prior by a KL penalty.

Two planar tasks are provided.  *Strike* places a tippable pillar ahead of
the character; *compete* puts two characters face to face and rewards hand
contact on the opponent and knocking it over.  The competitive task trains
against a growing pool of past checkpoints sampled by difficulty, and
checkpoints are rated with an Elo fit over a round-robin tournament.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from catprior.envs import CharacterEnv
from catprior.errors import ConfigurationError, TrainingError, UsageError
from catprior.motion import MotionDataset
from catprior.nn import ParamSet, mlp_forward, sample_categorical
from catprior.prior import CategoricalActor, PriorNet, categorical_ppo_loss
from catprior.rl import CsvLog, PpoConfig, flatten, make_optimizers, ppo_update, rollout
from catprior.sim.model import PillarModel
from catprior.sim.world import HAND_BODIES, Physics

log = logging.getLogger(__name__)

WIN, LOSS, DRAW = "win", "loss", "draw"
RESULT_SCORE = {WIN: 1.0, DRAW: 0.5, LOSS: 0.0}


# ------------------------------------------------------------------ objective
def upper_objective(actor: CategoricalActor, mb: dict, prior: PriorNet, alpha_kl: float,
                    alpha_h: float, clip: float, value_coef: float, state_dim: int):
    """PPO loss on the task policy with a KL pull toward the frozen prior and an entropy bonus.

    objective = surrogate - alpha_kl * KL(policy || prior) + alpha_h * H(policy)
    loss = -objective + value_coef * value_mse

    The prior sees only the proprioceptive part ``obs[:, :state_dim]``.
    """
    if actor.net.n_out != prior.K:
        raise ConfigurationError(f"task policy has {actor.net.n_out} codes, prior has {prior.K}")
    ref = prior.logits(mb["obs"][:, :state_dim])
    loss, grads, d = categorical_ppo_loss(actor.net, actor.critic, mb, clip, value_coef,
                                          entropy_coef=alpha_h, kl_coef=alpha_kl, ref_logits=ref)
    d["objective"] = d["surrogate"] - alpha_kl * d["kl"] + alpha_h * d["entropy"]
    return loss, grads, d


class UpperLearner:
    def __init__(self, actor: CategoricalActor, prior: PriorNet, alpha_kl: float, alpha_h: float,
                 ppo: PpoConfig, state_dim: int):
        self.actor = actor
        self.prior = prior
        self.alpha_kl = alpha_kl
        self.alpha_h = alpha_h
        self.ppo = ppo
        self.state_dim = state_dim
        self.groups = {"policy": actor.net.arrays(), "value": actor.critic.arrays()}

    def loss_and_grads(self, mb):
        return upper_objective(self.actor, mb, self.prior, self.alpha_kl, self.alpha_h,
                               self.ppo.clip, self.ppo.value_coef, self.state_dim)


# ------------------------------------------------------------------ reward pieces
def clip_force(force, lower: float, upper: float) -> np.ndarray:
    """Clip contact force magnitudes to [lower, upper]; exactly zero where there is no contact."""
    force = np.asarray(force, dtype=np.float64)
    return np.where(force > 0.0, np.clip(force, lower, upper), 0.0)


def facing_term(facing_dir, target_dir) -> np.ndarray:
    """exp(-5 |1 - d . d_hat|) for 2D unit vectors."""
    dot = np.sum(np.asarray(facing_dir) * np.asarray(target_dir), axis=-1)
    return np.exp(-5.0 * np.abs(1.0 - dot))


def velocity_term(facing_dir, velocity, target_speed: float, near=None) -> np.ndarray:
    """exp(-4 |v* - d . v|), saturated to 1 where ``near`` is set."""
    proj = np.sum(np.asarray(facing_dir) * np.asarray(velocity), axis=-1)
    r = np.exp(-4.0 * np.abs(target_speed - proj))
    return r if near is None else np.where(near, 1.0, r)


def horizontal_direction(dx) -> np.ndarray:
    """Unit horizontal vector pointing along the sign of ``dx`` (forward when zero)."""
    dx = np.asarray(dx, dtype=np.float64)
    out = np.zeros(dx.shape + (2,))
    out[..., 0] = np.where(dx < 0.0, -1.0, 1.0)
    return out


# ------------------------------------------------------------------ strike
@dataclass
class StrikeConfig:
    distance: tuple[float, float] = (0.8, 1.2)  # pillar centre ahead of the root at reset
    episode_length: int = 150
    target_speed: float = 0.2
    near_distance: float = 0.6  # inside arm reach: the velocity term is saturated here
    topple_angle: float = 1.0
    weights: tuple[float, float, float] = (0.6, 0.2, 0.2)


STRIKE_GOAL_SIZE = 7


def strike_goal(root_pos, pillar: dict) -> np.ndarray:
    """Goal layout: [pillar x - root x, pillar y - root y, sin tilt, cos tilt, vx, vy, angular velocity]."""
    rel = pillar["pos"] - root_pos
    return np.concatenate([rel, np.sin(pillar["angle"])[:, None], np.cos(pillar["angle"])[:, None],
                           pillar["vel"], pillar["omega"][:, None]], axis=1)


def strike_terms(root_pos, root_vel, pillar_pos, pillar_angle, cfg: StrikeConfig) -> dict:
    """Per-term strike rewards for own-frame characters facing +x."""
    pillar_angle = np.asarray(pillar_angle, dtype=np.float64)
    up = np.array([0.0, 1.0])
    pillar_up = np.stack([-np.sin(pillar_angle), np.cos(pillar_angle)], axis=-1)
    r_strike = 1.0 - pillar_up @ up
    dx = np.asarray(pillar_pos)[..., 0] - np.asarray(root_pos)[..., 0]
    facing = np.zeros(dx.shape + (2,))
    facing[..., 0] = 1.0
    r_facing = facing_term(facing, horizontal_direction(dx))
    r_vel = velocity_term(facing, root_vel, cfg.target_speed, near=np.abs(dx) < cfg.near_distance)
    return {"strike": r_strike, "facing": r_facing, "vel": r_vel}


def strike_reward(root_pos, root_vel, pillar_pos, pillar_angle, cfg: StrikeConfig = StrikeConfig()):
    t = strike_terms(root_pos, root_vel, pillar_pos, pillar_angle, cfg)
    w = cfg.weights
    return w[0] * t["strike"] + w[1] * t["facing"] + w[2] * t["vel"]


def _recentred(frames: np.ndarray, x: float | np.ndarray) -> np.ndarray:
    out = np.array(frames, dtype=np.float64)
    out[:, 0] = x
    return out


class StrikeEnv(CharacterEnv):
    """One character and one pillar per env row; actions are code indices."""

    def __init__(self, decoder_policy, dataset: MotionDataset, n_envs: int,
                 cfg: StrikeConfig = StrikeConfig(), pillar: PillarModel | None = None,
                 hold: int = 1, physics: Physics | None = None):
        self.pillar_model = pillar or PillarModel()
        super().__init__(dataset.model, n_envs, physics=physics, pillar=self.pillar_model)
        self.policy = decoder_policy
        self.dataset = dataset
        self.cfg = cfg
        self.hold = hold
        self.age = np.zeros(n_envs, dtype=np.int64)
        self.toppled = np.zeros(n_envs, dtype=np.bool_)
        self.ep_reward = np.zeros(n_envs)
        self.finished: list[tuple[bool, float, int]] = []  # (toppled, return, length)

    @property
    def state_dim(self) -> int:
        return self.policy.state_dim

    @property
    def obs_dim(self) -> int:
        return self.state_dim + STRIKE_GOAL_SIZE

    def reset_envs(self, envs, rng) -> None:
        envs = np.asarray(envs, dtype=np.int64)
        if len(envs) == 0:
            return
        idx = rng.integers(0, self.dataset.n_frames, size=len(envs))
        self.world.set_character(0, _recentred(self.dataset.all_frames[idx], 0.0), envs=envs)
        d = rng.uniform(*self.cfg.distance, size=len(envs))
        ground = self.world.spec.phys[1]
        pos = np.stack([d, np.full(len(envs), ground + self.pillar_model.half_height + 0.005)], axis=1)
        self.world.set_pillar(pos, 0.0, envs=envs)
        self.age[envs] = 0
        self.toppled[envs] = False
        self.ep_reward[envs] = 0.0

    def observe_all(self) -> np.ndarray:
        fr = self.world.get_character(0)
        return np.concatenate([self.observe(0), strike_goal(fr[:, 0:2], self.world.pillar_state())], axis=1)

    def reset(self, rng) -> np.ndarray:
        self.reset_envs(np.arange(self.n_envs), rng)
        return self.observe_all()

    def reward(self) -> np.ndarray:
        fr = self.world.get_character(0)
        p = self.world.pillar_state()
        return strike_reward(fr[:, 0:2], fr[:, self.layout.root_vel], p["pos"], p["angle"], self.cfg)

    def step(self, codes, rng):
        codes = np.asarray(codes, dtype=np.int64)
        diverged = np.zeros(self.n_envs, dtype=np.bool_)
        for _ in range(self.hold):
            a = self.policy.decode_mean(self.observe(0), codes)
            diverged |= self.drive([a])
        self.age += 1
        r = np.where(diverged, 0.0, self.reward())
        self.ep_reward += r
        self.toppled |= np.abs(self.world.pillar_state()["angle"]) > self.cfg.topple_angle
        done = diverged | self.fallen(0) | (self.age >= self.cfg.episode_length)
        info = {"toppled": self.toppled.copy()}
        for e in np.flatnonzero(done):
            self.finished.append((bool(self.toppled[e]), float(self.ep_reward[e]), int(self.age[e])))
        self.reset_envs(np.flatnonzero(done), rng)
        return self.observe_all(), r, done, info


# ------------------------------------------------------------------ compete
@dataclass
class CompeteConfig:
    separation: tuple[float, float] = (1.0, 1.3)  # root-to-root distance at reset
    episode_length: int = 200
    damage_clip: tuple[float, float] = (10.0, 60.0)
    damage_scale: float = 1.0 / 60.0  # clipped force units -> reward units
    target_speed: float = 0.2
    near_distance: float = 0.6  # inside punch reach (arm 0.6 plus torso radius)
    fall_bonus: float = 100.0
    weights: tuple[float, float] = (0.6, 0.4)  # facing, velocity


def hand_force(world, attacker: int, defender: int) -> np.ndarray:
    """Summed contact force from the attacker's hands onto the defender's bodies."""
    return sum(world.contact_force(attacker, h, defender) for h in HAND_BODIES)


def compete_reward(dealt, taken, root_x, root_vel, opponent_x, opponent_fell,
                   cfg: CompeteConfig = CompeteConfig()) -> dict:
    """Per-term rewards for an own-frame agent facing +x.

    ``dealt``/``taken`` are raw hand contact force magnitudes; ``opponent_fell``
    flags the step on which the opponent's fall event fires.
    """
    lo, hi = cfg.damage_clip
    r_damage = cfg.damage_scale * (clip_force(dealt, lo, hi) - clip_force(taken, lo, hi))
    dx = np.asarray(opponent_x) - np.asarray(root_x)
    facing = np.zeros(dx.shape + (2,))
    facing[..., 0] = 1.0
    r_facing = facing_term(facing, horizontal_direction(dx))
    r_vel = velocity_term(facing, root_vel, cfg.target_speed, near=np.abs(dx) < cfg.near_distance)
    r_fall = np.asarray(opponent_fell, dtype=np.float64)
    total = r_damage + cfg.weights[0] * r_facing + cfg.weights[1] * r_vel + cfg.fall_bonus * r_fall
    return {"damage": r_damage, "facing": r_facing, "vel": r_vel, "fall": r_fall, "total": total}


OPPONENT_GOAL_BODY_FEATURES = 3  # x, y relative to the viewer root; heading


def opponent_goal(world, viewer: int, other: int) -> np.ndarray:
    """Opponent features in the viewer's own frame.

    Layout: per opponent body [x - root_x, y - root_y, heading], then the
    opponent root velocity (2) and angular velocity (1).
    """
    fv, fo = world.facings[viewer], world.facings[other]
    root = world.get_character(viewer)[:, 0:2]
    bs = world.body_state(other)
    com = bs["com"].copy()
    com[..., 0] *= fv * fo  # other's own frame -> world -> viewer's own frame
    angle = bs["angle"] * (fv * fo)
    fr = world.get_character(other)
    L = world.layout
    vel = fr[:, L.root_vel].copy()
    vel[:, 0] *= fv * fo
    omega = fr[:, L.root_omega] * (fv * fo)
    rel = com - root[:, None, :]
    per_body = np.concatenate([rel, angle[..., None]], axis=-1)
    E = world.n_envs
    return np.concatenate([per_body.reshape(E, -1), vel, omega[:, None]], axis=1)


def opponent_goal_size(n_bodies: int) -> int:
    return OPPONENT_GOAL_BODY_FEATURES * n_bodies + 3


def match_result(agent_fell, opponent_fell, dealt_total, taken_total) -> list[str]:
    """Outcome per env: a fall decides; otherwise the larger damage total wins."""
    out = []
    for af, of, d, t in zip(np.atleast_1d(agent_fell), np.atleast_1d(opponent_fell),
                            np.atleast_1d(dealt_total), np.atleast_1d(taken_total)):
        if af and of:
            out.append(DRAW)
        elif of:
            out.append(WIN)
        elif af:
            out.append(LOSS)
        elif d > t:
            out.append(WIN)
        elif t > d:
            out.append(LOSS)
        else:
            out.append(DRAW)
    return out


class CompeteEnv(CharacterEnv):
    """Two characters facing each other; character 0 is the learner.

    ``opponent_fn(env_ids, obs, rng) -> codes`` picks the other side's codes;
    ``on_reset(env_ids, rng)`` lets the caller assign ``opponent`` ids per episode.
    """

    def __init__(self, decoder_policy, dataset: MotionDataset, n_envs: int,
                 cfg: CompeteConfig = CompeteConfig(), hold: int = 1, physics: Physics | None = None):
        super().__init__(dataset.model, n_envs, physics=physics, facings=(1, -1))
        self.policy = decoder_policy
        self.dataset = dataset
        self.cfg = cfg
        self.hold = hold
        self.opponent_fn = None
        self.on_reset = None
        self.age = np.zeros(n_envs, dtype=np.int64)
        self.dealt = np.zeros(n_envs)
        self.taken = np.zeros(n_envs)
        self.opponent = np.full(n_envs, -1, dtype=np.int64)
        self.finished: list[dict] = []

    @property
    def state_dim(self) -> int:
        return self.policy.state_dim

    @property
    def obs_dim(self) -> int:
        return self.state_dim + opponent_goal_size(self.model.n_bodies)

    def reset_envs(self, envs, rng) -> None:
        envs = np.asarray(envs, dtype=np.int64)
        if len(envs) == 0:
            return
        half = 0.5 * rng.uniform(*self.cfg.separation, size=len(envs))
        for i in range(2):
            idx = rng.integers(0, self.dataset.n_frames, size=len(envs))
            self.world.set_character(i, _recentred(self.dataset.all_frames[idx], -half), envs=envs)
        self.age[envs] = 0
        self.dealt[envs] = 0.0
        self.taken[envs] = 0.0
        if self.on_reset is not None:
            self.on_reset(envs, rng)

    def observe_side(self, i: int) -> np.ndarray:
        return np.concatenate([self.observe(i), opponent_goal(self.world, i, 1 - i)], axis=1)

    def reset(self, rng) -> np.ndarray:
        self.reset_envs(np.arange(self.n_envs), rng)
        return self.observe_side(0)

    def step(self, codes, rng):
        codes = np.asarray(codes, dtype=np.int64)
        diverged = np.zeros(self.n_envs, dtype=np.bool_)
        lo, hi = self.cfg.damage_clip
        dealt = np.zeros(self.n_envs)
        taken = np.zeros(self.n_envs)
        for _ in range(self.hold):
            other = self.opponent_fn(np.arange(self.n_envs), self.observe_side(1), rng)
            a0 = self.policy.decode_mean(self.observe(0), codes)
            a1 = self.policy.decode_mean(self.observe(1), np.asarray(other, dtype=np.int64))
            diverged |= self.drive([a0, a1])
            dealt += hand_force(self.world, 0, 1)
            taken += hand_force(self.world, 1, 0)
        self.age += 1
        fell0, fell1 = self.fallen(0), self.fallen(1)
        fr0, fr1 = self.world.get_character(0), self.world.get_character(1)
        opp_x = -fr1[:, 0]  # opponent root in the learner's own frame
        terms = compete_reward(dealt, taken, fr0[:, 0], fr0[:, self.layout.root_vel], opp_x, fell1, self.cfg)
        r = np.where(diverged, 0.0, terms["total"])
        self.dealt += clip_force(dealt, lo, hi)
        self.taken += clip_force(taken, lo, hi)
        done = diverged | fell0 | fell1 | (self.age >= self.cfg.episode_length)
        ended = np.flatnonzero(done)
        results = match_result(fell0[ended], fell1[ended], self.dealt[ended], self.taken[ended])
        for e, res in zip(ended, results):
            self.finished.append({"env": int(e), "opponent": int(self.opponent[e]), "result": res, "dealt": float(self.dealt[e]),
                                  "taken": float(self.taken[e]), "length": int(self.age[e])})
        info = {"damage": terms["damage"]}
        self.reset_envs(ended, rng)
        return self.observe_side(0), r, done, info


# ------------------------------------------------------------------ league
@dataclass
class League:
    """Append-only pool of policy snapshots with per-entry win-probability estimates."""

    pool: list[ParamSet] = field(default_factory=list)
    win_prob: list[float] = field(default_factory=list)
    added_at: list[int] = field(default_factory=list)  # learner update index at which each was pooled
    exponent: float = 2.0
    ema: float = 0.1

    def add(self, params: ParamSet, update: int = 0) -> int:
        self.pool.append(params.copy())
        self.win_prob.append(0.5)
        self.added_at.append(int(update))
        return len(self.pool) - 1

    def __len__(self) -> int:
        return len(self.pool)


def pfsp_weights(win_prob, exponent: float = 2.0) -> np.ndarray:
    """Opponent probabilities proportional to (1 - P)^exponent; uniform when every P is 1."""
    p = np.asarray(win_prob, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ConfigurationError("win probabilities must lie in [0, 1]")
    w = (1.0 - p) ** exponent
    s = w.sum()
    return w / s if s > 0 else np.full(len(p), 1.0 / len(p))


def pfsp_sample(league: League, rng: np.random.Generator, size: int | None = None):
    """Pool indices drawn by difficulty; -1 (play the current self) when the pool is empty."""
    if len(league) == 0:
        return -1 if size is None else np.full(size, -1, dtype=np.int64)
    return rng.choice(len(league), size=size, p=pfsp_weights(league.win_prob, league.exponent))


def league_update(league: League, opponent: int, result: str) -> League:
    """Exponential moving average of the score against ``opponent``."""
    if result not in RESULT_SCORE:
        raise UsageError(f"result must be one of {sorted(RESULT_SCORE)}, got {result!r}")
    if opponent < 0:
        return league
    p = league.win_prob[opponent]
    league.win_prob[opponent] = (1.0 - league.ema) * p + league.ema * RESULT_SCORE[result]
    return league


# ------------------------------------------------------------------ Elo
ELO_BASE = 400.0
ELO_K = 16.0
ELO_START = 1500.0


def elo_expected(r_a, r_b) -> np.ndarray:
    """Expected score of A against B."""
    return 1.0 / (1.0 + 10.0 ** ((np.asarray(r_b) - np.asarray(r_a)) / ELO_BASE))


def fit_elo(scores: np.ndarray, games: np.ndarray, k: float = ELO_K, iterations: int = 20000,
            tol: float = 1e-9) -> np.ndarray:
    """Ratings from pairwise score totals by repeated logistic (Elo-style) updates.

    ``scores[i, j]`` is i's total score against j (win 1, draw 0.5) over
    ``games[i, j]`` games.  Each pass moves every rating by ``k`` times its
    per-game surplus of actual over expected score; ratings start at 1500 and
    are re-centred on 1500 at the end.
    """
    scores = np.asarray(scores, dtype=np.float64)
    games = np.asarray(games, dtype=np.float64)
    n = len(scores)
    r = np.full(n, ELO_START)
    per_player = np.maximum(games.sum(axis=1), 1.0)
    for _ in range(iterations):
        e = elo_expected(r[:, None], r[None, :])
        step = k * (scores - games * e).sum(axis=1) / per_player * n
        r = r + step
        if np.max(np.abs(step)) < tol:
            break
    return r - r.mean() + ELO_START


@dataclass
class EloTable:
    payoff: np.ndarray  # P[i, j]: i's mean score against j
    games: np.ndarray
    ratings: np.ndarray

    def csv(self) -> str:
        lines = ["entry,elo"] + [f"{i},{r:.6f}" for i, r in enumerate(self.ratings)]
        return "\n".join(lines) + "\n"


def tournament_elo(n_players: int, matches_per_pair: int, play) -> EloTable:
    """Round robin: ``play(i, j, n) -> (wins, draws, losses)`` from i's point of view."""
    if n_players < 2:
        raise UsageError("a tournament needs at least two entries")
    scores = np.zeros((n_players, n_players))
    games = np.zeros((n_players, n_players))
    for i in range(n_players):
        for j in range(i + 1, n_players):
            w, d, l = play(i, j, matches_per_pair)
            if w + d + l != matches_per_pair:
                raise TrainingError(f"play({i}, {j}) returned {w + d + l} results, expected {matches_per_pair}")
            scores[i, j] = w + 0.5 * d
            scores[j, i] = l + 0.5 * d
            games[i, j] = games[j, i] = matches_per_pair
    payoff = np.divide(scores, games, out=np.full_like(scores, 0.5), where=games > 0)
    return EloTable(payoff, games, fit_elo(scores, games))


# ------------------------------------------------------------------ policies
def init_upper_actor(obs_dim: int, k: int, hidden, rng) -> CategoricalActor:
    net = ParamSet.init([obs_dim, *hidden, k], rng, out_scale=0.01)
    critic = ParamSet.init([obs_dim, *hidden, 1], rng)
    return CategoricalActor(net, critic)


def pool_codes(nets: list[ParamSet], which: np.ndarray, obs: np.ndarray, rng) -> np.ndarray:
    """Sample codes row-wise from ``nets[which[row]]``."""
    codes = np.zeros(len(obs), dtype=np.int64)
    for o in np.unique(which):
        m = which == o
        codes[m] = sample_categorical(mlp_forward(nets[o], obs[m])[0], rng)
    return codes


def play_matches(decoder_policy, dataset: MotionDataset, net_a: ParamSet, net_b: ParamSet,
                 n_matches: int, rng: np.random.Generator, cfg: CompeteConfig = CompeteConfig(),
                 hold: int = 1) -> tuple[int, int, int]:
    """One episode per env row, A as the learner side.  Returns (wins, draws, losses) for A."""
    env = CompeteEnv(decoder_policy, dataset, n_matches, cfg, hold=hold)
    env.opponent_fn = lambda envs, obs, r: pool_codes([net_b], np.zeros(len(obs), np.int64), obs, r)
    obs = env.reset(rng)
    outcome: dict[int, str] = {}
    while len(outcome) < n_matches:
        codes = pool_codes([net_a], np.zeros(len(obs), np.int64), obs, rng)
        obs, _, _, _ = env.step(codes, rng)
        for rec in env.finished:
            outcome.setdefault(rec["env"], rec["result"])
        env.finished = []
    res = list(outcome.values())
    return res.count(WIN), res.count(DRAW), res.count(LOSS)


# ------------------------------------------------------------------ training
@dataclass
class UpperConfig:
    task: str = "strike"
    steps: int = 1_000_000
    n_envs: int = 64
    hidden: tuple[int, ...] = (64, 64)
    alpha_kl: float = 0.05
    alpha_h: float = 0.01
    hold: int = 1
    pool_interval: int = 20  # learner updates between pooled snapshots (compete)
    ppo: PpoConfig = field(default_factory=lambda: PpoConfig(lr=3e-4))
    strike: StrikeConfig = field(default_factory=StrikeConfig)
    compete: CompeteConfig = field(default_factory=CompeteConfig)

    def __post_init__(self):
        if self.task not in ("strike", "compete"):
            raise ConfigurationError(f"unknown task {self.task!r}; expected 'strike' or 'compete'")
        if self.alpha_kl < 0 or self.alpha_h < 0:
            raise ConfigurationError("KL and entropy weights must be non-negative")


@dataclass
class UpperResult:
    actor: CategoricalActor
    log: CsvLog
    league: League | None
    match_log: CsvLog | None
    steps: int


UPPER_COLUMNS = ["update", "steps", "reward_mean", "episodes", "success_rate", "objective", "surrogate",
                 "kl", "entropy", "value_loss", "loss"]


def train_task(decoder_policy, prior: PriorNet, dataset: MotionDataset, cfg: UpperConfig,
               rng: np.random.Generator, sim_rng: np.random.Generator | None = None,
               callback=None) -> UpperResult:
    """PPO with the KL-regularized objective on the strike or compete task.

    The decoder, codebook and prior are only read.  In compete mode each
    episode's opponent is drawn from the league, results feed the league's
    win-probability estimates, and a snapshot joins the pool every
    ``pool_interval`` updates (the initial policy is the first entry).
    """
    if prior.K != decoder_policy.K:
        raise ConfigurationError(f"prior has {prior.K} codes, decoder codebook has {decoder_policy.K}")
    sim_rng = rng if sim_rng is None else sim_rng
    league = None
    match_log = None
    if cfg.task == "strike":
        env = StrikeEnv(decoder_policy, dataset, cfg.n_envs, cfg.strike, hold=cfg.hold)
    else:
        env = CompeteEnv(decoder_policy, dataset, cfg.n_envs, cfg.compete, hold=cfg.hold)
    actor = init_upper_actor(env.obs_dim, prior.K, cfg.hidden, rng)
    if cfg.task == "compete":
        league = League()
        league.add(actor.net, 0)
        match_log = CsvLog(["update", "opponent", "result", "dealt", "taken", "length"])

        def on_reset(envs, r):
            env.opponent[envs] = pfsp_sample(league, r, size=len(envs))

        def opponent_fn(envs, obs, r):
            nets = league.pool + [actor.net]  # index -1 plays the live policy
            return pool_codes(nets, env.opponent[envs], obs, r)

        env.on_reset = on_reset
        env.opponent_fn = opponent_fn
    learner = UpperLearner(actor, prior, cfg.alpha_kl, cfg.alpha_h, cfg.ppo, env.state_dim)
    opts = make_optimizers(learner.groups, cfg.ppo.lr, cfg.ppo.max_grad_norm)
    train_log = CsvLog(UPPER_COLUMNS)
    obs = env.reset(sim_rng)
    steps = 0
    update = 0
    while steps < cfg.steps:
        snapshot = copy.deepcopy(actor)
        traj, obs = rollout(env, actor, cfg.ppo.horizon, rng, obs)
        steps += traj.n_steps
        try:
            d = ppo_update(learner, flatten(traj, cfg.ppo), cfg.ppo, opts, rng)
        except TrainingError as exc:
            exc.last_good = snapshot  # type: ignore[attr-defined]
            raise
        update += 1
        eps = env.finished
        env.finished = []
        if cfg.task == "strike":
            success = float(np.mean([e[0] for e in eps])) if eps else math.nan
        else:
            success = float(np.mean([e["result"] == WIN for e in eps])) if eps else math.nan
            _record_matches(league, match_log, eps, update)
            if update % cfg.pool_interval == 0:
                league.add(actor.net, update)
        train_log.add(update=update, steps=steps, reward_mean=float(traj.rewards.mean()), episodes=len(eps),
                      success_rate=success, objective=d["objective"], surrogate=d["surrogate"], kl=d["kl"],
                      entropy=d["entropy"], value_loss=d["value_loss"], loss=d["loss"])
        if callback is not None:
            callback(update, steps, actor, d, eps)
    return UpperResult(actor, train_log, league, match_log, steps)


def _record_matches(league: League, match_log: CsvLog, eps: list[dict], update: int) -> None:
    for rec in eps:
        league_update(league, rec["opponent"], rec["result"])
        match_log.add(update=update, opponent=rec["opponent"], result=rec["result"], dealt=rec["dealt"],
                      taken=rec["taken"], length=rec["length"])
