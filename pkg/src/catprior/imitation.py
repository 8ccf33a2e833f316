"""Motion imitation through a discrete bottleneck.

An encoder maps (state, future frames) to a continuous vector, which snaps
to its nearest codebook entry; a decoder maps (state, code) to a Gaussian
over residual joint targets.  Training is PPO on the tracking reward plus
the two commitment terms, with gradients reaching the encoder through the
straight-through path.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from catprior import quantizer as vq
from catprior.envs import CharacterEnv
from catprior.errors import TrainingError
from catprior.motion import ClipSampler, MotionClip, MotionDataset, delta_size, future_info
from catprior.nn import GaussianHead, ParamSet, backward, gaussian_logp_grads, gaussian_stats, mlp_forward
from catprior.rl import CsvLog, PpoConfig, RunningMoments, clipped_surrogate, flatten, make_optimizers, ppo_update, rollout, value_loss
from catprior.sim.world import Physics, observation_size
from catprior.tracking import TrackingWeights, tracking_reward

log = logging.getLogger(__name__)

NORM_CLIP = 5.0


# ------------------------------------------------------------------ policy
@dataclass
class ImitationPolicy:
    encoder: ParamSet
    codebook: vq.Codebook
    decoder: ParamSet
    head: GaussianHead
    critic: ParamSet
    state_dim: int
    future_dim: int
    obs_shift: np.ndarray | None = None  # input normalization, identity when unset
    obs_scale: np.ndarray | None = None

    @classmethod
    def init(cls, state_dim: int, future_dim: int, n_actions: int, k: int, d: int,
             hidden: tuple[int, ...], rng: np.random.Generator, log_std: float = math.log(0.1)):
        enc = ParamSet.init([state_dim + future_dim, *hidden, d], rng)
        dec = ParamSet.init([state_dim + d, *hidden, n_actions], rng, out_scale=0.1)
        val = ParamSet.init([state_dim + future_dim, *hidden, 1], rng)
        return cls(enc, vq.Codebook.init(k, d, rng), dec, GaussianHead(np.full(n_actions, log_std)),
                   val, state_dim, future_dim)

    @property
    def K(self) -> int:
        return self.codebook.K

    def split(self, obs):
        return obs[:, :self.state_dim], obs[:, self.state_dim:]

    def normalize(self, obs) -> np.ndarray:
        """Full observation (state and future) mapped to network inputs."""
        if self.obs_shift is None:
            return np.asarray(obs, dtype=np.float64)
        n = obs.shape[-1]
        return np.clip((obs - self.obs_shift[:n]) / self.obs_scale[:n], -NORM_CLIP, NORM_CLIP)

    def encode(self, obs) -> vq.QuantizeResult:
        z_e, _ = mlp_forward(self.encoder, self.normalize(obs))
        return vq.quantize(self.codebook, z_e)

    def decode_mean(self, state, codes_or_index) -> np.ndarray:
        z_q = np.asarray(codes_or_index)
        if z_q.ndim == 1 and np.issubdtype(z_q.dtype, np.integer):
            z_q = self.codebook.codes[z_q]
        mean, _ = mlp_forward(self.decoder, np.concatenate([self.normalize(state), z_q], axis=-1))
        return mean

    def act(self, obs, rng, deterministic: bool = False) -> dict:
        s, _ = self.split(obs)
        qr = self.encode(obs)
        mean = self.decode_mean(s, qr.z_q)
        if deterministic:
            a = mean
        else:
            a = mean + self.head.std * rng.standard_normal(mean.shape)
        logp = gaussian_stats(mean, self.head.log_std, a)["log_prob"]
        return {"action": a, "logp": logp, "value": self.value_of(obs),
                "extras": {"code": qr.index}}

    def value_of(self, obs) -> np.ndarray:
        v, _ = mlp_forward(self.critic, self.normalize(obs))
        return v[:, 0]

    def value(self, obs) -> np.ndarray:  # rl.Policy protocol
        return self.value_of(obs)

    def groups(self) -> dict:
        return {
            "encoder": self.encoder.arrays(),
            "decoder": self.decoder.arrays() + [self.head.log_std],
            "codebook": [self.codebook.codes],
            "value": self.critic.arrays(),
        }


# ------------------------------------------------------------------ objective
@dataclass
class ImitationLossConfig:
    clip: float = 0.1
    beta: float = 0.25  # commitment penalty
    rl_weight: float = 1.0
    value_coef: float = 0.5


def imitation_objective(policy: ImitationPolicy, mb: dict, cfg: ImitationLossConfig,
                        st_offset: np.ndarray | None = None, indices: np.ndarray | None = None):
    """Combined loss and gradients for one minibatch.

    loss = -rl_weight * surrogate + value_coef * value_mse
           + mean |sg[z_e] - e|^2 + beta * mean |z_e - sg[e]|^2

    ``st_offset``/``indices`` freeze the quantization so that z_q = z_e + offset,
    which lets finite differences probe the straight-through path.
    """
    obs = policy.normalize(mb["obs"])
    n = len(obs)
    s, _ = policy.split(obs)
    z_e, enc_trace = mlp_forward(policy.encoder, obs)
    if indices is None:
        idx = vq.quantize(policy.codebook, z_e).index
    else:
        idx = indices
    code = policy.codebook.codes[idx]
    st = vq.straight_through(z_e, code)
    z_q = st.z_q if st_offset is None else z_e + st_offset

    dec_in = np.concatenate([s, z_q], axis=1)
    mean, dec_trace = mlp_forward(policy.decoder, dec_in)
    a = mb["actions"]
    logp = gaussian_stats(mean, policy.head.log_std, a)["log_prob"]
    surr, g_logp, d = clipped_surrogate(logp, mb["logp_old"], mb["adv"], cfg.clip)
    g_mean, g_logstd = gaussian_logp_grads(mean, policy.head.log_std, a)
    # loss gradient wrt logp is -rl_weight * d surr / d logp
    gl = -cfg.rl_weight * g_logp
    dec_grads, g_in = backward(dec_trace, gl[:, None] * g_mean)
    g_logstd_total = (gl[:, None] * g_logstd).sum(axis=0)
    g_zq = g_in[:, s.shape[1]:]
    g_ze_rl, _ = st.backward(g_zq)

    commit = vq.commitment_terms(z_e, code, cfg.beta)
    g_ze = g_ze_rl + commit["grad_z_e"] / n
    enc_grads, _ = backward(enc_trace, g_ze)
    g_codes = np.zeros_like(policy.codebook.codes)
    np.add.at(g_codes, idx, commit["grad_code"] / n)

    v, v_trace = mlp_forward(policy.critic, obs)
    vl, g_v = value_loss(v[:, 0], mb["returns"])
    val_grads, _ = backward(v_trace, cfg.value_coef * g_v[:, None])

    cb_loss = float(commit["codebook_loss"].mean())
    cm_loss = float(commit["commitment_loss"].mean())
    loss = -cfg.rl_weight * surr + cfg.value_coef * vl + cb_loss + cm_loss
    grads = {
        "encoder": enc_grads,
        "decoder": dec_grads + [g_logstd_total],
        "codebook": [g_codes],
        "value": val_grads,
    }
    diags = dict(d, surrogate=float(surr), value_loss=vl, codebook_loss=cb_loss,
                 commitment_loss=cm_loss)
    return float(loss), grads, diags


class ImitationLearner:
    def __init__(self, policy: ImitationPolicy, cfg: ImitationLossConfig):
        self.policy = policy
        self.cfg = cfg
        self.groups = policy.groups()

    def loss_and_grads(self, mb):
        return imitation_objective(self.policy, mb, self.cfg)


# ------------------------------------------------------------------ environment
@dataclass
class EpisodeConfig:
    low_reward: float = 0.1
    low_reward_steps: int = 10


class ImitationEnv(CharacterEnv):
    """Reference-state-initialized clip tracking with early termination."""

    def __init__(self, dataset: MotionDataset, sampler: ClipSampler, n_envs: int,
                 episode: EpisodeConfig | None = None, physics: Physics | None = None,
                 weights: TrackingWeights = TrackingWeights()):
        super().__init__(dataset.model, n_envs, physics=physics)
        self.dataset = dataset
        self.sampler = sampler
        self.episode = episode or EpisodeConfig()
        self.weights = weights
        self.clip = np.zeros(n_envs, dtype=np.int64)
        self.t = np.zeros(n_envs, dtype=np.int64)
        self.start = np.zeros(n_envs, dtype=np.int64)
        self.low = np.zeros(n_envs, dtype=np.int64)
        self.ep_reward = np.zeros(n_envs)
        self.finished: list[tuple[int, int, float]] = []  # (clip, start, zero-filled mean reward)

    @property
    def obs_dim(self) -> int:
        return observation_size(self.model) + 2 * delta_size(self.model.n_joints)

    def episode_start(self, clip: MotionClip, rng) -> int:
        return int(rng.integers(0, len(clip) - 1))

    def _reset_envs(self, envs: np.ndarray, rng) -> None:
        if len(envs) == 0:
            return
        clips = self.sampler.sample(rng, size=len(envs))
        starts = np.array([self.episode_start(self.dataset.clips[c], rng) for c in clips])
        self.clip[envs] = clips
        self.t[envs] = starts
        self.start[envs] = starts
        self.low[envs] = 0
        self.ep_reward[envs] = 0.0
        frames = np.stack([self.dataset.clips[c].frames[t] for c, t in zip(clips, starts)])
        self.world.set_character(0, frames, envs=envs)

    def _obs(self) -> np.ndarray:
        s = self.observe(0)
        fr = self.world.get_character(0)
        f = np.empty((self.n_envs, 2 * delta_size(self.model.n_joints)))
        for c in np.unique(self.clip):
            m = self.clip == c
            f[m] = future_info(self.dataset, int(c), self.t[m], fr[m])
        return np.concatenate([s, f], axis=1)

    def reset(self, rng) -> np.ndarray:
        self._reset_envs(np.arange(self.n_envs), rng)
        return self._obs()

    def tracking(self) -> np.ndarray:
        fr, keys = self.frames(0)
        ref = np.stack([self.dataset.clips[c].frames[t] for c, t in zip(self.clip, self.t)])
        ref_keys = np.stack([self.dataset.keys_rel[c][t] for c, t in zip(self.clip, self.t)])
        r = tracking_reward(fr, keys, ref, ref_keys, self.model.n_joints, self.weights)
        return np.where(np.isfinite(r), r, 0.0)

    def step(self, actions, rng):
        diverged = self.drive([actions])
        self.t += 1
        reward = self.tracking()
        reward[diverged] = 0.0
        self.ep_reward += reward
        self.low = np.where(reward < self.episode.low_reward, self.low + 1, 0)
        lengths = np.array([len(self.dataset.clips[c]) for c in self.clip])
        end = self.t >= lengths - 1
        done = end | diverged | self.fallen(0) | (self.low >= self.episode.low_reward_steps)
        info = {"diverged": diverged.copy(), "clip": self.clip.copy()}
        envs = np.flatnonzero(done)
        for e in envs:
            span = max(int(lengths[e] - 1 - self.start[e]), 1)
            mean = float(self.ep_reward[e] / span)
            self.finished.append((int(self.clip[e]), int(self.start[e]), mean))
            self.sampler.record(int(self.clip[e]), mean)
        if diverged.any():
            log.warning("simulation diverged in envs %s; episodes truncated", np.flatnonzero(diverged).tolist())
        self._reset_envs(envs, rng)
        return self._obs(), reward, done, info



# ------------------------------------------------------------------ training
@dataclass
class ImitationConfig:
    k: int = 32
    d: int = 8
    hidden: tuple[int, ...] = (128, 128, 128)
    n_envs: int = 64
    steps: int = 2_000_000
    alpha: float = 3.0  # prioritized sampling exponent
    normalize_obs: bool = False  # running input normalization, frozen into the policy each update
    restart_dead_after: int = 20  # updates without use before a code is re-seeded (0 disables)
    loss: ImitationLossConfig = field(default_factory=ImitationLossConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)


@dataclass
class ImitationResult:
    policy: ImitationPolicy
    sampler: ClipSampler
    log: CsvLog
    sampler_log: CsvLog
    steps: int
    optimizers: dict


TRAIN_COLUMNS = ["update", "steps", "reward_mean", "episodes", "loss", "surrogate", "value_loss",
                 "codebook_loss", "commitment_loss", "clip_frac", "codes_used"]


def train_imitation(dataset: MotionDataset, cfg: ImitationConfig, policy_rng: np.random.Generator,
                    sim_rng: np.random.Generator, policy: ImitationPolicy | None = None,
                    callback=None) -> ImitationResult:
    """Rollout -> PPO + commitment update -> clip-priority refresh, until the step budget."""
    model = dataset.model
    sampler = ClipSampler(len(dataset), alpha=cfg.alpha)
    env = ImitationEnv(dataset, sampler, cfg.n_envs, cfg.episode)
    s_dim = observation_size(model)
    f_dim = 2 * delta_size(model.n_joints)
    if policy is None:
        policy = ImitationPolicy.init(s_dim, f_dim, model.n_joints, cfg.k, cfg.d, cfg.hidden, policy_rng)
    learner = ImitationLearner(policy, dataclasses.replace(cfg.loss, clip=cfg.ppo.clip,
                                                          value_coef=cfg.ppo.value_coef))
    opts = make_optimizers(learner.groups, cfg.ppo.lr, cfg.ppo.max_grad_norm)
    train_log = CsvLog(TRAIN_COLUMNS)
    samp_log = CsvLog(["update", "clip", "R", "p", "is_worst", "is_max_p"])
    steps = 0
    update = 0
    moments = RunningMoments.empty(s_dim + f_dim) if cfg.normalize_obs else None
    last_used = np.zeros(policy.K, dtype=np.int64)
    obs = env.reset(sim_rng)
    while steps < cfg.steps:
        snapshot = copy.deepcopy(policy)
        traj, obs = rollout(env, policy, cfg.ppo.horizon, policy_rng, obs)
        steps += traj.n_steps
        codes = traj.extras["code"].ravel()
        policy.codebook.usage += np.bincount(codes, minlength=policy.K)
        batch = flatten(traj, cfg.ppo)
        try:
            d = ppo_update(learner, batch, cfg.ppo, opts, policy_rng)
        except TrainingError as exc:
            exc.last_good = snapshot  # type: ignore[attr-defined]
            raise
        update += 1
        last_used[np.unique(codes)] = update
        if cfg.restart_dead_after > 0:
            restart_dead_codes(policy, batch["obs"], last_used, update, cfg.restart_dead_after,
                               opts["codebook"], policy_rng)
        if moments is not None:
            moments.update(traj.obs)
            policy.obs_shift, policy.obs_scale = moments.mean.copy(), moments.std
        probs = sampler.refresh()
        worst = np.flatnonzero(sampler.rewards == sampler.rewards.min())
        for c in range(len(dataset)):
            samp_log.add(update=update, clip=c, R=float(sampler.rewards[c]), p=float(probs[c]),
                         is_worst=int(c in worst), is_max_p=int(probs[c] >= probs.max()))
        eps = env.finished
        train_log.add(update=update, steps=steps, reward_mean=float(traj.rewards.mean()),
                      episodes=len(eps), loss=d["loss"], surrogate=d["surrogate"],
                      value_loss=d["value_loss"], codebook_loss=d["codebook_loss"],
                      commitment_loss=d["commitment_loss"], clip_frac=d["clip_frac"],
                      codes_used=int((np.bincount(codes, minlength=policy.K) > 0).sum()))
        env.finished = []
        if callback is not None:
            callback(update, steps, policy, d, traj)
    return ImitationResult(policy, sampler, train_log, samp_log, steps, opts)


def restart_dead_codes(policy: ImitationPolicy, obs: np.ndarray, last_used: np.ndarray, update: int,
                       patience: int, opt, rng: np.random.Generator) -> np.ndarray:
    """Move codes idle for ``patience`` updates onto encoder outputs of random batch states.

    Their optimizer moments are cleared.  Returns the re-seeded code indices.
    """
    dead = np.flatnonzero(update - last_used >= patience)
    if len(dead) == 0:
        return dead
    rows = rng.choice(len(obs), size=len(dead), replace=len(dead) > len(obs))
    z_e, _ = mlp_forward(policy.encoder, policy.normalize(obs[rows]))
    policy.codebook.codes[dead] = z_e
    opt.m[0][dead] = 0.0
    opt.v[0][dead] = 0.0
    last_used[dead] = update
    return dead


# ------------------------------------------------------------------ evaluation
def evaluate_tracking(policy: ImitationPolicy, dataset: MotionDataset, starts_per_clip: int = 1,
                      weights: TrackingWeights = TrackingWeights()) -> np.ndarray:
    """Deterministic per-clip mean tracking reward over whole clips.

    Each clip is played from frame 0 (plus evenly spaced extra starts); steps
    after an early termination count as zero reward.
    """
    jobs = []
    for c, clip in enumerate(dataset.clips):
        for j in range(starts_per_clip):
            jobs.append((c, (j * (len(clip) - 1)) // starts_per_clip))
    sampler = ClipSampler(len(dataset))
    env = ImitationEnv(dataset, sampler, len(jobs), weights=weights)
    env.clip[:] = [c for c, _ in jobs]
    env.t[:] = [t for _, t in jobs]
    env.start[:] = env.t
    frames = np.stack([dataset.clips[c].frames[t] for c, t in jobs])
    env.world.set_character(0, frames)
    total = np.zeros(len(jobs))
    span = np.array([len(dataset.clips[c]) - 1 - t for c, t in jobs], dtype=np.float64)
    alive = np.ones(len(jobs), dtype=np.bool_)
    low = np.zeros(len(jobs), dtype=np.int64)
    lengths = np.array([len(dataset.clips[c]) for c, _ in jobs])
    for _ in range(int(span.max())):
        obs = env._obs()
        a = policy.act(obs, None, deterministic=True)["action"]
        diverged = env.drive([a])
        env.t = np.minimum(env.t + 1, lengths - 1)
        r = env.tracking()
        r[diverged] = 0.0
        total += np.where(alive, r, 0.0)
        low = np.where(r < env.episode.low_reward, low + 1, 0)
        alive &= ~(diverged | env.fallen(0) | (low >= env.episode.low_reward_steps))
        alive &= env.t < lengths - 1
    per_job = total / span
    out = np.zeros(len(dataset))
    for c in range(len(dataset)):
        out[c] = per_job[[i for i, (cc, _) in enumerate(jobs) if cc == c]].mean()
    return out
