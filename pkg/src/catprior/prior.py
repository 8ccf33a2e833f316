"""State-conditional categorical prior over codes: distillation from the
imitation encoder, then count-based rebalancing against dataset frames.

Latent environments
-------------------
Both stages drive an environment whose action is a code index.
:class:`DecoderEnv` runs the simulator under the frozen decoder;
:class:`KinematicLatentEnv` is a small synthetic stand-in whose codes move
directly between dataset frames, used for fast and exactly measurable
checks of the distillation and rebalancing machinery.
"""

from __future__ import annotations

import collections
import copy
import math
from dataclasses import dataclass, field

import numpy as np

from catprior.envs import CharacterEnv
from catprior.errors import ConfigurationError, TrainingError
from catprior.motion import MotionDataset, future_info
from catprior.nn import (
    AdamState, ParamSet, adam_step, backward, categorical_stats, entropy_grad, kl_grads, mlp_forward,
    sample_categorical, softmax,
)
from catprior.rl import CsvLog, PpoConfig, clipped_surrogate, flatten, make_optimizers, ppo_update, rollout, value_loss
from catprior.tracking import TrackingWeights, joint_pos_term, key_term

# ------------------------------------------------------------------ networks


@dataclass
class PriorNet:
    params: ParamSet

    @classmethod
    def init(cls, state_dim: int, k: int, hidden, rng) -> "PriorNet":
        return cls(ParamSet.init([state_dim, *hidden, k], rng, out_scale=0.01))

    @property
    def K(self) -> int:
        return self.params.n_out

    def logits(self, obs) -> np.ndarray:
        return mlp_forward(self.params, obs)[0]

    def probs(self, obs) -> np.ndarray:
        return softmax(self.logits(obs))


def distill_loss(index, logits):
    """Mean negative log-likelihood of the encoder's code and its logit gradient.

    With a one-hot encoder posterior this equals the KL from the posterior to
    the prior, since the posterior has zero entropy.
    """
    index = np.atleast_1d(np.asarray(index))
    logits = np.atleast_2d(logits)
    if np.any(index < 0) or np.any(index >= logits.shape[-1]):
        raise ConfigurationError("code index out of range")
    st = categorical_stats(logits)
    n = len(index)
    nll = -st["log_probs"][np.arange(n), index]
    grad = st["probs"].copy()
    grad[np.arange(n), index] -= 1.0
    return float(nll.mean()), grad / n


def posterior_kl(posterior, logits) -> np.ndarray:
    """KL(posterior || softmax(logits)) for explicit probability rows (0 log 0 = 0)."""
    p = np.atleast_2d(posterior)
    logq = categorical_stats(np.atleast_2d(logits))["log_probs"]
    safe = np.where(p > 0, p, 1.0)
    return np.where(p > 0, p * (np.log(safe) - logq), 0.0).sum(axis=-1)


# ------------------------------------------------------------------ matching & counts
@dataclass
class MatchConfig:
    threshold: float = 0.5
    weights: TrackingWeights = TrackingWeights()


def frame_similarity(frames, keys_rel, dataset: MotionDataset, w: TrackingWeights = TrackingWeights()):
    """(E, N) similarity 0.5 * joint-position term + 0.5 * key-point term."""
    J = dataset.model.n_joints
    q = np.asarray(frames)[:, None, 3:3 + J]
    ref_q = dataset.all_frames[None, :, 3:3 + J]
    jp = joint_pos_term(q, ref_q, w)
    k = key_term(np.asarray(keys_rel)[:, None], dataset.all_keys_rel[None], w)
    return 0.5 * jp + 0.5 * k


def match_frame(frames, keys_rel, dataset: MotionDataset, threshold: float = 0.5,
                w: TrackingWeights = TrackingWeights()):
    """Best flat frame index per state, or -1 when below ``threshold``.

    Ties resolve to the lowest (clip, frame).  Returns (indices, similarities).
    """
    sim = frame_similarity(np.atleast_2d(frames), np.asarray(keys_rel).reshape(-1, *dataset.all_keys_rel.shape[1:]),
                           dataset, w)
    best = np.argmax(sim, axis=1)
    score = sim[np.arange(len(best)), best]
    return np.where(score >= threshold, best, -1), score


@dataclass
class PseudoCountTable:
    """Counts of matched dataset frames over the most recent ``window`` matches."""

    n_frames: int
    window: int = 100_000
    scale: float | None = None  # defaults to 2 ln(window)
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]
    ring: collections.deque = field(default=None)  # type: ignore[assignment]
    total: int = 0

    def __post_init__(self):
        if self.scale is None:
            self.scale = 2.0 * math.log(self.window)
        if self.counts is None:
            self.counts = np.zeros(self.n_frames, dtype=np.int64)
        if self.ring is None:
            self.ring = collections.deque()

    def consistent(self) -> bool:
        ref = np.bincount(np.fromiter(self.ring, dtype=np.int64, count=len(self.ring)),
                          minlength=self.n_frames)
        return bool(np.array_equal(ref, self.counts)) and len(self.ring) == min(self.total, self.window)

    def reward_for(self, count):
        return np.sqrt(self.scale / np.asarray(count, dtype=np.float64))


def count_and_reward(table: PseudoCountTable, match: int | None) -> float:
    """Record one match and return sqrt(scale / count); no match gives 0."""
    if match is None or match < 0:
        return 0.0
    table.counts[match] += 1
    table.ring.append(int(match))
    table.total += 1
    if len(table.ring) > table.window:
        old = table.ring.popleft()
        table.counts[old] -= 1
    return float(math.sqrt(table.scale / table.counts[match]))


# ------------------------------------------------------------------ latent environments
class KinematicLatentEnv:
    """Synthetic two-skill latent environment over dataset frames.

    The state is a (clip, frame) pair.  Codes are split into groups: the
    first group advances clip 0 by one frame (entering it at the current
    phase when coming from elsewhere), the second does the same for clip 1,
    and the remaining codes produce an unnatural pose that matches nothing.
    Observations are the frame with the root x removed.
    """

    def __init__(self, dataset: MotionDataset, n_envs: int, k: int = 8,
                 groups: tuple[int, int] = (3, 3), episode_length: int = 200):
        if len(dataset) != 2:
            raise ConfigurationError("the synthetic latent env needs exactly two clips")
        self.dataset = dataset
        self.n_envs = n_envs
        self.k = k
        self.groups = groups
        self.episode_length = episode_length
        self.clip = np.zeros(n_envs, dtype=np.int64)  # 2 = garbage pose
        self.t = np.zeros(n_envs, dtype=np.int64)
        self.age = np.zeros(n_envs, dtype=np.int64)
        self.garbage_frame = dataset.clips[0].frames[0].copy()
        self.garbage_frame[3:3 + dataset.model.n_joints] += 1.0
        self.garbage_keys = dataset.keys_rel[0][0] + 0.5

    def code_target(self, codes) -> np.ndarray:
        a, b = self.groups
        return np.where(codes < a, 0, np.where(codes < a + b, 1, 2))

    def frames(self, i: int = 0):
        fr = np.empty((self.n_envs, self.dataset.all_frames.shape[1]))
        keys = np.empty((self.n_envs,) + self.dataset.all_keys_rel.shape[1:])
        for e in range(self.n_envs):
            if self.clip[e] == 2:
                fr[e] = self.garbage_frame
                keys[e] = self.garbage_keys
            else:
                c, t = int(self.clip[e]), int(self.t[e])
                fr[e] = self.dataset.clips[c].frames[t]
                keys[e] = self.dataset.keys_rel[c][t]
        return fr, keys

    def true_index(self) -> np.ndarray:
        """Flat dataset frame index of each env's state (-1 for the garbage pose)."""
        return np.array([-1 if c == 2 else self.dataset.flat_index(int(c), int(t))
                         for c, t in zip(self.clip, self.t)])

    def observe_state(self) -> np.ndarray:
        fr, _ = self.frames()
        obs = fr[:, 1:].copy()
        onehot = np.eye(3)[self.clip]  # lets the garbage pose stand out clearly
        return np.concatenate([obs, onehot[:, 2:]], axis=1)

    @property
    def obs_dim(self) -> int:
        return self.dataset.all_frames.shape[1]

    def reset_envs(self, envs, rng) -> None:
        for e in envs:
            c = int(rng.integers(0, 2))
            self.clip[e] = c
            self.t[e] = int(rng.integers(0, len(self.dataset.clips[c])))
            self.age[e] = 0

    def reset(self, rng) -> np.ndarray:
        self.reset_envs(range(self.n_envs), rng)
        return self.observe_state()

    def advance(self, codes) -> None:
        target = self.code_target(np.asarray(codes))
        for e in range(self.n_envs):
            tgt = int(target[e])
            if tgt == 2:
                self.clip[e] = 2  # phase t kept so the env can re-enter a clip
                continue
            n = len(self.dataset.clips[tgt])
            self.t[e] = (self.t[e] + 1) % n if self.clip[e] == tgt else self.t[e] % n
            self.clip[e] = tgt
        self.age += 1

    def step_codes(self, codes, rng):
        self.advance(codes)
        done = self.age >= self.episode_length
        return done


class DecoderEnv(CharacterEnv):
    """Simulated character driven by codes through the frozen decoder's mean action."""

    def __init__(self, policy, dataset: MotionDataset, n_envs: int, hold: int = 1,
                 episode_length: int = 300, physics=None):
        super().__init__(dataset.model, n_envs, physics=physics)
        self.policy = policy
        self.dataset = dataset
        self.hold = hold
        self.episode_length = episode_length
        self.age = np.zeros(n_envs, dtype=np.int64)

    @property
    def obs_dim(self) -> int:
        return self.policy.state_dim

    def observe_state(self) -> np.ndarray:
        return self.observe(0)

    def reset_envs(self, envs, rng) -> None:
        envs = np.asarray(list(envs), dtype=np.int64)
        if len(envs) == 0:
            return
        idx = rng.integers(0, self.dataset.n_frames, size=len(envs))
        self.world.set_character(0, self.dataset.all_frames[idx], envs=envs)
        self.age[envs] = 0

    def reset(self, rng) -> np.ndarray:
        self.reset_envs(range(self.n_envs), rng)
        return self.observe_state()

    def step_codes(self, codes, rng):
        diverged = np.zeros(self.n_envs, dtype=np.bool_)
        for _ in range(self.hold):
            s = self.observe_state()
            a = self.policy.decode_mean(s, np.asarray(codes, dtype=np.int64))
            diverged |= self.drive([a])
        self.age += 1
        return diverged | self.fallen(0) | (self.age >= self.episode_length)


# ------------------------------------------------------------------ distillation
class SimEncoderLabeler:
    """Labels visited states with the frozen imitation encoder and a random future."""

    def __init__(self, policy, dataset: MotionDataset):
        self.policy = policy
        self.dataset = dataset

    def __call__(self, env, obs, rng) -> np.ndarray:
        fr, _ = env.frames(0)
        n = len(obs)
        clips = rng.integers(0, len(self.dataset), size=n)
        f = np.empty((n, self.policy.future_dim))
        for i, c in enumerate(clips):
            t = int(rng.integers(0, len(self.dataset.clips[c]) - 1))
            f[i] = future_info(self.dataset, int(c), np.array([t]), fr[i:i + 1])[0]
        return self.policy.encode(np.concatenate([obs, f], axis=1)).index


@dataclass
class DistillConfig:
    iterations: int = 200
    horizon: int = 16
    lr: float = 1e-3
    epochs: int = 1


def distill_iteration(prior: PriorNet, env, labeler, opt: AdamState, cfg: DistillConfig,
                      rng: np.random.Generator, obs=None):
    """One on-prior rollout fragment, labelled by the encoder, then NLL steps.

    Returns (mean loss, last observation).
    """
    if obs is None:
        obs = env.reset(rng)
    xs, ys = [], []
    for _ in range(cfg.horizon):
        labels = labeler(env, obs, rng)
        xs.append(obs)
        ys.append(labels)
        codes = sample_categorical(prior.logits(obs), rng)
        done = env.step_codes(codes, rng)
        env.reset_envs(np.flatnonzero(done), rng)
        obs = env.observe_state()
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    losses = []
    for _ in range(cfg.epochs):
        logits, tr = mlp_forward(prior.params, x)
        loss, g = distill_loss(y, logits)
        if not np.isfinite(loss):
            raise TrainingError("non-finite distillation loss")
        grads, _ = backward(tr, g)
        adam_step(prior.params.arrays(), grads, opt)
        losses.append(loss)
    return float(np.mean(losses)), obs


def distill_prior(prior: PriorNet, env, labeler, cfg: DistillConfig, rng, callback=None):
    opt = AdamState.for_arrays(prior.params.arrays(), cfg.lr)
    log = CsvLog(["iteration", "loss"])
    obs = None
    for it in range(cfg.iterations):
        loss, obs = distill_iteration(prior, env, labeler, opt, cfg, rng, obs)
        log.add(iteration=it, loss=loss)
        if callback is not None:
            callback(it, loss, prior)
    return prior, log, opt


# ------------------------------------------------------------------ shifting
class CategoricalActor:
    """PPO policy over codes with a separate value network (shared by prior and upper stages)."""

    def __init__(self, logits_net: ParamSet, critic: ParamSet):
        self.net = logits_net
        self.critic = critic

    def act(self, obs, rng, deterministic: bool = False) -> dict:
        logits = mlp_forward(self.net, obs)[0]
        if deterministic:
            codes = np.argmax(logits, axis=-1)
        else:
            codes = sample_categorical(logits, rng)
        logp = categorical_stats(logits)["log_probs"][np.arange(len(codes)), codes]
        return {"action": codes, "logp": logp, "value": self.value(obs)}

    def value(self, obs) -> np.ndarray:
        return mlp_forward(self.critic, obs)[0][:, 0]


def categorical_ppo_loss(net: ParamSet, critic: ParamSet, mb: dict, clip: float, value_coef: float,
                         entropy_coef: float = 0.0, kl_coef: float = 0.0, ref_logits=None):
    """Clipped surrogate on a categorical policy with optional KL-to-reference and entropy terms.

    loss = -surrogate + kl_coef * KL(pi || ref) - entropy_coef * H(pi) + value_coef * mse
    """
    obs = mb["obs"]
    n = len(obs)
    logits, tr = mlp_forward(net, obs)
    st = categorical_stats(logits, ref_logits) if ref_logits is not None else categorical_stats(logits)
    a = mb["actions"].astype(np.int64)
    logp = st["log_probs"][np.arange(n), a]
    surr, g_logp, d = clipped_surrogate(logp, mb["logp_old"], mb["adv"], clip)
    # d logp[a] / d logits = onehot(a) - p
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), a] = 1.0
    g_logits = -g_logp[:, None] * (onehot - st["probs"])
    ent = float(st["entropy"].mean())
    g_logits -= entropy_coef * entropy_grad(logits) / n
    kl = 0.0
    if ref_logits is not None:
        kl = float(st["kl"].mean())
        gk, _ = kl_grads(logits, ref_logits)
        g_logits += kl_coef * gk / n
    grads, _ = backward(tr, g_logits)
    v, vtr = mlp_forward(critic, obs)
    vl, g_v = value_loss(v[:, 0], mb["returns"])
    vgrads, _ = backward(vtr, value_coef * g_v[:, None])
    loss = -surr + kl_coef * kl - entropy_coef * ent + value_coef * vl
    diags = dict(d, surrogate=float(surr), kl=kl, entropy=ent, value_loss=vl)
    return float(loss), {"policy": grads, "value": vgrads}, diags


class PriorShiftLearner:
    def __init__(self, actor: CategoricalActor, cfg: PpoConfig):
        self.actor = actor
        self.cfg = cfg
        self.groups = {"policy": actor.net.arrays(), "value": actor.critic.arrays()}

    def loss_and_grads(self, mb):
        return categorical_ppo_loss(self.actor.net, self.actor.critic, mb, self.cfg.clip, self.cfg.value_coef)


class CountRewardEnv:
    """Wraps a latent env: reward = pseudo-count reward of the next state's matched frame."""

    def __init__(self, env, dataset: MotionDataset, table: PseudoCountTable, match: MatchConfig):
        self.env = env
        self.dataset = dataset
        self.table = table
        self.match = match
        self.n_envs = env.n_envs

    def reset(self, rng):
        return self.env.reset(rng)

    def step(self, codes, rng):
        done = self.env.step_codes(codes, rng)
        fr, keys = self.env.frames(0)
        idx, _ = match_frame(fr, keys, self.dataset, self.match.threshold, self.match.weights)
        reward = np.array([count_and_reward(self.table, int(i)) for i in idx])
        self.env.reset_envs(np.flatnonzero(done), rng)
        return self.env.observe_state(), reward, done, {"match": idx}


@dataclass
class ShiftConfig:
    steps: int = 200_000
    n_envs: int = 64
    window: int = 100_000
    match: MatchConfig = field(default_factory=MatchConfig)
    ppo: PpoConfig = field(default_factory=lambda: PpoConfig(lr=3e-4, minibatch=1024))
    critic_hidden: tuple[int, ...] = (64, 64)


def shift_prior(prior: PriorNet, env, dataset: MotionDataset, cfg: ShiftConfig, rng,
                callback=None):
    """PPO fine-tuning of the prior with the pseudo-count reward only.  Returns a new PriorNet."""
    shifted = PriorNet(prior.params.copy())
    critic = ParamSet.init([prior.params.n_in, *cfg.critic_hidden, 1], rng)
    actor = CategoricalActor(shifted.params, critic)
    table = PseudoCountTable(dataset.n_frames, window=cfg.window)
    wrapped = CountRewardEnv(env, dataset, table, cfg.match)
    learner = PriorShiftLearner(actor, cfg.ppo)
    opts = make_optimizers(learner.groups, cfg.ppo.lr, cfg.ppo.max_grad_norm)
    log = CsvLog(["update", "steps", "reward_mean", "match_rate", "entropy", "loss"])
    obs = wrapped.reset(rng)
    steps = 0
    update = 0
    while steps < cfg.steps:
        snapshot = copy.deepcopy(shifted)
        traj, obs = rollout(wrapped, actor, cfg.ppo.horizon, rng, obs)
        steps += traj.n_steps
        try:
            d = ppo_update(learner, flatten(traj, cfg.ppo), cfg.ppo, opts, rng)
        except TrainingError as exc:
            exc.last_good = snapshot  # type: ignore[attr-defined]
            raise
        update += 1
        matches = np.stack([i["match"] for i in traj.infos])
        log.add(update=update, steps=steps, reward_mean=float(traj.rewards.mean()),
                match_rate=float((matches >= 0).mean()), entropy=d["entropy"], loss=d["loss"])
        if callback is not None:
            callback(update, steps, shifted, d)
    return shifted, table, log


class SyntheticEncoder:
    """Frozen stand-in encoder whose labels follow a known state-conditional distribution.

    ``probs_fn(env)`` returns an (E, K) table of code probabilities for the
    envs' current states; labels are drawn from it, ignoring the future.
    """

    def __init__(self, probs_fn):
        self.probs_fn = probs_fn

    def __call__(self, env, obs, rng) -> np.ndarray:
        p = self.probs_fn(env)
        c = np.cumsum(p, axis=1)
        u = rng.random((len(p), 1))
        return np.minimum((u > c).sum(axis=1), p.shape[1] - 1)
