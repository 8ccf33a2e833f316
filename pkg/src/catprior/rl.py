"""PPO machinery shared by every training stage: GAE, the clipped surrogate,
fixed-horizon rollouts over vectorized environments and the minibatch update
loop.  Stage-specific losses plug in through a ``Learner`` object.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from catprior.errors import SimulationDiverged, TrainingError
from catprior.nn import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    gamma: float = 0.95
    lam: float = 0.95
    clip: float = 0.1
    minibatch: int = 1024
    epochs: int = 4
    horizon: int = 64
    lr: float = 3e-4
    value_coef: float = 0.5
    max_grad_norm: float | None = 1.0

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise TrainingError("gamma and lambda must lie in [0, 1]")
        if self.clip <= 0:
            raise TrainingError("clip threshold must be positive")


# full-scale values, kept as presets
FULL_IMITATION = dict(gamma=0.95, lam=0.95, clip=0.1, minibatch=16384, lr=5e-5)
FULL_TASK = dict(gamma=0.95, lam=0.95, clip=0.1, minibatch=16384, lr=1e-5)


def gae(rewards, values, dones, bootstrap, gamma: float, lam: float):
    """Generalized advantage estimation over a (T, ...) fragment.

    ``dones[t]`` marks that the episode ended after step t, so neither the
    next value nor later advantages leak across the boundary.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    notdone = 1.0 - np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    next_value = np.asarray(bootstrap, dtype=np.float64)
    for t in reversed(range(T)):
        delta = rewards[t] + gamma * next_value * notdone[t] - values[t]
        last = delta + gamma * lam * notdone[t] * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-12 else 1.0)


def clipped_surrogate(logp_new, logp_old, adv, clip: float):
    """Mean clipped surrogate objective and its gradient wrt ``logp_new``."""
    ratio = np.exp(logp_new - logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    use_unclipped = unclipped <= clipped
    n = len(adv)
    obj = np.minimum(unclipped, clipped).mean()
    grad = np.where(use_unclipped, unclipped, 0.0) / n
    clip_frac = float((~use_unclipped).mean()) if n else 0.0
    return obj, grad, {"ratio_mean": float(ratio.mean()), "clip_frac": clip_frac}


def value_loss(pred, returns):
    """Mean squared error and its gradient wrt ``pred``."""
    diff = pred - returns
    return float((diff * diff).mean()), 2.0 * diff / len(diff)


# ------------------------------------------------------------------ rollouts
class VecEnv(Protocol):
    n_envs: int

    def reset(self, rng: np.random.Generator) -> np.ndarray: ...

    def step(self, actions, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]: ...


class Policy(Protocol):
    def act(self, obs: np.ndarray, rng: np.random.Generator) -> dict: ...

    def value(self, obs: np.ndarray) -> np.ndarray: ...


@dataclass
class Trajectory:
    obs: np.ndarray  # (H, E, obs_dim)
    actions: np.ndarray
    logp: np.ndarray  # (H, E)
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    bootstrap: np.ndarray  # (E,)
    extras: dict = field(default_factory=dict)
    infos: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return int(np.prod(self.rewards.shape))


def rollout(env, policy, horizon: int, rng: np.random.Generator, obs: np.ndarray | None = None):
    """Collect ``horizon`` ticks from every env.  Returns (trajectory, last obs).

    Envs reset themselves when an episode ends; the returned observation after
    a done flag already belongs to the next episode.
    """
    if obs is None:
        obs = env.reset(rng)
    buf: dict[str, list] = {k: [] for k in ("obs", "actions", "logp", "values", "rewards", "dones")}
    extras: dict[str, list] = {}
    infos = []
    for _ in range(horizon):
        out = policy.act(obs, rng)
        buf["obs"].append(obs)
        buf["actions"].append(out["action"])
        buf["logp"].append(out["logp"])
        buf["values"].append(out["value"])
        for k, v in out.get("extras", {}).items():
            extras.setdefault(k, []).append(v)
        obs, reward, done, info = env.step(out["action"], rng)
        if not np.all(np.isfinite(reward)):
            raise SimulationDiverged("non-finite reward from environment")
        buf["rewards"].append(np.asarray(reward, dtype=np.float64))
        buf["dones"].append(np.asarray(done, dtype=np.bool_))
        infos.append(info)
    traj = Trajectory(
        obs=np.stack(buf["obs"]), actions=np.stack(buf["actions"]), logp=np.stack(buf["logp"]),
        values=np.stack(buf["values"]), rewards=np.stack(buf["rewards"]),
        dones=np.stack(buf["dones"]), bootstrap=policy.value(obs),
        extras={k: np.stack(v) for k, v in extras.items()}, infos=infos,
    )
    return traj, obs


# ------------------------------------------------------------------ update
class Learner(Protocol):
    """Stage-specific loss.  ``groups`` maps names to parameter array lists."""

    groups: dict

    def loss_and_grads(self, mb: dict) -> tuple[float, dict, dict]: ...


def flatten(traj: Trajectory, cfg: PpoConfig) -> dict:
    adv, ret = gae(traj.rewards, traj.values, traj.dones, traj.bootstrap, cfg.gamma, cfg.lam)
    n = traj.n_steps
    batch = {
        "obs": traj.obs.reshape(n, -1),
        "actions": traj.actions.reshape((n,) + traj.actions.shape[2:]),
        "logp_old": traj.logp.reshape(n),
        "values_old": traj.values.reshape(n),
        "returns": ret.reshape(n),
        "adv": normalize_advantages(adv.reshape(n)),
    }
    for k, v in traj.extras.items():
        batch[k] = v.reshape((n,) + v.shape[2:])
    return batch


def make_optimizers(groups: dict, lr: float, max_grad_norm: float | None) -> dict:
    return {k: AdamState.for_arrays(v, lr, max_grad_norm=max_grad_norm) for k, v in groups.items()}


def ppo_update(learner, batch: dict, cfg: PpoConfig, optimizers: dict, rng: np.random.Generator):
    """Epochs of shuffled minibatch steps.  Returns mean diagnostics."""
    n = len(batch["adv"])
    mb = min(cfg.minibatch, n)
    diags: dict[str, list] = {}
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n - mb + 1, mb):
            idx = perm[s:s + mb]
            sub = {k: v[idx] for k, v in batch.items()}
            loss, grads, d = learner.loss_and_grads(sub)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss; diagnostics: {d}")
            for name, g in grads.items():
                adam_step(learner.groups[name], g, optimizers[name])
            d = dict(d, loss=loss)
            for k, v in d.items():
                diags.setdefault(k, []).append(float(v))
    return {k: float(np.mean(v)) for k, v in diags.items()}


@dataclass
class RunningMoments:
    """Streaming per-feature mean and variance (parallel-merge form)."""

    count: float
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def empty(cls, dim: int) -> "RunningMoments":
        return cls(0.0, np.zeros(dim), np.zeros(dim))

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1, len(self.mean))
        n = len(x)
        if n == 0:
            return
        mu = x.mean(axis=0)
        m2 = ((x - mu) ** 2).sum(axis=0)
        total = self.count + n
        delta = mu - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + m2 + delta ** 2 * (self.count * n / total)
        self.count = total

    @property
    def std(self) -> np.ndarray:
        var = self.m2 / self.count if self.count > 0 else np.ones_like(self.m2)
        return np.sqrt(var + 1e-8)


class CsvLog:
    """Append-only CSV with a fixed header, written on :meth:`flush`."""

    def __init__(self, columns: list[str]):
        self.columns = list(columns)
        self.rows: list[list] = []

    def add(self, **row) -> None:
        self.rows.append([row.get(c, "") for c in self.columns])

    def text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.text())
