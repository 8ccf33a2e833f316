"""Motion clips: procedural generation, a text file format, future-information
features and prioritized clip sampling.

Frames use the own-frame kinematic layout of :mod:`catprior.sim.world`.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from catprior.errors import ConfigurationError, DataError
from catprior.sim.model import CharacterModel
from catprior.sim.world import FrameLayout, Kinematics, frame_size
from catprior.tracking import wrap_angle

FPS = 30
CLIP_VERSION = 1

# joint order of the shipped biped
TORSO, HIP_L, KNEE_L, ANKLE_L, HIP_R, KNEE_R, ANKLE_R, SHOULDER_L, SHOULDER_R = range(9)
THIGH = 0.42
SHIN = 0.42
ANKLE_HEIGHT = 0.08  # ankle joint above the ground with the sole flat


@dataclass
class MotionClip:
    clip_id: str
    frames: np.ndarray  # (N, 6 + 2J)
    skill: str = ""
    fps: int = FPS
    n_bodies: int = 10

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or len(self.frames) < 2:
            raise DataError(f"clip {self.clip_id}: needs at least 2 frames")
        if not np.all(np.isfinite(self.frames)):
            raise DataError(f"clip {self.clip_id}: non-finite values")
        if self.fps != FPS:
            raise DataError(f"clip {self.clip_id}: fps must be {FPS}, got {self.fps}")
        if (self.frames.shape[1] - 6) % 2:
            raise DataError(f"clip {self.clip_id}: frame width {self.frames.shape[1]} is not 6 + 2J")

    @property
    def n_joints(self) -> int:
        return (self.frames.shape[1] - 6) // 2

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------- generation
@dataclass(frozen=True)
class SkillSpec:
    """Parameters of a procedural skill.  ``kind`` in {idle, punch, walk}."""

    kind: str
    period: float = 2.0
    amplitude: float = 1.0
    speed: float = 0.2
    jitter: float = 0.05  # relative seed-driven parameter variation


SKILLS = {
    "idle": SkillSpec("idle", period=3.0),
    "punch": SkillSpec("punch", period=2.0),
    "walk": SkillSpec("walk", period=1.6, speed=0.2),
}


def _leg_ik(hip, ankle, root_angle):
    """Hip, knee, ankle joint angles placing the ankle with the sole flat."""
    dx = ankle[..., 0] - hip[..., 0]
    dy = ankle[..., 1] - hip[..., 1]
    d = np.minimum(np.hypot(dx, dy), THIGH + SHIN - 1e-6)
    phi = np.arctan2(dx, -dy)  # direction from hip to ankle, measured from straight down
    alpha = np.arccos(np.clip((d * d + THIGH ** 2 - SHIN ** 2) / (2 * THIGH * d), -1.0, 1.0))
    beta = np.arccos(np.clip((THIGH ** 2 + SHIN ** 2 - d * d) / (2 * THIGH * SHIN), -1.0, 1.0))
    thigh_world = phi + alpha
    knee = -(np.pi - beta)
    shin_world = thigh_world + knee
    return thigh_world - root_angle, knee, -shin_world


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _positions(spec: SkillSpec, t: np.ndarray, rng: np.random.Generator):
    """Root position, root angle and joint angles over times ``t``."""
    jit = 1.0 + spec.jitter * rng.uniform(-1.0, 1.0, size=4)
    n = len(t)
    T = spec.period
    w = 2.0 * np.pi / T
    root = np.zeros((n, 2))
    root_angle = np.zeros(n)
    q = np.zeros((n, 9))
    stance = 0.06
    if spec.kind == "idle":
        root[:, 1] = 0.86 + 0.015 * jit[0] * spec.amplitude * np.sin(w * t)
        root[:, 0] = 0.01 * jit[1] * spec.amplitude * np.sin(w * t + 0.5)
        q[:, TORSO] = 0.05 * jit[2] * spec.amplitude * np.sin(w * t)
        q[:, SHOULDER_L] = 0.10 * jit[3] * spec.amplitude * np.sin(w * t + 1.0)
        q[:, SHOULDER_R] = -0.10 * jit[3] * spec.amplitude * np.sin(w * t + 1.0)
        feet = (np.array([stance, 0.0]), np.array([-stance, 0.0]))
        ankles = [np.broadcast_to(f + [0.0, ANKLE_HEIGHT], (n, 2)) for f in feet]
    elif spec.kind == "punch":
        root[:, 1] = 0.84
        half = T / 2.0
        ph = (t % T) / half  # in [0, 2): first half right jab, second half left jab
        right = np.where(ph < 1.0, np.sin(np.pi * np.clip(ph, 0, 1)) ** 2, 0.0)
        left = np.where(ph >= 1.0, np.sin(np.pi * np.clip(ph - 1.0, 0, 1)) ** 2, 0.0)
        a = 1.45 * jit[0] * spec.amplitude
        q[:, SHOULDER_R] = 0.3 + a * right - 0.2 * left
        q[:, SHOULDER_L] = 0.3 + a * left - 0.2 * right
        q[:, TORSO] = -0.12 * jit[1] * (right + left)
        root[:, 0] = 0.03 * jit[2] * (right + left)
        feet = (np.array([0.14, 0.0]), np.array([-0.12, 0.0]))
        ankles = [np.broadcast_to(f + [0.0, ANKLE_HEIGHT], (n, 2)) for f in feet]
    elif spec.kind == "walk":
        stride = spec.speed * T * jit[0]
        root[:, 0] = spec.speed * jit[0] * t
        root[:, 1] = 0.85 + 0.01 * np.cos(2 * w * t)
        duty = 0.7
        ankles = []
        for offset in (0.0, 0.5):
            ph = ((t / T) + offset) % 1.0
            in_stance = ph < duty
            # relative foot x: moves back at walking speed in stance, swings forward otherwise
            s = np.where(in_stance, ph / duty, (ph - duty) / (1.0 - duty))
            rel_x = np.where(in_stance, stride / 2 - stride * s, -stride / 2 + stride * _smoothstep(s))
            lift = np.where(in_stance, 0.0, 0.06 * np.sin(np.pi * s))
            ax = root[:, 0] + rel_x
            ankles.append(np.stack([ax, ANKLE_HEIGHT + lift], axis=-1))
        q[:, TORSO] = 0.04
        q[:, SHOULDER_L] = 0.25 * jit[1] * np.sin(w * t)
        q[:, SHOULDER_R] = -0.25 * jit[1] * np.sin(w * t)
    else:
        raise ConfigurationError(f"unknown skill {spec.kind!r}; known: {sorted(SKILLS)}")
    for side, ankle in ((0, ankles[0]), (1, ankles[1])):
        hip, knee, ank = _leg_ik(root, ankle, root_angle)
        base = HIP_L if side == 0 else HIP_R
        q[:, base] = hip
        q[:, base + 1] = knee
        q[:, base + 2] = ank
    return root, root_angle, q


def procedural_generate(spec: SkillSpec | str, duration: float, seed: int,
                        clip_id: str | None = None) -> MotionClip:
    """Kinematic clip of ``duration`` seconds; velocities are forward differences."""
    if isinstance(spec, str):
        if spec not in SKILLS:
            raise ConfigurationError(f"unknown skill {spec!r}; known: {sorted(SKILLS)}")
        spec = SKILLS[spec]
    n = int(round(duration * FPS))
    if n < 2:
        raise ConfigurationError("duration must cover at least 2 frames")
    rng = np.random.default_rng(seed)
    t = np.arange(n + 1) / FPS  # one extra frame for the last forward difference
    root, root_angle, q = _positions(spec, t, rng)
    pos = np.concatenate([root, root_angle[:, None], q], axis=1)
    vel = (pos[1:] - pos[:-1]) * FPS
    frames = np.concatenate([pos[:-1], vel], axis=1)
    return MotionClip(clip_id or f"{spec.kind}_{seed}", frames, skill=spec.kind)


def default_clips(seed: int = 0, skills=("idle", "punch", "walk"), duration: float = 4.0):
    return [procedural_generate(s, duration, seed + i, clip_id=f"{s}_{i:02d}")
            for i, s in enumerate(skills)]


# ---------------------------------------------------------------- file format
def save_clip(clip: MotionClip, path: str | Path) -> None:
    lines = [
        f"catprior-clip {CLIP_VERSION}",
        f"id {clip.clip_id}",
        f"skill {clip.skill or '-'}",
        f"joints {clip.n_joints}",
        f"bodies {clip.n_bodies}",
        f"fps {clip.fps}",
        f"frames {len(clip)}",
    ]
    lines += [" ".join(repr(float(v)) for v in row) for row in clip.frames]
    Path(path).write_text("\n".join(lines) + "\n")


def load_clip(path: str | Path, model: CharacterModel | None = None) -> MotionClip:
    text = Path(path).read_text()
    lines = text.splitlines()
    header: dict[str, str] = {}
    keys = ["id", "skill", "joints", "bodies", "fps", "frames"]
    if not lines or not lines[0].startswith("catprior-clip "):
        raise DataError(f"{path}:1: missing clip header")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise DataError(f"{path}:1: malformed version") from None
    if version != CLIP_VERSION:
        raise DataError(f"{path}:1: clip version {version} not supported (expected {CLIP_VERSION})")
    for i, key in enumerate(keys, start=2):
        if i > len(lines):
            raise DataError(f"{path}:{i}: truncated header")
        tok = lines[i - 1].split(maxsplit=1)
        if len(tok) != 2 or tok[0] != key:
            raise DataError(f"{path}:{i}: expected '{key} <value>'")
        header[key] = tok[1]
    try:
        J, B, fps, N = (int(header[k]) for k in ("joints", "bodies", "fps", "frames"))
    except ValueError as exc:
        raise DataError(f"{path}: malformed header value ({exc})") from None
    if model is not None and (J != model.n_joints or B != model.n_bodies):
        raise DataError(
            f"{path}: clip has {J} joints / {B} bodies but the model has "
            f"{model.n_joints} joints / {model.n_bodies} bodies"
        )
    width = frame_size(J)
    body = lines[len(keys) + 1:]
    if len(body) != N:
        raise DataError(f"{path}:{len(lines) + 1}: expected {N} frame lines, found {len(body)}")
    frames = np.empty((N, width))
    for i, line in enumerate(body):
        lineno = len(keys) + 2 + i
        tok = line.split()
        if len(tok) != width:
            raise DataError(f"{path}:{lineno}: expected {width} values, got {len(tok)}")
        try:
            frames[i] = [float(v) for v in tok]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    skill = "" if header["skill"] == "-" else header["skill"]
    return MotionClip(header["id"], frames, skill=skill, fps=fps, n_bodies=B)


def save_manifest(entries: list[tuple[str, str]], path: str | Path) -> None:
    Path(path).write_text("".join(f"{p} {label}\n" for p, label in entries))


def load_manifest(path: str | Path) -> list[tuple[str, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) != 2:
            raise DataError(f"{path}:{lineno}: expected '<path> <label>'")
        out.append((tok[0], tok[1]))
    return out


# ---------------------------------------------------------------- dataset
class MotionDataset:
    """Clips plus precomputed root-relative key points for every frame."""

    def __init__(self, clips: list[MotionClip], model: CharacterModel):
        if not clips:
            raise ConfigurationError("empty dataset")
        for c in clips:
            if c.n_joints != model.n_joints:
                raise DataError(f"clip {c.clip_id}: {c.n_joints} joints, model has {model.n_joints}")
        self.clips = clips
        self.model = model
        self.layout = FrameLayout(model.n_joints)
        kin = Kinematics(model)
        self.keys_rel = []
        for c in clips:
            keys = kin(c.frames)["keys"]
            self.keys_rel.append(keys - c.frames[:, None, 0:2])
        self.offsets = np.cumsum([0] + [len(c) for c in clips])
        self.all_frames = np.concatenate([c.frames for c in clips])
        self.all_keys_rel = np.concatenate(self.keys_rel)

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def n_frames(self) -> int:
        return int(self.offsets[-1])

    def flat_index(self, clip: int, frame: int) -> int:
        return int(self.offsets[clip] + frame)

    def unflat(self, index: int) -> tuple[int, int]:
        c = int(np.searchsorted(self.offsets, index, side="right") - 1)
        return c, int(index - self.offsets[c])


# ---------------------------------------------------------------- features
def delta_size(n_joints: int, n_keys: int = 4) -> int:
    return 2 * n_joints + 6 + 2 * n_keys


def delta_features(state, target, target_keys_rel, n_joints: int):
    """Target quantities re-expressed relative to the simulated root.

    Layout: [q*, qd*, p*_root - p_root (2), heading difference (1),
    v*_root (2), w*_root (1), target key points in the target root frame (2 per key)].
    Planar roots carry no yaw, so the root frame is the world frame
    translated to the root origin.  Inputs may be batched.
    """
    state = np.asarray(state)
    target = np.asarray(target)
    J = n_joints
    keys = np.asarray(target_keys_rel)
    parts = [
        target[..., 3:3 + J],
        target[..., 6 + J:6 + 2 * J],
        target[..., 0:2] - state[..., 0:2],
        wrap_angle(target[..., 2] - state[..., 2])[..., None],
        target[..., 3 + J:6 + J],
        keys.reshape(keys.shape[:-2] + (-1,)),
    ]
    return np.concatenate(parts, axis=-1)


def future_info(dataset: MotionDataset, clip: int, t, state):
    """Concatenated deltas to frames t+1 and t+2 (clamped to the final frame)."""
    c = dataset.clips[clip]
    if len(c) < 2:
        raise DataError(f"clip {c.clip_id} shorter than 2 frames")
    t = np.asarray(t)
    if np.any(t < 0):
        raise ConfigurationError("t must be non-negative")
    J = c.n_joints
    i1 = np.minimum(t + 1, len(c) - 1)
    i2 = np.minimum(t + 2, len(c) - 1)
    keys = dataset.keys_rel[clip]
    return np.concatenate([
        delta_features(state, c.frames[i1], keys[i1], J),
        delta_features(state, c.frames[i2], keys[i2], J),
    ], axis=-1)


# ---------------------------------------------------------------- sampling
@dataclass
class ClipSampler:
    """Prioritized sampling toward poorly tracked clips: p_i ∝ (1 - R_i)^alpha."""

    n_clips: int
    alpha: float = 3.0
    window: int = 10
    rewards: np.ndarray = field(default=None)  # type: ignore[assignment]
    history: list = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.n_clips < 1:
            raise ConfigurationError("empty dataset")
        if self.rewards is None:
            self.rewards = np.zeros(self.n_clips)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.history is None:
            self.history = [collections.deque(maxlen=self.window) for _ in range(self.n_clips)]

    def probabilities(self) -> np.ndarray:
        r = np.asarray(self.rewards, dtype=np.float64)
        if np.any((r < 0) | (r > 1)):
            raise ConfigurationError("normalized clip rewards must lie in [0, 1]")
        w = (1.0 - r) ** self.alpha
        total = w.sum()
        if total <= 0.0:
            return np.full(len(r), 1.0 / len(r))
        return w / total

    def sample(self, rng: np.random.Generator, size=None):
        return rng.choice(self.n_clips, size=size, p=self.probabilities())

    def record(self, clip: int, mean_reward: float) -> None:
        """Add one finished episode's mean per-step tracking reward."""
        self.history[clip].append(float(np.clip(mean_reward, 0.0, 1.0)))

    def refresh(self) -> np.ndarray:
        for i, h in enumerate(self.history):
            if h:
                self.rewards[i] = float(np.mean(h))
        return self.probabilities()


def prioritized_sample(sampler: ClipSampler, rng: np.random.Generator) -> int:
    return int(sampler.sample(rng))


__all__ = [
    "FPS", "MotionClip", "SkillSpec", "SKILLS", "procedural_generate", "default_clips",
    "save_clip", "load_clip", "save_manifest", "load_manifest", "MotionDataset",
    "delta_size", "delta_features", "future_info", "ClipSampler", "prioritized_sample",
]
