"""Character model definition and its versioned text file format."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from catprior.errors import ConfigurationError, DataError

MODEL_VERSION = 1


@dataclass
class Body:
    name: str
    parent: int  # -1 for the root
    anchor: np.ndarray  # joint position in the parent frame
    com: np.ndarray  # centre of mass in the body frame
    mass: float
    inertia: float  # about the centre of mass
    seg_a: np.ndarray
    seg_b: np.ndarray
    radius: float


@dataclass
class Joint:
    body: int  # child body index; joints are indexed by order of appearance
    lower: float
    upper: float
    kp: float
    kd: float
    torque_limit: float


@dataclass
class CharacterModel:
    bodies: list[Body]
    joints: list[Joint]
    probes: list[tuple[int, np.ndarray, float]]
    keys: list[tuple[str, int, np.ndarray]]
    fall_bodies: list[int]
    gravity: float = 9.81
    ground_height: float = 0.0
    friction: float = 1.0
    standing_height: float = 0.9
    text: str = field(default="", repr=False)

    def __post_init__(self):
        for i, b in enumerate(self.bodies):
            if b.mass <= 0 or b.inertia <= 0:
                raise ConfigurationError(f"body {b.name}: mass and inertia must be positive")
            if i == 0 and b.parent != -1:
                raise ConfigurationError("first body must be the root")
            if i > 0 and not (0 <= b.parent < i):
                raise ConfigurationError(f"body {b.name}: parent must precede it")
        children = [i for i, b in enumerate(self.bodies) if b.parent >= 0]
        if sorted(j.body for j in self.joints) != children:
            raise ConfigurationError("exactly one joint per non-root body is required")
        for j in self.joints:
            if j.lower > j.upper:
                raise ConfigurationError(f"joint of {self.bodies[j.body].name}: limits out of order")
            if j.kp < 0 or j.kd < 0 or j.torque_limit < 0:
                raise ConfigurationError("gains and torque limits must be non-negative")
        # joint index of each non-root body
        self.body_joint = np.full(len(self.bodies), -1, dtype=np.int64)
        for ji, j in enumerate(self.joints):
            self.body_joint[j.body] = ji

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_bodies(self) -> int:
        return len(self.bodies)

    @property
    def total_mass(self) -> float:
        return float(sum(b.mass for b in self.bodies))

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.lower for j in self.joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.upper for j in self.joints])

    @property
    def kp(self) -> np.ndarray:
        return np.array([j.kp for j in self.joints])

    @property
    def kd(self) -> np.ndarray:
        return np.array([j.kd for j in self.joints])

    @property
    def torque_limit(self) -> np.ndarray:
        return np.array([j.torque_limit for j in self.joints])

    def body_index(self, name: str) -> int:
        for i, b in enumerate(self.bodies):
            if b.name == name:
                return i
        raise ConfigurationError(f"unknown body {name!r}")

    def fingerprint(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]


def _floats(tokens, lineno, n):
    if len(tokens) != n:
        raise DataError(f"line {lineno}: expected {n} fields, got {len(tokens)}")
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise DataError(f"line {lineno}: {exc}") from None


def parse_model(text: str) -> CharacterModel:
    header: dict[str, float] = {}
    section = None
    bodies: list[Body] = []
    joints: list[Joint] = []
    probes, keys, falls = [], [], []
    names: dict[str, int] = {}
    version = None

    def body_ref(name, lineno):
        if name not in names:
            raise DataError(f"line {lineno}: unknown body {name!r}")
        return names[name]

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[]")
            continue
        tok = line.split()
        if section is None:
            if tok[0] == "version":
                version = int(tok[1])
            else:
                header[tok[0]] = _floats(tok[1:], lineno, 1)[0]
        elif section == "bodies":
            vals = _floats(tok[2:], lineno, 11)
            parent = -1 if tok[1] == "-" else body_ref(tok[1], lineno)
            names[tok[0]] = len(bodies)
            bodies.append(
                Body(tok[0], parent, np.array(vals[0:2]), np.array(vals[2:4]), vals[4], vals[5],
                     np.array(vals[6:8]), np.array(vals[8:10]), vals[10])
            )
        elif section == "joints":
            vals = _floats(tok[1:], lineno, 5)
            joints.append(Joint(body_ref(tok[0], lineno), *vals))
        elif section == "probes":
            vals = _floats(tok[1:], lineno, 3)
            probes.append((body_ref(tok[0], lineno), np.array(vals[:2]), vals[2]))
        elif section == "keys":
            vals = _floats(tok[2:], lineno, 2)
            keys.append((tok[0], body_ref(tok[1], lineno), np.array(vals)))
        elif section == "falls":
            falls.append(body_ref(tok[0], lineno))
        else:
            raise DataError(f"line {lineno}: unknown section [{section}]")
    if version != MODEL_VERSION:
        raise DataError(f"model version {version} not supported (expected {MODEL_VERSION})")
    return CharacterModel(
        bodies, joints, probes, keys, falls,
        gravity=header.get("gravity", 9.81),
        ground_height=header.get("ground_height", 0.0),
        friction=header.get("friction", 1.0),
        standing_height=header.get("standing_height", 0.9),
        text=text,
    )


def load_model(path: str | Path | None = None) -> CharacterModel:
    if path is None:
        text = resources.files("catprior.data").joinpath("planar_biped.model").read_text()
    else:
        text = Path(path).read_text()
    return parse_model(text)


@dataclass
class PillarModel:
    """Tippable box target for the strike task."""

    half_width: float = 0.12
    half_height: float = 0.6
    mass: float = 12.0

    @property
    def inertia(self) -> float:
        return self.mass * ((2 * self.half_width) ** 2 + (2 * self.half_height) ** 2) / 12.0
