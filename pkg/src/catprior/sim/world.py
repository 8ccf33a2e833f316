"""Batched planar worlds: characters (optionally mirrored) and a pillar prop.

Kinematic frames
----------------
A character's kinematic state is a flat vector (``frame``) with layout::

    [root_x, root_y, root_angle, q_1..q_J, root_vx, root_vy, root_omega, qd_1..qd_J]

expressed in the character's *own* frame: x points the way the character
faces.  A character facing -x in the world is simulated with mirrored
geometry, and its frames are mirrored (x, angles and angular rates negate)
at this boundary so every policy sees the same conventions.

Root frame
----------
Planar characters have no yaw, so the heading-aligned root frame is the
world frame translated to the root origin.  Body positions in observations
are root-relative; velocities and headings are world-aligned.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from catprior.errors import ConfigurationError, SimulationDiverged
from catprior.sim import dynamics as dyn
from catprior.sim.model import CharacterModel, PillarModel

SUBSTEPS = 4
SIM_DT = 1.0 / 120.0
CONTROL_DT = SUBSTEPS * SIM_DT


def frame_size(n_joints: int) -> int:
    return 6 + 2 * n_joints


@dataclass(frozen=True)
class FrameLayout:
    n_joints: int

    @property
    def size(self) -> int:
        return frame_size(self.n_joints)

    @property
    def root_pos(self):
        return slice(0, 2)

    @property
    def root_angle(self) -> int:
        return 2

    @property
    def q(self):
        return slice(3, 3 + self.n_joints)

    @property
    def root_vel(self):
        j = 3 + self.n_joints
        return slice(j, j + 2)

    @property
    def root_omega(self) -> int:
        return 5 + self.n_joints

    @property
    def qd(self):
        j = 6 + self.n_joints
        return slice(j, j + self.n_joints)

    def mirror(self, frames: np.ndarray) -> np.ndarray:
        """Reflect x: positions/velocities along x and all angles negate."""
        out = -np.asarray(frames, dtype=np.float64).copy()
        out[..., 1] *= -1.0
        out[..., self.root_vel.start + 1] *= -1.0
        return out


def mirrored_model(model: CharacterModel) -> CharacterModel:
    m = copy.deepcopy(model)
    flip = np.array([-1.0, 1.0])
    for b in m.bodies:
        b.anchor = b.anchor * flip
        b.com = b.com * flip
        b.seg_a = b.seg_a * flip
        b.seg_b = b.seg_b * flip
    m.probes = [(b, p * flip, r) for b, p, r in m.probes]
    m.keys = [(n, b, p * flip) for n, b, p in m.keys]
    return m


# contact sets used between systems
STRIKE_PROBES = [("arm_l", (0.0, -0.56), 0.05), ("arm_r", (0.0, -0.56), 0.05),
                 ("torso", (0.0, 0.5), 0.11), ("torso", (0.0, 0.25), 0.11),
                 ("shin_l", (0.0, 0.0), 0.045), ("shin_r", (0.0, 0.0), 0.045),
                 ("foot_l", (0.16, -0.05), 0.03), ("foot_r", (0.16, -0.05), 0.03)]
FIGHT_PROBES = [("arm_l", (0.0, -0.56), 0.05), ("arm_r", (0.0, -0.56), 0.05),
                ("torso", (0.0, 0.5), 0.11), ("torso", (0.0, 0.25), 0.11),
                ("pelvis", (0.0, 0.05), 0.10),
                ("shin_l", (0.0, 0.0), 0.045), ("shin_r", (0.0, 0.0), 0.045)]
FIGHT_SHAPES = ["torso", "pelvis", "thigh_l", "thigh_r", "arm_l", "arm_r"]
HAND_BODIES = ("arm_l", "arm_r")


@dataclass
class Physics:
    gravity: float | None = None  # None: take from the model
    friction: float | None = None
    ground_height: float | None = None
    substeps: int = SUBSTEPS
    dt: float = SIM_DT
    pgs_iterations: int = 12
    baumgarte: float = 0.2
    slop: float = 0.002
    gains_scale: float = 1.0


def build_spec(
    models: list[CharacterModel],
    pillar: PillarModel | None,
    physics: Physics,
    fight: bool = False,
):
    """Assemble numba arrays for ``models`` (one system each) plus an optional pillar."""
    base = models[0]
    bodies = []  # (sys, parent_global, anchor, com, mass, inertia, kind, a, b, radius, half)
    sys_coord0, sys_ncoord, sys_body0, sys_nbody, sys_mass = [], [], [], [], []
    coord_kp, coord_kd, coord_tau, coord_act, coord_pivot = [], [], [], [], []
    body_jcoord = []
    body_names = []
    n_coord = 0
    for si, m in enumerate(models):
        b0 = len(bodies)
        sys_coord0.append(n_coord)
        sys_ncoord.append(3 + m.n_joints)
        sys_body0.append(b0)
        sys_nbody.append(m.n_bodies)
        sys_mass.append(m.total_mass)
        coord_kp += [0.0, 0.0, 0.0] + list(m.kp * physics.gains_scale)
        coord_kd += [0.0, 0.0, 0.0] + list(m.kd * physics.gains_scale)
        coord_tau += [0.0, 0.0, 0.0] + list(m.torque_limit)
        coord_act += [0, 0, 0] + [1] * m.n_joints
        coord_pivot += [-1, -1, b0] + [b0 + j.body for j in m.joints]
        for bi, b in enumerate(m.bodies):
            parent = -1 if b.parent < 0 else b0 + b.parent
            jc = n_coord + 2 if b.parent < 0 else n_coord + 3 + int(m.body_joint[bi])
            body_jcoord.append(jc)
            body_names.append((si, b.name))
            bodies.append((si, parent, b.anchor, b.com, b.mass, b.inertia, 0, b.seg_a, b.seg_b,
                           b.radius, np.zeros(2)))
        n_coord += 3 + m.n_joints
    if pillar is not None:
        si = len(models)
        b0 = len(bodies)
        sys_coord0.append(n_coord)
        sys_ncoord.append(3)
        sys_body0.append(b0)
        sys_nbody.append(1)
        sys_mass.append(pillar.mass)
        coord_kp += [0.0] * 3
        coord_kd += [0.0] * 3
        coord_tau += [0.0] * 3
        coord_act += [0] * 3
        coord_pivot += [-1, -1, b0]
        body_jcoord.append(n_coord + 2)
        body_names.append((si, "pillar"))
        half = np.array([pillar.half_width, pillar.half_height])
        bodies.append((si, -1, np.zeros(2), np.zeros(2), pillar.mass, pillar.inertia, 1,
                       np.zeros(2), np.zeros(2), 0.0, half))
        n_coord += 3
    nb = len(bodies)
    anc = np.zeros((nb, n_coord))
    parent = np.array([b[1] for b in bodies], dtype=np.int64)
    for bi in range(nb):
        # walk up to the root, marking every rotational coordinate on the path
        k = bi
        while k >= 0:
            anc[bi, body_jcoord[k]] = 1.0
            k = parent[k]

    def gidx(si, name):
        return body_names.index((si, name))

    gp = []
    for si, m in enumerate(models):
        for b, p, r in m.probes:
            gp.append((sys_body0[si] + b, p, r))
    if pillar is not None:
        pb = len(bodies) - 1
        for sx in (-1, 1):
            for sy in (-1, 1):
                gp.append((pb, np.array([sx * pillar.half_width, sy * pillar.half_height]), 0.005))

    pp = []
    if pillar is not None:
        pb = len(bodies) - 1
        for si, m in enumerate(models):
            flip = -1.0 if m is not base and _is_mirrored(m, base) else 1.0
            for name, local, r in STRIKE_PROBES:
                pp.append((gidx(si, name), np.array([flip * local[0], local[1]]), r, pb))
    if fight:
        if len(models) != 2:
            raise ConfigurationError("fight contacts need exactly two characters")
        for si in range(2):
            other = 1 - si
            flip = -1.0 if _is_mirrored(models[si], base) else 1.0
            for name, local, r in FIGHT_PROBES:
                for shape in FIGHT_SHAPES:
                    pp.append((gidx(si, name), np.array([flip * local[0], local[1]]), r,
                               gidx(other, shape)))

    phys = np.array([
        base.gravity if physics.gravity is None else physics.gravity,
        base.ground_height if physics.ground_height is None else physics.ground_height,
        base.friction if physics.friction is None else physics.friction,
        physics.dt, physics.baumgarte, physics.slop, 0.0,
    ])
    spec = dyn.WorldSpec(
        sys_coord0=np.array(sys_coord0, dtype=np.int64),
        sys_ncoord=np.array(sys_ncoord, dtype=np.int64),
        sys_body0=np.array(sys_body0, dtype=np.int64),
        sys_nbody=np.array(sys_nbody, dtype=np.int64),
        sys_mass=np.array(sys_mass, dtype=np.float64),
        body_parent=parent,
        body_sys=np.array([b[0] for b in bodies], dtype=np.int64),
        body_jcoord=np.array(body_jcoord, dtype=np.int64),
        body_anchor=np.array([b[2] for b in bodies], dtype=np.float64).reshape(nb, 2),
        body_com=np.array([b[3] for b in bodies], dtype=np.float64).reshape(nb, 2),
        body_mass=np.array([b[4] for b in bodies], dtype=np.float64),
        body_inertia=np.array([b[5] for b in bodies], dtype=np.float64),
        anc=anc,
        coord_pivot=np.array(coord_pivot, dtype=np.int64),
        coord_kp=np.array(coord_kp, dtype=np.float64),
        coord_kd=np.array(coord_kd, dtype=np.float64),
        coord_taulim=np.array(coord_tau, dtype=np.float64),
        coord_act=np.array(coord_act, dtype=np.int64),
        gp_body=np.array([p[0] for p in gp], dtype=np.int64),
        gp_local=np.array([p[1] for p in gp], dtype=np.float64).reshape(len(gp), 2),
        gp_radius=np.array([p[2] for p in gp], dtype=np.float64),
        pp_body=np.array([p[0] for p in pp], dtype=np.int64),
        pp_local=np.array([p[1] for p in pp], dtype=np.float64).reshape(len(pp), 2),
        pp_radius=np.array([p[2] for p in pp], dtype=np.float64),
        pp_shape=np.array([p[3] for p in pp], dtype=np.int64),
        shape_kind=np.array([b[6] for b in bodies], dtype=np.int64),
        shape_a=np.array([b[7] for b in bodies], dtype=np.float64).reshape(nb, 2),
        shape_b=np.array([b[8] for b in bodies], dtype=np.float64).reshape(nb, 2),
        shape_radius=np.array([b[9] for b in bodies], dtype=np.float64),
        shape_half=np.array([b[10] for b in bodies], dtype=np.float64).reshape(nb, 2),
        phys=phys,
        iphys=np.array([physics.substeps, physics.pgs_iterations], dtype=np.int64),
    )
    return spec


def _is_mirrored(m: CharacterModel, base: CharacterModel) -> bool:
    return m is not base and any(
        not np.allclose(a.com, b.com) for a, b in zip(m.bodies, base.bodies)
    )


class World:
    """``n_envs`` independent copies of a planar scene, stepped together.

    ``facings`` lists one entry (+1 or -1) per character.
    """

    def __init__(
        self,
        model: CharacterModel,
        n_envs: int,
        facings: tuple[int, ...] = (1,),
        pillar: PillarModel | None = None,
        physics: Physics | None = None,
    ):
        self.model = model
        self.physics = physics or Physics()
        self.n_envs = n_envs
        self.facings = tuple(int(f) for f in facings)
        if any(f not in (1, -1) for f in self.facings):
            raise ConfigurationError("facings must be +1 or -1")
        self.models = [model if f == 1 else mirrored_model(model) for f in self.facings]
        self.pillar = pillar
        self.spec = build_spec(self.models, pillar, self.physics, fight=len(self.models) == 2)
        self.layout = FrameLayout(model.n_joints)
        n = int(self.spec.sys_coord0[-1] + self.spec.sys_ncoord[-1])
        nb = len(self.spec.body_parent)
        self.n_coords = n
        self.n_systems = len(self.spec.sys_coord0)
        self.G = np.zeros((n_envs, n))
        self.U = np.zeros((n_envs, n))
        self.targets = np.zeros((n_envs, n))
        self.force = np.zeros((n_envs, nb, self.n_systems + 1))
        self.diverged = np.zeros(n_envs, dtype=np.bool_)
        self._kin = None
        self.key_bodies = np.array([k[1] for k in model.keys], dtype=np.int64)
        self.key_local = np.array([k[2] for k in model.keys])

    # ------------------------------------------------------------ state io
    def _coords(self, i: int):
        c0 = int(self.spec.sys_coord0[i])
        return c0, c0 + int(self.spec.sys_ncoord[i])

    def set_character(self, i: int, frames: np.ndarray, envs=None):
        """Place character ``i`` at own-frame kinematic ``frames`` (E, F)."""
        frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
        if frames.shape[1] != self.layout.size:
            raise ConfigurationError(f"frame width {frames.shape[1]} != {self.layout.size}")
        w = self.layout.mirror(frames) if self.facings[i] == -1 else frames
        envs = np.arange(self.n_envs) if envs is None else np.asarray(envs)
        L = self.layout
        G = np.zeros((len(envs), self.n_coords))
        U = np.zeros((len(envs), self.n_coords))
        dyn.root_to_com_batch(
            self.spec, i, np.ascontiguousarray(w[:, L.root_pos]), np.ascontiguousarray(w[:, 2]),
            np.ascontiguousarray(w[:, L.q]), np.ascontiguousarray(w[:, L.root_vel]),
            np.ascontiguousarray(w[:, L.root_omega]), np.ascontiguousarray(w[:, L.qd]), G, U,
        )
        c0, c1 = self._coords(i)
        self.G[envs, c0:c1] = G[:, c0:c1]
        self.U[envs, c0:c1] = U[:, c0:c1]
        self.targets[envs, c0 + 3:c1] = w[:, L.q]
        self.diverged[envs] = False
        self._kin = None

    def set_pillar(self, pos: np.ndarray, angle=0.0, envs=None):
        envs = np.arange(self.n_envs) if envs is None else np.asarray(envs)
        c0, _ = self._coords(self.n_systems - 1)
        self.G[envs, c0:c0 + 2] = pos
        self.G[envs, c0 + 2] = angle
        self.U[envs, c0:c0 + 3] = 0.0
        self._kin = None

    def kinematics(self):
        if self._kin is None:
            E = self.n_envs
            nb = len(self.spec.body_parent)
            angle = np.zeros((E, nb))
            origin = np.zeros((E, nb, 2))
            com = np.zeros((E, nb, 2))
            omega = np.zeros((E, nb))
            vcom = np.zeros((E, nb, 2))
            dyn.kinematics_batch(self.spec, self.G, self.U, angle, origin, com, omega, vcom)
            self._kin = {"angle": angle, "origin": origin, "com": com, "omega": omega, "vcom": vcom}
        return self._kin

    def get_character(self, i: int) -> np.ndarray:
        """Own-frame kinematic frames (E, F) of character ``i``."""
        c0, c1 = self._coords(i)
        b0 = int(self.spec.sys_body0[i])
        kin = self.kinematics()
        E = self.n_envs
        out = np.zeros((E, self.layout.size))
        L = self.layout
        # root origin velocity: COM velocity minus the internal COM shift rate
        root_vel = _root_velocity(kin, b0, self.spec, self.G, self.U, i)
        out[:, L.root_pos] = kin["origin"][:, b0]
        out[:, 2] = self.G[:, c0 + 2]
        out[:, L.q] = self.G[:, c0 + 3:c1]
        out[:, L.root_vel] = root_vel
        out[:, L.root_omega] = self.U[:, c0 + 2]
        out[:, L.qd] = self.U[:, c0 + 3:c1]
        return self.layout.mirror(out) if self.facings[i] == -1 else out

    def body_state(self, i: int) -> dict:
        """Own-frame world body quantities of character ``i``."""
        b0 = int(self.spec.sys_body0[i])
        nb = int(self.spec.sys_nbody[i])
        kin = self.kinematics()
        sl = slice(b0, b0 + nb)
        com = kin["com"][:, sl].copy()
        vcom = kin["vcom"][:, sl].copy()
        angle = kin["angle"][:, sl].copy()
        omega = kin["omega"][:, sl].copy()
        origin = kin["origin"][:, sl].copy()
        keys = _key_points(kin, b0 + self.key_bodies, self.models[i])
        if self.facings[i] == -1:
            for arr in (com, vcom, origin, keys):
                arr[..., 0] *= -1.0
            angle = -angle
            omega = -omega
        return {"com": com, "vcom": vcom, "angle": angle, "omega": omega, "origin": origin,
                "keys": keys}

    def pillar_state(self) -> dict:
        c0, _ = self._coords(self.n_systems - 1)
        return {"pos": self.G[:, c0:c0 + 2].copy(), "angle": self.G[:, c0 + 2].copy(),
                "vel": self.U[:, c0:c0 + 2].copy(), "omega": self.U[:, c0 + 2].copy()}

    # ------------------------------------------------------------ stepping
    def step(self, targets: list[np.ndarray] | np.ndarray, raise_on_diverge: bool = False):
        """Advance one control tick with own-frame joint targets per character."""
        if isinstance(targets, np.ndarray) and len(self.models) == 1 and targets.ndim == 2:
            targets = [targets]
        for i, t in enumerate(targets):
            c0, c1 = self._coords(i)
            t = np.asarray(t, dtype=np.float64)
            self.targets[:, c0 + 3:c1] = -t if self.facings[i] == -1 else t
        dyn.step_batch(self.spec, self.G, self.U, self.targets, self.force, self.diverged)
        self._kin = None
        if raise_on_diverge and self.diverged.any():
            raise SimulationDiverged(f"envs {np.flatnonzero(self.diverged).tolist()} diverged")
        return self.diverged

    def contact_force(self, body_sys: int, body_name: str, other: int | str) -> np.ndarray:
        """Mean contact force over the last tick exerted through ``body_name``'s probes
        on system ``other`` (or the ground)."""
        b = int(self.spec.sys_body0[body_sys]) + self.model.body_index(body_name)
        j = self.n_systems if other == "ground" else int(other)
        return self.force[:, b, j]

    def momentum(self) -> np.ndarray:
        kin = self.kinematics()
        m = self.spec.body_mass
        return (kin["vcom"] * m[None, :, None]).sum(axis=1)

    def kinetic_energy(self) -> np.ndarray:
        kin = self.kinematics()
        m = self.spec.body_mass
        inertia = self.spec.body_inertia
        lin = 0.5 * (m[None, :] * (kin["vcom"] ** 2).sum(axis=-1)).sum(axis=1)
        ang = 0.5 * (inertia[None, :] * kin["omega"] ** 2).sum(axis=1)
        return lin + ang


def _key_points(kin, bodies, model):
    angle = kin["angle"][:, bodies]
    origin = kin["origin"][:, bodies]
    local = np.array([k[2] for k in model.keys])
    c, s = np.cos(angle), np.sin(angle)
    x = origin[..., 0] + c * local[:, 0] - s * local[:, 1]
    y = origin[..., 1] + s * local[:, 0] + c * local[:, 1]
    return np.stack([x, y], axis=-1)


def _root_velocity(kin, b0, spec, G, U, i):
    # the root origin is a point on the root body: v = v_com(root) + omega x (o - c)
    vc = kin["vcom"][:, b0]
    w = kin["omega"][:, b0]
    d = kin["origin"][:, b0] - kin["com"][:, b0]
    return np.stack([vc[:, 0] - w * d[:, 1], vc[:, 1] + w * d[:, 0]], axis=-1)


class Kinematics:
    """Forward kinematics of own-frame frames without simulation."""

    def __init__(self, model: CharacterModel):
        self.model = model
        self.world = World(model, 1)

    def __call__(self, frames: np.ndarray) -> dict:
        frames = np.atleast_2d(frames)
        if self.world.n_envs != len(frames):
            self.world = World(self.model, len(frames))
        self.world.set_character(0, frames)
        return self.world.body_state(0)


# ---------------------------------------------------------------- control & observation
def observation_size(model: CharacterModel) -> int:
    return 2 * model.n_joints + 6 * model.n_bodies + 1


def observe(world: World, i: int = 0) -> np.ndarray:
    """Proprioceptive observation of character ``i`` (own frame), shape (E, obs).

    Layout: q (J), qd (J), then per body [x - root_x, y - root_y, heading,
    vx, vy, angular velocity], then the root height above the ground.
    """
    fr = world.get_character(i)
    bs = world.body_state(i)
    L = world.layout
    E = world.n_envs
    root = fr[:, L.root_pos]
    per_body = np.concatenate([
        bs["com"] - root[:, None, :],
        bs["angle"][..., None],
        bs["vcom"],
        bs["omega"][..., None],
    ], axis=-1)
    h = root[:, 1] - world.spec.phys[1]
    return np.concatenate([fr[:, L.q], fr[:, L.qd], per_body.reshape(E, -1), h[:, None]], axis=1)


def pd_torque(q, qd, target, model: CharacterModel) -> np.ndarray:
    """Explicit PD law ``kp (target - q) - kd qd`` clamped to the torque limits."""
    tau = model.kp * (np.asarray(target) - q) - model.kd * np.asarray(qd)
    return np.clip(tau, -model.torque_limit, model.torque_limit)


def apply_residual(q, a, model: CharacterModel) -> np.ndarray:
    """PD target = current joint angles plus the action, clamped to joint limits."""
    return np.clip(np.asarray(q) + a, model.lower, model.upper)


def trace_csv(frames: np.ndarray, n_joints: int) -> str:
    """Per-tick kinematic rows for inspection."""
    cols = (["tick", "root_x", "root_y", "root_angle"] + [f"q{j}" for j in range(n_joints)]
            + ["root_vx", "root_vy", "root_omega"] + [f"qd{j}" for j in range(n_joints)])
    lines = [",".join(cols)]
    for t, row in enumerate(np.asarray(frames)):
        lines.append(",".join([str(t)] + [repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"
