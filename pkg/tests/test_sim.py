import copy

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from catprior.errors import ConfigurationError, DataError, SimulationDiverged
from catprior.sim import (
    CONTROL_DT, SIM_DT, SUBSTEPS, Kinematics, Physics, World, apply_residual, observation_size, observe,
    parse_model, pd_torque, trace_csv,
)
from catprior.sim.model import PillarModel


def standing(world, height=0.92):
    f = np.zeros((world.n_envs, world.layout.size))
    f[:, 1] = height
    return f


def airborne_state(world, rng, height=5.0):
    L = world.layout
    f = np.zeros((world.n_envs, L.size))
    f[:, 1] = height
    f[:, L.q] = rng.uniform(-0.4, 0.4, (world.n_envs, world.model.n_joints))
    f[:, L.qd] = rng.normal(0, 2, (world.n_envs, world.model.n_joints))
    f[:, L.root_vel] = [0.3, 0.2]
    f[:, L.root_omega] = 0.7
    return f


def without_stiffness(model):
    m = copy.deepcopy(model)
    for j in m.joints:
        j.kp = 0.0
    return m


class TestModel:
    def test_default_model(self, model):
        assert model.n_joints == 9 and model.n_bodies == 10
        assert model.total_mass > 0
        assert np.all(model.lower <= model.upper)

    def test_version_checked(self, model):
        with pytest.raises(DataError, match="version"):
            parse_model(model.text.replace("version 1", "version 7"))

    def test_unknown_parent(self, model):
        with pytest.raises(DataError, match="unknown body"):
            parse_model(model.text.replace("torso      pelvis", "torso      hips"))

    def test_negative_mass_rejected(self, model):
        with pytest.raises(ConfigurationError):
            parse_model(model.text.replace("10.0  0.080", "-10.0  0.080"))

    def test_unordered_limits_rejected(self, model):
        with pytest.raises(ConfigurationError):
            parse_model(model.text.replace("torso     -0.80   0.60", "torso      0.80   0.60"))

    def test_fingerprint_tracks_text(self, model):
        assert parse_model(model.text).fingerprint() == model.fingerprint()
        assert parse_model(model.text + "\n# edit\n").fingerprint() != model.fingerprint()

    def test_pillar_inertia_positive(self):
        assert PillarModel().inertia > 0


class TestControl:
    def test_tick_timing(self):
        assert SUBSTEPS == 4 and SIM_DT == pytest.approx(1 / 120)
        assert CONTROL_DT == pytest.approx(1 / 30)

    def test_pd_zero_error(self, model):
        q = np.linspace(-0.2, 0.2, model.n_joints)
        np.testing.assert_array_equal(pd_torque(q, np.zeros_like(q), q, model), 0.0)

    def test_pd_hand_arithmetic(self, model):
        m = copy.deepcopy(model)
        for j in m.joints:
            j.kp, j.kd = 10.0, 0.0
        tau = pd_torque(np.zeros(9), np.ones(9), np.full(9, 0.1), m)
        np.testing.assert_allclose(tau, 1.0)

    def test_pd_clamps_at_limit(self, model):
        tau = pd_torque(np.zeros(9), np.zeros(9), np.full(9, 100.0), model)
        np.testing.assert_array_equal(tau, model.torque_limit)

    def test_residual_zero_action(self, model):
        q = np.clip(np.linspace(-0.5, 0.5, 9), model.lower, model.upper)
        np.testing.assert_array_equal(apply_residual(q, np.zeros(9), model), q)

    def test_residual_clamps(self, model):
        q = model.upper - 0.01
        np.testing.assert_array_equal(apply_residual(q, np.full(9, 0.5), model), model.upper)

    @given(arrays(np.float64, 9, elements=st.floats(-0.2, 0.2)))
    def test_residual_is_addition_inside_limits(self, a):
        from catprior.sim import load_model
        m = load_model()
        q = 0.5 * (m.lower + m.upper)
        inside = (q + a >= m.lower) & (q + a <= m.upper)
        np.testing.assert_array_equal(apply_residual(q, a, m)[inside], (q + a)[inside])


class TestStep:
    def test_deterministic(self, model):
        rng = np.random.default_rng(3)
        worlds = [World(model, 3) for _ in range(2)]
        for w in worlds:
            w.set_character(0, standing(w))
        actions = rng.normal(0, 0.3, (40, 3, 9))
        for a in actions:
            for w in worlds:
                w.step(a)
        assert worlds[0].G.tobytes() == worlds[1].G.tobytes()
        assert worlds[0].U.tobytes() == worlds[1].U.tobytes()

    def test_free_fall_velocity_change(self, model):
        w = World(model, 1)
        w.set_character(0, standing(w, height=5.0))
        v0 = w.get_character(0)[0, w.layout.root_vel.start + 1]
        w.step(np.zeros((1, 9)))
        v1 = w.get_character(0)[0, w.layout.root_vel.start + 1]
        assert abs((v1 - v0) - (-model.gravity / 30.0)) < 1e-9

    def test_momentum_conserved_without_forces(self, model):
        rng = np.random.default_rng(0)
        w = World(model, 2, physics=Physics(gravity=0.0, gains_scale=0.0))
        w.set_character(0, airborne_state(w, rng))
        p0 = w.momentum()
        for _ in range(30):
            w.step(np.zeros((2, 9)))
            p1 = w.momentum()
            np.testing.assert_allclose(p1, p0, atol=1e-8)
            p0 = p1

    def test_damping_dissipates_energy(self, model):
        rng = np.random.default_rng(1)
        w = World(without_stiffness(model), 2, physics=Physics(gravity=0.0))
        f = airborne_state(w, rng)
        f[:, w.layout.q] = 0.0
        w.set_character(0, f)
        e = w.kinetic_energy()
        for _ in range(30):
            w.step(np.zeros((2, 9)))
            e1 = w.kinetic_energy()
            assert np.all(e1 <= e + 1e-12)
            e = e1

    def test_kinematics_consistent_after_ticks(self, model):
        rng = np.random.default_rng(2)
        w = World(model, 2)
        w.set_character(0, standing(w))
        kin = Kinematics(model)
        for _ in range(10):
            w.step(rng.normal(0, 0.2, (2, 9)))
            fresh = kin(w.get_character(0))
            stored = w.body_state(0)
            for key in ("com", "angle", "origin", "keys"):
                np.testing.assert_allclose(fresh[key], stored[key], atol=1e-9)

    def test_standing_supported_by_ground(self, model):
        w = World(model, 1)
        w.set_character(0, standing(w))
        for _ in range(60):
            w.step(np.zeros((1, 9)))
        fr = w.get_character(0)[0]
        assert fr[1] == pytest.approx(0.92, abs=0.03)
        ground = w.force[0, :, -1].sum()
        assert ground == pytest.approx(model.gravity * model.total_mass, rel=0.05)

    def test_divergence_reported(self, model):
        w = World(model, 1)
        f = standing(w)
        f[0, w.layout.qd] = 1e300
        w.set_character(0, f)
        with pytest.raises(SimulationDiverged):
            for _ in range(3):
                w.step(np.zeros((1, 9)), raise_on_diverge=True)

    def test_frame_width_checked(self, model):
        with pytest.raises(ConfigurationError):
            World(model, 1).set_character(0, np.zeros((1, 5)))

    def test_bad_facing(self, model):
        with pytest.raises(ConfigurationError):
            World(model, 1, facings=(2,))


class TestMirroring:
    def test_mirrored_character_round_trips(self, model):
        rng = np.random.default_rng(4)
        w = World(model, 2, facings=(1, -1))
        f = airborne_state(w, rng, height=0.95)
        w.set_character(0, f)
        w.set_character(1, f)
        np.testing.assert_allclose(w.get_character(1), f, atol=1e-9)

    def test_opponents_face_each_other(self, model):
        w = World(model, 1, facings=(1, -1))
        a, b = standing(w), standing(w)
        a[:, 0] = -1.0
        b[:, 0] = -1.0
        w.set_character(0, a)
        w.set_character(1, b)
        # same own-frame pose, so the two bodies are reflections about x = 0
        np.testing.assert_allclose(w.body_state(1)["com"], w.body_state(0)["com"], atol=1e-9)
        c0 = w.kinematics()["com"][0, :10]
        c1 = w.kinematics()["com"][0, 10:20]
        np.testing.assert_allclose(c1[:, 0], -c0[:, 0], atol=1e-9)
        np.testing.assert_allclose(c1[:, 1], c0[:, 1], atol=1e-9)


class TestObserve:
    def test_dimension(self, model):
        w = World(model, 1)
        w.set_character(0, standing(w))
        assert observe(w).shape == (1, 2 * 9 + 6 * 10 + 1) == (1, observation_size(model))

    def test_translation_invariance(self, model):
        rng = np.random.default_rng(5)
        w = World(model, 1)
        f = airborne_state(w, rng, height=1.2)
        w.set_character(0, f)
        a = observe(w)
        f[:, 0] += 3.7
        w.set_character(0, f)
        np.testing.assert_allclose(observe(w), a, atol=1e-12)

    def test_zero_velocity_slots(self, model):
        w = World(model, 1)
        f = standing(w)
        f[:, w.layout.q] = np.linspace(-0.3, 0.3, 9)
        w.set_character(0, f)
        obs = observe(w)[0]
        per_body = obs[18:78].reshape(10, 6)
        np.testing.assert_array_equal(obs[9:18], 0.0)
        np.testing.assert_allclose(per_body[:, 3:], 0.0, atol=1e-15)

    def test_trace_csv(self, model):
        text = trace_csv(np.zeros((3, 24)), 9)
        lines = text.splitlines()
        assert lines[0].startswith("tick,root_x,root_y,root_angle,q0")
        assert len(lines) == 4
