"""Exponential tracking-similarity terms shared by imitation, matching and scoring.

Every term compares a simulated (or generated) kinematic state with a
reference frame.  Key points are compared relative to each character's own
root so the terms are usable for states anywhere in the world.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from catprior.errors import ConfigurationError


@dataclass(frozen=True)
class TrackingWeights:
    joint_pos: float = 0.3
    joint_vel: float = 0.1
    key: float = 0.3
    root_pose: float = 0.2
    root_vel: float = 0.1
    # exponential coefficients
    k_joint_pos: float = 2.0
    k_joint_vel: float = 0.1
    k_key: float = 10.0
    k_root_pose: float = 20.0
    heading_scale: float = 0.5
    k_root_vel: float = 2.0
    omega_scale: float = 0.1

    def __post_init__(self):
        total = self.joint_pos + self.joint_vel + self.key + self.root_pose + self.root_vel
        if abs(total - 1.0) > 1e-12:
            raise ConfigurationError(f"tracking weights must sum to 1, got {total}")


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


def joint_pos_term(q, q_ref, w: TrackingWeights = TrackingWeights()):
    return np.exp(-w.k_joint_pos * np.abs(np.asarray(q_ref) - q).sum(axis=-1))


def joint_vel_term(qd, qd_ref, w: TrackingWeights = TrackingWeights()):
    return np.exp(-w.k_joint_vel * np.abs(np.asarray(qd_ref) - qd).sum(axis=-1))


def key_term(keys_rel, keys_ref_rel, w: TrackingWeights = TrackingWeights()):
    """``keys_*`` are (..., n_keys, 2) positions relative to the root."""
    err = np.linalg.norm(np.asarray(keys_ref_rel) - keys_rel, axis=-1).sum(axis=-1)
    return np.exp(-w.k_key * err)


def root_pose_term(pos, angle, pos_ref, angle_ref, w: TrackingWeights = TrackingWeights()):
    d2 = ((np.asarray(pos_ref) - pos) ** 2).sum(axis=-1)
    th = wrap_angle(np.asarray(angle_ref) - angle)
    return np.exp(-w.k_root_pose * (d2 + w.heading_scale * th * th))


def root_vel_term(vel, omega, vel_ref, omega_ref, w: TrackingWeights = TrackingWeights()):
    d2 = ((np.asarray(vel_ref) - vel) ** 2).sum(axis=-1)
    dw = np.asarray(omega_ref) - omega
    return np.exp(-w.k_root_vel * (d2 + w.omega_scale * dw * dw))


def tracking_terms(frame, keys_rel, ref_frame, ref_keys_rel, n_joints: int,
                   w: TrackingWeights = TrackingWeights()) -> dict:
    """All five terms for (batched) own-frame kinematic frames."""
    frame = np.asarray(frame)
    ref = np.asarray(ref_frame)
    J = n_joints
    q, qd = frame[..., 3:3 + J], frame[..., 6 + J:6 + 2 * J]
    rq, rqd = ref[..., 3:3 + J], ref[..., 6 + J:6 + 2 * J]
    return {
        "joint_pos": joint_pos_term(q, rq, w),
        "joint_vel": joint_vel_term(qd, rqd, w),
        "key": key_term(keys_rel, ref_keys_rel, w),
        "root_pose": root_pose_term(frame[..., 0:2], frame[..., 2], ref[..., 0:2], ref[..., 2], w),
        "root_vel": root_vel_term(frame[..., 3 + J:5 + J], frame[..., 5 + J],
                                  ref[..., 3 + J:5 + J], ref[..., 5 + J], w),
    }


def combine(terms: dict, w: TrackingWeights = TrackingWeights()):
    return (w.joint_pos * terms["joint_pos"] + w.joint_vel * terms["joint_vel"]
            + w.key * terms["key"] + w.root_pose * terms["root_pose"]
            + w.root_vel * terms["root_vel"])


def tracking_reward(frame, keys_rel, ref_frame, ref_keys_rel, n_joints: int,
                    w: TrackingWeights = TrackingWeights()):
    """Weighted sum of the five exponential terms; lies in (0, 1]."""
    return combine(tracking_terms(frame, keys_rel, ref_frame, ref_keys_rel, n_joints, w), w)
