"""Deterministic planar character simulation."""

from catprior.sim.model import CharacterModel, PillarModel, load_model, parse_model
from catprior.sim.world import (
    CONTROL_DT, SIM_DT, SUBSTEPS, FrameLayout, Kinematics, Physics, World, apply_residual,
    observation_size, observe, pd_torque, trace_csv,
)

__all__ = [
    "CharacterModel", "PillarModel", "load_model", "parse_model",
    "CONTROL_DT", "SIM_DT", "SUBSTEPS", "FrameLayout", "Kinematics", "Physics", "World",
    "apply_residual", "observation_size", "observe", "pd_torque", "trace_csv",
]
