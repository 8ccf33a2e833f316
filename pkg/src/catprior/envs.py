"""Shared vectorized character-environment plumbing."""

from __future__ import annotations

import numpy as np

from catprior.sim.model import CharacterModel, PillarModel
from catprior.sim.world import Physics, World, apply_residual, observe


class CharacterEnv:
    """One simulated character per env row, with fall detection and RSI helpers."""

    fall_fraction = 0.4

    def __init__(self, model: CharacterModel, n_envs: int, physics: Physics | None = None,
                 facings=(1,), pillar: PillarModel | None = None):
        self.model = model
        self.n_envs = n_envs
        self.world = World(model, n_envs, facings=facings, pillar=pillar, physics=physics)
        self.layout = self.world.layout

    def observe(self, i: int = 0) -> np.ndarray:
        return observe(self.world, i)

    def frames(self, i: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Own-frame kinematic frames and root-relative key points."""
        fr = self.world.get_character(i)
        keys = self.world.body_state(i)["keys"] - fr[:, None, 0:2]
        return fr, keys

    def fallen(self, i: int = 0) -> np.ndarray:
        fr = self.world.get_character(i)
        low = fr[:, 1] - self.world.spec.phys[1] < self.fall_fraction * self.model.standing_height
        touch = np.zeros(self.n_envs, dtype=np.bool_)
        for b in self.model.fall_bodies:
            touch |= self.world.contact_force(i, self.model.bodies[b].name, "ground") > 0.0
        return low | touch

    def drive(self, actions_per_char: list[np.ndarray]) -> np.ndarray:
        """Residual actions -> clamped PD targets -> one control tick.  Returns diverged flags."""
        targets = []
        for i, a in enumerate(actions_per_char):
            q = self.world.get_character(i)[:, self.layout.q]
            targets.append(apply_residual(q, a, self.model))
        return self.world.step(targets).copy()
