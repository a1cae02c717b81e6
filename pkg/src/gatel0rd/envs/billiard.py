"""Point-mass ball on a frictional table with elastic walls and corner pockets.

States are batched: every field has a leading batch axis, so a single ball is
a batch of one. There are no actions.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

FRICTION = 0.998
POCKET_RADIUS = 0.12
POCKETS = np.array([[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]])
SPEED_RANGE = (0.02, 0.08)
START_RANGE = 0.8


@dataclass
class BilliardState:
    pos: np.ndarray    # (N, 2)
    vel: np.ndarray    # (N, 2)
    alive: np.ndarray  # (N,) bool, False once pocketed


@dataclass
class Billiard:
    friction: float = FRICTION
    pocket_radius: float = POCKET_RADIUS
    dt: float = 1.0

    obs_dim = 2
    act_dim = 0
    name = "billiard"

    def geometry(self) -> dict:
        return {
            "friction": self.friction,
            "pocket_radius": self.pocket_radius,
            "pockets": POCKETS.tolist(),
            "dt": self.dt,
            "speed_range": list(SPEED_RANGE),
            "start_range": START_RANGE,
        }

    def reset(self, rng, n: int = 1) -> BilliardState:
        pos = rng.uniform(-START_RANGE, START_RANGE, (n, 2))
        angle = rng.uniform(0.0, 2 * np.pi, n)
        speed = rng.uniform(*SPEED_RANGE, n)
        vel = np.stack([np.cos(angle), np.sin(angle)], axis=1) * speed[:, None]
        return BilliardState(pos, vel, np.ones(n, dtype=bool))

    def step(self, state: BilliardState, action=None) -> BilliardState:
        return billiard_step(state, self.dt, self.friction, self.pocket_radius)

    def observe(self, state: BilliardState) -> np.ndarray:
        return state.pos.copy()


def billiard_step(state: BilliardState, dt: float = 1.0, friction: float = FRICTION,
                  pocket_radius: float = POCKET_RADIUS) -> BilliardState:
    alive = state.alive
    pos = state.pos + state.vel * dt
    vel = state.vel.copy()
    # mirror back into the table; loop covers velocities longer than the table
    for _ in range(4):
        over = pos > 1.0
        under = pos < -1.0
        if not (over.any() or under.any()):
            break
        pos = np.where(over, 2.0 - pos, pos)
        pos = np.where(under, -2.0 - pos, pos)
        vel = np.where(over | under, -vel, vel)
    vel = vel * friction
    dist = np.linalg.norm(pos[:, None, :] - POCKETS[None], axis=2).min(axis=1)
    pocketed = alive & (dist < pocket_radius)
    new_alive = alive & ~pocketed
    pos = np.where(alive[:, None], pos, state.pos)
    vel = np.where(new_alive[:, None], vel, 0.0)
    return BilliardState(pos, vel, new_alive)


def rollout(env: Billiard, state: BilliardState, T: int):
    """Observations ``(N, T, 2)`` and the step index each ball was pocketed (-1 if never)."""
    obs = [env.observe(state)]
    pocket_step = np.full(state.pos.shape[0], -1)
    for t in range(1, T):
        state = env.step(state)
        newly = (pocket_step < 0) & ~state.alive
        pocket_step[newly] = t
        obs.append(env.observe(state))
    return np.stack(obs, axis=1), pocket_step
