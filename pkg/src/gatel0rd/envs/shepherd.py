"""Shepherd: a sheep walks down behind a wall, hides, and reappears at the
gate row (same x) once the agent reaches a lever. The agent can carry a cage
into the sheep's path.

Observation layout: ``[wall_height, agent_x, agent_y, sheep_x, sheep_y,
cage_x, cage_y]``; a hidden sheep shows ``SENTINEL`` in both sheep slots.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SENTINEL = -1.5
LEVER = (-0.8, -0.2)
GATE_ROW = 0.1
AGENT_TOP = 0.0

ABOVE, HIDDEN, BELOW = 0, 1, 2


@dataclass
class ShepherdState:
    agent: np.ndarray       # (N, 2)
    sheep: np.ndarray       # (N, 2) true position, x constant
    sheep_speed: np.ndarray  # (N,) downward speed
    cage: np.ndarray        # (N, 2)
    carried: np.ndarray     # (N,) bool
    wall: np.ndarray        # (N,) wall top height
    gate_open: np.ndarray   # (N,) bool, monotone
    phase: np.ndarray       # (N,) ABOVE / HIDDEN / BELOW
    caught: np.ndarray      # (N,) bool, monotone

    @property
    def visible(self) -> np.ndarray:
        return self.phase != HIDDEN


@dataclass
class Shepherd:
    interaction_radius: float = 0.1
    catch_radius: float = 0.1
    step_scale: float = 0.05
    lever: tuple = LEVER

    obs_dim = 7
    act_dim = 3
    name = "shepherd"

    def geometry(self) -> dict:
        return {
            "interaction_radius": self.interaction_radius,
            "catch_radius": self.catch_radius,
            "step_scale": self.step_scale,
            "lever": list(self.lever),
            "gate_row": GATE_ROW,
            "agent_top": AGENT_TOP,
            "wall_height_range": [0.2, 0.5],
            "sheep_start_y": 0.9,
            "sheep_x_range": [-0.7, 0.7],
            "sheep_speed_range": [0.01, 0.04],
            "sentinel": SENTINEL,
        }

    def scaled(self, factor: float) -> "Shepherd":
        """Lever and cage radii multiplied by ``factor``."""
        return Shepherd(self.interaction_radius * factor, self.catch_radius * factor,
                        self.step_scale, self.lever)

    def reset(self, rng, n: int = 1) -> ShepherdState:
        agent = np.stack([rng.uniform(-0.9, 0.9, n), rng.uniform(-0.9, AGENT_TOP, n)], axis=1)
        cage = np.stack([rng.uniform(-0.9, 0.9, n), rng.uniform(-0.9, AGENT_TOP, n)], axis=1)
        sheep = np.stack([rng.uniform(-0.7, 0.7, n), np.full(n, 0.9)], axis=1)
        return ShepherdState(
            agent=agent,
            sheep=sheep,
            sheep_speed=rng.uniform(0.01, 0.04, n),
            cage=cage,
            carried=np.zeros(n, dtype=bool),
            wall=rng.uniform(0.2, 0.5, n),
            gate_open=np.zeros(n, dtype=bool),
            phase=np.full(n, ABOVE),
            caught=np.zeros(n, dtype=bool),
        )

    def step(self, state: ShepherdState, action: np.ndarray) -> ShepherdState:
        return shepherd_step(state, action, self)

    def observe(self, state: ShepherdState) -> np.ndarray:
        sheep = np.where(state.visible[:, None], state.sheep, SENTINEL)
        return np.concatenate([state.wall[:, None], state.agent, sheep, state.cage], axis=-1)


def shepherd_step(state: ShepherdState, action, env: Shepherd | None = None) -> ShepherdState:
    env = env or Shepherd()
    a = np.clip(np.asarray(action, dtype=float).reshape(-1, 3), -1.0, 1.0)
    move = env.step_scale * a[:, :2]
    lo = np.array([-1.0, -1.0])
    hi = np.array([1.0, AGENT_TOP])
    agent = np.clip(state.agent + move, lo, hi)
    grasp = a[:, 2] > 0
    near_cage = np.linalg.norm(state.cage - state.agent, axis=-1) < env.interaction_radius
    carried = grasp & (state.carried | near_cage)
    cage = np.where(carried[:, None], np.clip(state.cage + (agent - state.agent), lo, hi), state.cage)
    gate_open = state.gate_open | (np.linalg.norm(agent - np.asarray(env.lever), axis=-1) < env.interaction_radius)

    phase = state.phase.copy()
    y = state.sheep[:, 1].copy()
    caught = state.caught.copy()
    v = state.sheep_speed

    above = phase == ABOVE
    y = np.where(above, y - v, y)
    reached = above & (y <= state.wall)
    y = np.where(reached, state.wall, y)
    phase = np.where(reached, HIDDEN, phase)

    released = (phase == HIDDEN) & gate_open
    y = np.where(released, GATE_ROW, y)
    phase = np.where(released, BELOW, phase)

    # released sheep appear this step and start walking on the next
    walking = (state.phase == BELOW) & ~caught
    y = np.where(walking, np.maximum(y - v, -1.0), y)
    sheep = np.stack([state.sheep[:, 0], y], axis=1)
    dist = np.linalg.norm(sheep - cage, axis=-1)
    caught = caught | ((phase == BELOW) & (dist < env.catch_radius))
    return ShepherdState(agent, sheep, v, cage, carried, state.wall, gate_open, phase, caught)


def rollout(env: Shepherd, state: ShepherdState, actions: np.ndarray):
    """Observations ``(N, T, 7)`` plus event steps.

    Returns ``obs, events, final_state`` with ``events`` holding per-episode
    arrays ``hide_step``, ``reappear_step``, ``lever_step``, ``caught_step``
    and ``hide_x``/``reappear_x`` (-1 / NaN when the event did not happen).
    """
    N, T, _ = actions.shape
    obs = [env.observe(state)]
    ev = {k: np.full(N, -1) for k in ("hide_step", "reappear_step", "lever_step", "caught_step")}
    hide_x = np.full(N, np.nan)
    reappear_x = np.full(N, np.nan)
    for t in range(1, T):
        prev = state
        state = env.step(state, actions[:, t - 1])
        hid = (prev.phase != HIDDEN) & (state.phase == HIDDEN)
        ev["hide_step"][hid & (ev["hide_step"] < 0)] = t
        hide_x[hid] = state.sheep[hid, 0]
        back = (prev.phase == HIDDEN) & (state.phase == BELOW)
        ev["reappear_step"][back] = t
        reappear_x[back] = state.sheep[back, 0]
        ev["lever_step"][state.gate_open & ~prev.gate_open] = t
        ev["caught_step"][state.caught & ~prev.caught] = t
        obs.append(env.observe(state))
    ev["hide_x"] = hide_x
    ev["reappear_x"] = reappear_x
    return np.stack(obs, axis=1), ev, state
