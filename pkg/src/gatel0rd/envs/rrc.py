"""Robot Remote Control: reaching a fixed computer hands the agent's actions
to a robot in another room. Whether the robot is controlled is not observed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COMPUTER = (0.8, 0.8)
GOAL = (-0.6, -0.6)


@dataclass
class RrcState:
    agent: np.ndarray    # (N, 2)
    robot: np.ndarray    # (N, 2)
    control: np.ndarray  # (N,) bool, latches once True


@dataclass
class RobotRemoteControl:
    interaction_radius: float = 0.1
    goal_radius: float = 0.15
    step_scale: float = 0.05
    computer: tuple = COMPUTER
    goal: tuple = GOAL

    obs_dim = 4
    act_dim = 2
    name = "rrc"

    def geometry(self) -> dict:
        return {
            "interaction_radius": self.interaction_radius,
            "goal_radius": self.goal_radius,
            "step_scale": self.step_scale,
            "computer": list(self.computer),
            "goal": list(self.goal),
        }

    def scaled(self, factor: float) -> "RobotRemoteControl":
        """Same layout with the computer's interaction radius multiplied by ``factor``."""
        return RobotRemoteControl(self.interaction_radius * factor, self.goal_radius,
                                  self.step_scale, self.computer, self.goal)

    def reset(self, rng, n: int = 1) -> RrcState:
        return RrcState(
            rng.uniform(-1.0, 1.0, (n, 2)),
            rng.uniform(-1.0, 1.0, (n, 2)),
            np.zeros(n, dtype=bool),
        )

    def step(self, state: RrcState, action: np.ndarray) -> RrcState:
        return rrc_step(state, action, self)

    def observe(self, state: RrcState) -> np.ndarray:
        return np.concatenate([state.agent, state.robot], axis=-1)

    def goal_distance(self, robot: np.ndarray) -> np.ndarray:
        return np.linalg.norm(robot - np.asarray(self.goal), axis=-1)

    def success(self, state: RrcState) -> np.ndarray:
        return self.goal_distance(state.robot) < self.goal_radius


def rrc_step(state: RrcState, action, env: RobotRemoteControl | None = None) -> RrcState:
    env = env or RobotRemoteControl()
    a = np.clip(np.asarray(action, dtype=float).reshape(state.agent.shape), -1.0, 1.0)
    agent = np.clip(state.agent + env.step_scale * a, -1.0, 1.0)
    near = np.linalg.norm(agent - np.asarray(env.computer), axis=-1) < env.interaction_radius
    control = state.control | near
    robot = np.where(control[:, None], np.clip(state.robot + env.step_scale * a, -1.0, 1.0), state.robot)
    return RrcState(agent, robot, control)


def rollout(env: RobotRemoteControl, state: RrcState, actions: np.ndarray):
    """Observations ``(N, T, 4)`` for actions ``(N, T, 2)`` and the control-onset step.

    ``onset[i] = t`` means applying ``actions[i, t]`` latched the control
    flag; -1 if never (or if control was latched from the start).
    """
    N, T, _ = actions.shape
    obs = [env.observe(state)]
    onset = np.full(N, -1)
    for t in range(T - 1):
        before = state.control
        state = env.step(state, actions[:, t])
        onset[(state.control & ~before)] = t
        obs.append(env.observe(state))
    return np.stack(obs, axis=1), onset, state
