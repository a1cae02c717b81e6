"""Synthetic data-collection policies."""
from __future__ import annotations

import numpy as np

POLICIES = ("rand", "time", "shepherd")
RAMP_START = 0.0001


def time_ramp(T: int) -> np.ndarray:
    """Action scale rising linearly from 0.0001 at t=0 to 1.0 at t=T-1."""
    if T == 1:
        return np.ones(1)
    return np.linspace(RAMP_START, 1.0, T)


def collect_policy_actions(env_kind: str, policy: str, T: int, rng, n: int = 1) -> np.ndarray:
    """Actions ``(n, T, act_dim)`` for one of the collection policies.

    ``rand``: i.i.d. uniform in [-1, 1]. ``time``: uniform scaled by a linear
    ramp over the episode. ``shepherd``: uniform, with up/left moves favoured
    in a random 75% of episodes.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    dims = {"billiard": 0, "rrc": 2, "shepherd": 3}
    if env_kind not in dims:
        raise ValueError(f"unknown env {env_kind!r}")
    D = dims[env_kind]
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if D == 0:
        return np.zeros((n, T, 0))
    acts = rng.uniform(-1.0, 1.0, (n, T, D))
    if policy == "time":
        acts = acts * time_ramp(T)[None, :, None]
    elif policy == "shepherd":
        biased = rng.random(n) < 0.75
        # left: x in [-1, 0.5]; up: y in [-0.5, 1]
        bias = rng.uniform(0.0, 1.0, (n, T, 2))
        left = -1.0 + 1.5 * bias[..., 0]
        up = -0.5 + 1.5 * bias[..., 1]
        acts[biased, :, 0] = left[biased]
        acts[biased, :, 1] = up[biased]
    return acts
