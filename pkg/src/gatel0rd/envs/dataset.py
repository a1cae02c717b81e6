"""Episode datasets: balanced generation, JSON-Lines files and manifests."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from ..rng import RngStream, as_stream
from . import billiard, rrc, shepherd
from .policies import collect_policy_actions

ENV_KINDS = ("billiard", "rrc", "shepherd")
DEFAULT_LENGTH = {"billiard": 52, "rrc": 50, "shepherd": 100}
DEFAULT_POLICY = {"billiard": "rand", "rrc": "time", "shepherd": "shepherd"}
DEFAULT_BALANCE = {
    "billiard": {"pocket": 0.15},
    "rrc": {"control": 0.5},
    "shepherd": {"lever": 0.75, "caught": 0.25},
}


class QuotaError(RuntimeError):
    """Rejection sampling could not meet the requested event quotas."""


class DatasetFormatError(ValueError):
    pass


@dataclass
class Episode:
    id: str
    obs: np.ndarray              # (T, D_o)
    act: np.ndarray              # (T, D_a), D_a may be 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=float)
        self.act = np.asarray(self.act, dtype=float).reshape(len(self.obs), -1)
        if self.obs.ndim != 2:
            raise DatasetFormatError(f"episode {self.id}: obs must be 2-D, got shape {self.obs.shape}")

    @property
    def length(self) -> int:
        return len(self.obs)

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id,
            "obs": self.obs.tolist(),
            "act": self.act.tolist(),
            "meta": self.meta,
        })


def make_env(kind: str, interaction_scale: float = 1.0):
    if kind == "billiard":
        return billiard.Billiard()
    if kind == "rrc":
        return rrc.RobotRemoteControl().scaled(interaction_scale)
    if kind == "shepherd":
        return shepherd.Shepherd().scaled(interaction_scale)
    raise ValueError(f"unknown env {kind!r}; valid names: {', '.join(ENV_KINDS)}")


def _stack_states(states):
    cls = type(states[0])
    return cls(**{f.name: np.concatenate([getattr(s, f.name) for s in states]) for f in fields(cls)})


def _nullable(x):
    x = x.item() if hasattr(x, "item") else x
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, int) and x < 0:
        return None
    return x


def simulate(kind: str, streams: list[RngStream], policy: str, T: int, env=None):
    """Roll out one episode per stream; returns obs, act and per-episode metas."""
    env = env or make_env(kind)
    states, acts = [], []
    for s in streams:
        states.append(env.reset(s, 1))
        acts.append(collect_policy_actions(kind, policy, T, s, 1))
    state = _stack_states(states)
    act = np.concatenate(acts)
    if kind == "billiard":
        obs, pocket = billiard.rollout(env, state, T)
        metas = [{"pocket_step": _nullable(p), "pocketed": bool(p >= 0)} for p in pocket]
    elif kind == "rrc":
        obs, onset, final = rrc.rollout(env, state, act)
        metas = [{"control_onset": _nullable(o), "controlled": bool(c)}
                 for o, c in zip(onset, final.control)]
    else:
        obs, ev, final = shepherd.rollout(env, state, act)
        metas = []
        for i in range(len(streams)):
            m = {k: _nullable(ev[k][i]) for k in ev}
            m["lever"] = bool(final.gate_open[i])
            m["caught"] = bool(final.caught[i])
            metas.append(m)
    return obs, act, metas


def _category(kind: str, meta: dict) -> str:
    if kind == "billiard":
        return "pocket" if meta["pocketed"] else "other"
    if kind == "rrc":
        return "control" if meta["controlled"] else "other"
    if meta["caught"]:
        return "caught"
    return "lever" if meta["lever"] else "other"


def _quotas(kind: str, count: int, balance: dict) -> dict:
    if kind == "billiard":
        n = math.ceil(balance.get("pocket", 0.0) * count - 1e-9)
        return {"pocket": n, "other": count - n}
    if kind == "rrc":
        n = round(balance.get("control", 0.5) * count)
        return {"control": n, "other": count - n}
    caught = round(balance.get("caught", 0.25) * count)
    lever = round(balance.get("lever", 0.75) * count)
    if caught > lever:
        raise ValueError("caught fraction cannot exceed lever fraction (catching needs the gate open)")
    return {"caught": caught, "lever": lever - caught, "other": count - lever}


def generate_dataset(kind: str, count: int, T: int | None = None, policy: str | None = None,
                     balance: dict | None = None, seed=0, max_attempts: int | None = None,
                     chunk: int = 256) -> list[Episode]:
    """Rejection-sample ``count`` episodes meeting the event quotas exactly.

    Candidate ``i`` is simulated from the stream ``RngStream(seed).derive(i)``,
    so results depend only on the seed and the arguments.
    """
    if kind not in ENV_KINDS:
        raise ValueError(f"unknown env {kind!r}; valid names: {', '.join(ENV_KINDS)}")
    T = T or DEFAULT_LENGTH[kind]
    policy = policy or DEFAULT_POLICY[kind]
    balance = DEFAULT_BALANCE[kind] if balance is None else balance
    quotas = _quotas(kind, count, balance)
    if any(v < 0 for v in quotas.values()):
        raise ValueError(f"infeasible balance {balance} for {count} episodes")
    root = as_stream(seed)
    max_attempts = max_attempts or 500 * max(count, 1)
    env = make_env(kind)
    filled = {k: 0 for k in quotas}
    episodes: list[Episode] = []
    attempt = 0
    while len(episodes) < count and attempt < max_attempts:
        n = min(chunk, max_attempts - attempt)
        streams = [root.derive(attempt + j) for j in range(n)]
        obs, act, metas = simulate(kind, streams, policy, T, env)
        for j in range(n):
            cat = _category(kind, metas[j])
            if filled[cat] < quotas[cat]:
                filled[cat] += 1
                meta = dict(metas[j], category=cat, attempt=attempt + j)
                episodes.append(Episode(f"{kind}-{root.seed}-{attempt + j}", obs[j], act[j], meta))
                if len(episodes) == count:
                    break
        attempt += n
    if len(episodes) < count:
        achieved = {k: filled[k] / max(count, 1) for k in filled}
        raise QuotaError(
            f"could not meet quotas {quotas} within {max_attempts} attempts; "
            f"achieved fractions {achieved}"
        )
    return episodes


def to_arrays(episodes: list[Episode]) -> tuple[np.ndarray, np.ndarray]:
    if not episodes:
        raise ValueError("empty dataset")
    lengths = {e.length for e in episodes}
    if len(lengths) != 1:
        raise DatasetFormatError(f"episodes have differing lengths {sorted(lengths)}")
    return np.stack([e.obs for e in episodes]), np.stack([e.act for e in episodes])


def write_jsonl(path, episodes: list[Episode]) -> None:
    with open(path, "w") as fh:
        for e in episodes:
            fh.write(e.to_json())
            fh.write("\n")


def read_jsonl(path) -> list[Episode]:
    episodes = []
    obs_dim = act_dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                ep = Episode(doc["id"], doc["obs"], doc["act"], doc.get("meta", {}))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
            if len(doc["act"]) != len(doc["obs"]):
                raise DatasetFormatError(f"{path}: line {lineno}: obs and act lengths differ")
            if obs_dim is None:
                obs_dim, act_dim = ep.obs.shape[1], ep.act.shape[1]
            elif (ep.obs.shape[1], ep.act.shape[1]) != (obs_dim, act_dim):
                raise DatasetFormatError(
                    f"{path}: line {lineno}: dimensions {(ep.obs.shape[1], ep.act.shape[1])} "
                    f"differ from {(obs_dim, act_dim)}"
                )
            episodes.append(ep)
    return episodes


def manifest(kind: str, policy: str, seed: int, count: int, T: int, balance: dict) -> dict:
    return {
        "env": kind,
        "policy": policy,
        "seed": seed,
        "count": count,
        "length": T,
        "balance": balance,
        "geometry": make_env(kind).geometry(),
    }
