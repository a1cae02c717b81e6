"""Sampling-based model-predictive control (iCEM) over a learned or exact model.

Candidate action sequences are ``mean + std * colored_noise`` clamped to
[-1, 1]. Each CEM iteration scores them with a task cost, keeps the elites
and refits the sampling distribution with momentum. The MPC loop executes the
first action(s), feeds the real observation back and replans.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .envs import rrc, shepherd
from .envs.dataset import make_env
from .rng import RngStream, as_stream

TASKS = ("rrc", "shepherd")
TASK_BUDGET = {"rrc": 50, "shepherd": 60}
ABOVE_GATE_COST = 10.0
PLANNING_RADIUS_SCALE = 1.5
PLAN_LOG_COLUMNS = ("step", "iter", "best_cost", "elite_mean", "elite_std")


@dataclass
class ICemConfig:
    horizon: int = 50
    samples: int = 256
    iterations: int = 3
    elites: int = 26
    beta: float = 3.0
    init_std: float = 1.0
    momentum: float = 0.1
    shift: bool = True
    replan_stride: int = 1
    keep_elites: float = 0.3

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.iterations < 1:
            raise ValueError("at least one CEM iteration is required")
        if not 1 <= self.elites < self.samples:
            raise ValueError(f"elite count must lie in [1, samples), got {self.elites} of {self.samples}")
        if self.beta < 0:
            raise ValueError("colored-noise exponent must be >= 0")
        if self.init_std <= 0:
            raise ValueError("initial std must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.replan_stride < 1:
            raise ValueError("replan stride must be >= 1")
        if not 0 <= self.keep_elites <= 1:
            raise ValueError("elite reuse fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ICemConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown planner config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class PlanResult:
    actions: np.ndarray         # (H, D_a) best sequence seen
    cost: float
    stats: list[dict] = field(default_factory=list)  # per iteration: iter, best_cost, elite_mean, elite_std
    mean: np.ndarray | None = None
    elites: np.ndarray | None = None


def colored_noise(T: int, D: int, beta: float, rng, n: int | None = None) -> np.ndarray:
    """Gaussian noise with power spectrum ~ 1/f**beta along time.

    Spectral synthesis: random Fourier coefficients scaled by f**(-beta/2)
    (frequencies below 1/T clipped to 1/T, so the constant component is kept)
    and divided by the exact expected standard deviation, so the output has
    unit variance in expectation. Returns ``(T, D)``, or ``(n, T, D)`` when ``n`` is given.
    ``beta=0`` is white noise.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = as_stream(rng)
    shape = (1 if n is None else n, D)
    if T == 1:
        out = rng.standard_normal(shape + (1,))
    else:
        f = np.fft.rfftfreq(T)
        f[f < 1.0 / T] = 1.0 / T
        F = len(f)
        sd_re = f ** (-beta / 2.0)
        sd_im = sd_re.copy()
        # the constant (and, for even T, the Nyquist) term is real
        real_only = [0, F - 1] if T % 2 == 0 else [0]
        sd_re[real_only] *= np.sqrt(2.0)
        sd_im[real_only] = 0.0
        basis_re = np.fft.irfft(np.eye(F), n=T, axis=-1)
        basis_im = np.fft.irfft(1j * np.eye(F), n=T, axis=-1)
        var = np.mean(sd_re[:, None] ** 2 * basis_re ** 2 + sd_im[:, None] ** 2 * basis_im ** 2) * F
        re = rng.standard_normal(shape + (F,)) * sd_re
        im = rng.standard_normal(shape + (F,)) * sd_im
        out = np.fft.irfft(re + 1j * im, n=T, axis=-1) / np.sqrt(var)
    out = np.swapaxes(out, -1, -2)  # (., T, D)
    return out[0] if n is None else out


# -- forward models -------------------------------------------------------------


class EnvModel:
    """Exact simulator used as the planning model, started from ``state``."""

    def __init__(self, env, state):
        self.env = env
        self.state = state

    def rollout(self, actions: np.ndarray) -> np.ndarray:
        S, H, _ = actions.shape
        state = _tile_state(self.state, S)
        out = np.empty((S, H, self.env.obs_dim))
        for t in range(H):
            state = self.env.step(state, actions[:, t])
            out[:, t] = self.env.observe(state)
        return out


class LearnedModel:
    """A trained :class:`~gatel0rd.model.SeqModel` as the planning model.

    The observed prefix ``obs[0..t]`` (with ``act[0..t-1]``) is replayed with
    real inputs to reach the current latent state; the imagined future is
    then generated autoregressively.
    """

    def __init__(self, model, obs_prefix: np.ndarray, act_prefix: np.ndarray):
        self.model = model
        self.obs = np.asarray(obs_prefix, dtype=float)
        self.act = np.asarray(act_prefix, dtype=float).reshape(-1, model.config.act_dim)
        if len(self.obs) < model.config.warmup:
            raise ValueError(f"need at least {model.config.warmup} observed steps, got {len(self.obs)}")
        if len(self.act) != len(self.obs) - 1:
            raise ValueError("the action prefix must be one step shorter than the observation prefix")

    def rollout(self, actions: np.ndarray) -> np.ndarray:
        S, H, Da = actions.shape
        t = len(self.obs) - 1
        Tn = t + 1 + H
        obs = np.zeros((S, Tn, self.obs.shape[1]))
        obs[:, :t + 1] = self.obs
        act = np.zeros((S, Tn, Da))
        act[:, :t] = self.act
        act[:, t:t + H] = actions
        mask = np.zeros(Tn, dtype=bool)
        mask[:t + 1] = True
        result = self.model.forward(obs, act, feed=mask, train=False)
        return result.predictions()[:, -H:]


def _tile_state(state, n: int):
    cls = type(state)
    return cls(**{f.name: np.repeat(getattr(state, f.name), n, axis=0) for f in fields(cls)})


# -- costs ----------------------------------------------------------------------


def task_costs(trajectory: np.ndarray, task: str, env=None) -> np.ndarray | float:
    """Summed per-step cost of observation trajectories ``(..., H, D_o)``.

    rrc: robot-to-goal distance. shepherd: sheep-to-cage distance, replaced by
    a constant while the sheep has not come through the gate.
    """
    traj = np.asarray(trajectory, dtype=float)
    if task == "rrc":
        goal = np.asarray((env or rrc.RobotRemoteControl()).goal)
        per_step = np.linalg.norm(traj[..., 2:4] - goal, axis=-1)
    elif task == "shepherd":
        sheep = traj[..., 3:5]
        cage = traj[..., 5:7]
        above = (sheep[..., 1] > shepherd.GATE_ROW) | (sheep[..., 1] < (shepherd.SENTINEL - 1.0) / 2)
        per_step = np.where(above, ABOVE_GATE_COST, np.linalg.norm(sheep - cage, axis=-1))
    else:
        raise ValueError(f"unknown task {task!r}; valid tasks: {', '.join(TASKS)}")
    total = per_step.sum(axis=-1)
    return float(total) if np.ndim(total) == 0 else total


# -- planner --------------------------------------------------------------------


def icem_plan(model, cost_fn, config: ICemConfig, rng, act_dim: int, horizon: int | None = None,
              mean: np.ndarray | None = None, carry: np.ndarray | None = None) -> PlanResult:
    """Optimise an action sequence for ``cost_fn(model.rollout(actions))``.

    ``mean`` warm-starts the sampling mean and ``carry`` holds elite
    sequences from a previous plan, reused as extra candidates in the first
    iteration. Elites of each iteration join the next iteration's pool, so
    the elite mean cannot increase.
    """
    rng = as_stream(rng)
    H = horizon or config.horizon
    mu = np.zeros((H, act_dim)) if mean is None else np.array(mean, dtype=float)
    if mu.shape != (H, act_dim):
        raise ValueError(f"mean of shape {mu.shape} does not match horizon {H} and action width {act_dim}")
    std = np.full((H, act_dim), config.init_std)
    best_a, best_c = None, np.inf
    elites = None
    stats = []
    for it in range(config.iterations):
        n = config.samples
        cand = mu + std * colored_noise(H, act_dim, config.beta, rng, n)
        # earlier plans go first: a stable sort keeps them on cost ties, so
        # the executed plan stays coherent while the cost landscape is flat
        pool = []
        if elites is not None:
            pool.append(elites)
        if it == 0 and carry is not None and len(carry):
            pool.append(carry)
        if it == config.iterations - 1:
            pool.append(mu[None])
        pool.append(cand)
        cand = np.clip(np.concatenate(pool), -1.0, 1.0)
        costs = np.asarray(cost_fn(model.rollout(cand)), dtype=float)
        ok = np.isfinite(costs)
        if not ok.all():
            if not ok.any():
                raise FloatingPointError("every sampled trajectory has a non-finite cost")
            warnings.warn(f"discarding {int((~ok).sum())} samples with non-finite cost", RuntimeWarning)
            cand, costs = cand[ok], costs[ok]
        k = min(config.elites, len(costs))
        idx = np.argsort(costs, kind="stable")[:k]
        elites = cand[idx]
        ec = costs[idx]
        if ec[0] < best_c:
            best_c, best_a = float(ec[0]), elites[0].copy()
        mu = config.momentum * mu + (1 - config.momentum) * elites.mean(axis=0)
        std = config.momentum * std + (1 - config.momentum) * elites.std(axis=0)
        stats.append({"iter": it, "best_cost": best_c, "elite_mean": float(ec.mean()),
                      "elite_std": float(ec.std())})
    return PlanResult(best_a, best_c, stats, mu, elites)


# -- MPC ------------------------------------------------------------------------


@dataclass
class MpcResult:
    success: bool
    steps: int                  # steps executed
    obs: np.ndarray             # (steps + 1, D_o) real observations
    actions: np.ndarray         # (steps, D_a)
    log: list[dict] = field(default_factory=list)
    aborted: bool = False


def planning_env(task: str):
    """Environment with interaction radii enlarged for planning."""
    return make_env(task, PLANNING_RADIUS_SCALE)


def feasible_start(task: str, env, rng, budget: int, margin: float = 0.8, max_tries: int = 10000):
    """Random start state solvable within ``margin * budget`` steps.

    For rrc the estimate is the Chebyshev travel time from agent to computer
    plus from robot to goal; starts that already succeed are rejected. For shepherd the agent starts at the right edge
    holding the cage.
    """
    rng = as_stream(rng)
    if task == "shepherd":
        s = env.reset(rng, 1)
        s.agent[:, 0] = 0.9
        s.cage = s.agent.copy()
        s.carried[:] = True
        return s
    step = env.step_scale
    for _ in range(max_tries):
        s = env.reset(rng, 1)
        if env.success(s)[0]:
            continue  # already solved: not a planning problem
        reach = max(0.0, np.abs(s.agent[0] - np.asarray(env.computer)).max() - env.interaction_radius / np.sqrt(2))
        drive = np.abs(s.robot[0] - np.asarray(env.goal)).max() - env.goal_radius / np.sqrt(2)
        if np.ceil(reach / step) + np.ceil(max(drive, 0.0) / step) <= margin * budget:
            return s
    raise RuntimeError("could not sample a feasible start state")


def _success(task: str, env, state) -> bool:
    if task == "rrc":
        return bool(env.success(state)[0])
    return bool(state.caught[0])


def mpc_run(task: str, model=None, config: ICemConfig | None = None, rng=0, budget: int | None = None,
            start=None, env=None, log_path=None) -> MpcResult:
    """Run one receding-horizon episode; ``model=None`` plans with the exact simulator.

    Success means the task goal was reached within ``budget`` steps. A
    non-finite model rollout ends the episode as a failure.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; valid tasks: {', '.join(TASKS)}")
    config = config or ICemConfig()
    root = as_stream(rng)
    budget = budget or TASK_BUDGET[task]
    env = env or planning_env(task)
    state = start if start is not None else feasible_start(task, env, root.derive(0), budget)
    Da = env.act_dim
    if model is not None:
        if model.config.obs_dim != env.obs_dim or model.config.act_dim != Da:
            raise ValueError(
                f"model dimensions ({model.config.obs_dim}, {model.config.act_dim}) do not fit "
                f"task {task!r} ({env.obs_dim}, {Da})"
            )
    obs = [env.observe(state)[0]]
    acts: list[np.ndarray] = []
    log: list[dict] = []
    mean = carry = None
    cost_fn = lambda traj: task_costs(traj, task, env)
    plan_rng = root.derive(1)
    t = 0
    done = _success(task, env, state)
    aborted = False
    # a learned model needs its warm-up inputs before it can imagine anything
    w = model.config.warmup if model is not None else 1
    while t < budget and not done:
        H = min(config.horizon, budget - t)
        if t < w - 1:
            chunk = np.zeros((1, Da))
        else:
            fm = EnvModel(env, state) if model is None else LearnedModel(model, np.array(obs), np.array(acts).reshape(-1, Da))
            if mean is not None and len(mean) != H:
                mean = _fit_length(mean, H)
                carry = None if carry is None else np.stack([_fit_length(c, H) for c in carry])
            try:
                plan = icem_plan(fm, cost_fn, config, plan_rng, Da, H, mean, carry)
            except FloatingPointError:
                aborted = True
                break
            for s in plan.stats:
                log.append({"step": t, **s})
            k = config.replan_stride
            chunk = plan.actions[:k]
            if config.shift:
                mean = _shift(plan.mean, k)
                n_keep = int(round(config.keep_elites * len(plan.elites)))
                carry = np.stack([_shift(e, k) for e in plan.elites[:n_keep]]) if n_keep else None
        for a in chunk:
            if t >= budget or done:
                break
            state = env.step(state, a[None])
            obs.append(env.observe(state)[0])
            acts.append(a)
            t += 1
            done = _success(task, env, state)
    if log_path is not None:
        write_plan_log(log_path, log)
    return MpcResult(done and not aborted, t, np.array(obs), np.array(acts).reshape(-1, Da), log, aborted)


def _shift(seq: np.ndarray, k: int) -> np.ndarray:
    return np.concatenate([seq[k:], np.zeros((min(k, len(seq)),) + seq.shape[1:])])


def _fit_length(seq: np.ndarray, H: int) -> np.ndarray:
    if len(seq) >= H:
        return seq[:H]
    return np.concatenate([seq, np.zeros((H - len(seq),) + seq.shape[1:])])


def write_plan_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PLAN_LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in PLAN_LOG_COLUMNS})


def success_rate(task: str, episodes: int = 20, model=None, config: ICemConfig | None = None,
                 seed=0, log_dir=None) -> dict:
    """Run ``episodes`` seeded MPC episodes; returns rate and its standard error."""
    root = as_stream(seed)
    flags = []
    for i in range(episodes):
        path = None if log_dir is None else f"{log_dir}/plan_{i:03d}.csv"
        res = mpc_run(task, model, config, root.derive(i), log_path=path)
        flags.append(res.success)
    rate = float(np.mean(flags)) if flags else 0.0
    se = float(np.sqrt(rate * (1 - rate) / len(flags))) if flags else 0.0
    return {"task": task, "episodes": episodes, "successes": int(sum(flags)),
            "success_rate": rate, "std_error": se, "per_episode": [bool(f) for f in flags]}
