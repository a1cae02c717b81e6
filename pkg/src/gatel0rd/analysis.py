"""Evaluation metrics and latent-trace exports."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import GateTrace, SeqModel

EVENT_KEYS = {"rrc": "control_onset", "shepherd": "lever_step", "billiard": "pocket_step"}


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def rollout(model: SeqModel, obs, act=None, feed="autoregressive", chunk: int = 256):
    """Eval-mode rollout in chunks; returns predictions ``(B, N, D_o)`` and the trace."""
    obs = np.asarray(obs, dtype=float)
    preds, traces = [], []
    for sl in _chunks(len(obs), chunk):
        res = model.forward(obs[sl], None if act is None else act[sl], feed=feed, train=False)
        preds.append(res.predictions())
        traces.append(res.trace)
    return np.concatenate(preds), _join_traces(traces)


def _join_traces(traces: list[GateTrace]) -> GateTrace:
    cat = lambda xs: None if xs[0] is None else np.concatenate(xs)
    return GateTrace(
        h=cat([t.h for t in traces]),
        pre=cat([t.pre for t in traces]),
        gate=cat([t.gate for t in traces]),
        opened=cat([t.opened for t in traces]),
    )


def nstep_error(model: SeqModel, obs, act=None, warmup: int | None = None,
                feed="autoregressive") -> dict:
    """Autoregressive prediction error from the first ``w`` observations.

    Per episode: mean over predicted steps and observation dimensions of the
    squared error. Returns mean, std and the per-episode values.
    """
    obs = np.asarray(obs, dtype=float)
    w = model.config.warmup if warmup is None else warmup
    if w != model.config.warmup:
        raise ValueError(f"model was built for warm-up {model.config.warmup}, not {w}")
    if obs.shape[1] <= w:
        raise ValueError(f"episodes of length {obs.shape[1]} are too short for warm-up {w}")
    pred, _ = rollout(model, obs, act, feed)
    per_ep = ((pred - obs[:, w:]) ** 2).mean(axis=(1, 2))
    return {"mean": float(per_ep.mean()), "std": float(per_ep.std()),
            "steps": int(obs.shape[1] - w), "per_episode": per_ep}


def gate_open_rate(trace: GateTrace) -> float:
    """Mean over episodes, steps and dimensions of the binary gate openings."""
    if not trace.gated:
        warnings.warn("cell has no sparsity gate; every step counts as an update", RuntimeWarning)
        return 1.0
    return float(trace.opened.mean())


def dims_changed(trace: GateTrace) -> float:
    """Latent dimensions that open at least once in a sequence, averaged over episodes."""
    if not trace.gated:
        warnings.warn("cell has no sparsity gate; every dimension counts as changed", RuntimeWarning)
        return float(trace.h.shape[-1])
    return float(trace.opened.any(axis=1).sum(axis=1).mean())


@dataclass
class Confusion:
    hits: int = 0
    misses: int = 0
    false_alarms: int = 0
    correct_rejections: int = 0

    @property
    def hit_rate(self) -> float:
        n = self.hits + self.misses
        return self.hits / n if n else float("nan")

    @property
    def miss_rate(self) -> float:
        n = self.hits + self.misses
        return self.misses / n if n else float("nan")

    @property
    def false_alarm_rate(self) -> float:
        n = self.false_alarms + self.correct_rejections
        return self.false_alarms / n if n else float("nan")

    @property
    def correct_rejection_rate(self) -> float:
        n = self.false_alarms + self.correct_rejections
        return self.correct_rejections / n if n else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(hit_rate=self.hit_rate, miss_rate=self.miss_rate,
                 false_alarm_rate=self.false_alarm_rate,
                 correct_rejection_rate=self.correct_rejection_rate)
        return d


def event_steps(metas: list[dict], key: str) -> list[list[int]]:
    """Per-episode event time indices from episode metadata; ``None`` means no event."""
    out = []
    for i, m in enumerate(metas):
        if key not in m:
            raise ValueError(f"episode {i} has no {key!r} annotation")
        v = m[key]
        out.append([] if v is None else [int(v)] if np.isscalar(v) else [int(x) for x in v])
    return out


def gating_classification(opened: np.ndarray | GateTrace, events: list[list[int]], warmup: int,
                          window: int = 0) -> Confusion:
    """Confusion counts of any-dimension gate openings against event steps.

    ``events[i]`` lists the time indices ``t`` of events in episode ``i``,
    where an event at ``t`` is caused by the input at time ``t`` (for rrc,
    the action that latched control). The cell consumes input ``t`` at trace
    step ``t - (w - 1)``. An event step counts as a hit if a gate opens within
    ``window`` steps of it; every other step is a non-event step.
    """
    if isinstance(opened, GateTrace):
        if not opened.gated:
            raise ValueError("gating classification needs a gated cell")
        opened = opened.opened
    any_open = np.asarray(opened)
    if any_open.ndim == 3:
        any_open = any_open.any(axis=2)
    B, N = any_open.shape
    if len(events) != B:
        raise ValueError(f"{len(events)} event lists for {B} episodes")
    c = Confusion()
    for i in range(B):
        is_event = np.zeros(N, dtype=bool)
        for t in events[i]:
            k = t - (warmup - 1)
            if 0 <= k < N:
                is_event[k] = True
        for k in range(N):
            if is_event[k]:
                lo, hi = max(0, k - window), min(N, k + window + 1)
                if any_open[i, lo:hi].any():
                    c.hits += 1
                else:
                    c.misses += 1
            elif any_open[i, k]:
                c.false_alarms += 1
            else:
                c.correct_rejections += 1
    return c


def reappearance_error(model: SeqModel, obs, act, reappear_steps) -> dict:
    """One-step error of the sheep's x position at the step it reappears.

    Observations up to the step before reappearance are fed in; the
    prediction for the reappearance step is compared with the truth.
    Episodes without a reappearance are skipped.
    """
    obs = np.asarray(obs, dtype=float)
    steps = np.array([-1 if s is None else s for s in reappear_steps])
    keep = steps >= model.config.warmup
    if not keep.any():
        raise ValueError("no episode has a reappearance after the warm-up")
    pred, _ = rollout(model, obs[keep], None if act is None else np.asarray(act)[keep], feed="teacher")
    idx = steps[keep] - model.config.warmup
    px = pred[np.arange(len(idx)), idx, 3]
    tx = obs[keep][np.arange(len(idx)), steps[keep], 3]
    err = np.abs(px - tx)
    return {"mean": float(err.mean()), "std": float(err.std()), "median": float(np.median(err)),
            "count": int(len(err)), "per_episode": err}


@dataclass
class MetricsReport:
    nstep_mse: float
    nstep_mse_std: float
    steps: int
    gate_open_rate: float
    dims_changed: float
    confusion: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def evaluate(model: SeqModel, obs, act=None, metas: list[dict] | None = None,
             event_key: str | None = None, window: int = 0) -> MetricsReport:
    """Autoregressive error, gate statistics and (if annotated) gating confusion."""
    pred, trace = rollout(model, obs, act)
    w = model.config.warmup
    per_ep = ((pred - np.asarray(obs)[:, w:]) ** 2).mean(axis=(1, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rate = gate_open_rate(trace)
        dims = dims_changed(trace)
    confusion = None
    if metas is not None and event_key is not None and trace.gated:
        # gating is judged on the teacher-fed pass, as the events happen in the real data
        _, tf_trace = rollout(model, obs, act, feed="teacher")
        confusion = gating_classification(tf_trace, event_steps(metas, event_key), w, window).to_dict()
    return MetricsReport(float(per_ep.mean()), float(per_ep.std()), int(pred.shape[1]), rate, dims, confusion)


# -- latent traces --------------------------------------------------------------


def trace_columns(H: int, Do: int) -> list[str]:
    return (["t", "open_count"] + [f"h_{j}" for j in range(1, H + 1)]
            + [f"hrel_{j}" for j in range(1, H + 1)] + [f"g_{j}" for j in range(1, H + 1)]
            + [f"pred_{j}" for j in range(1, Do + 1)])


def export_latent_trace(trace: GateTrace, predictions: np.ndarray, path) -> None:
    """Write one episode's latent trace as CSV.

    Row ``t`` holds the latent state after ``t`` updates; row 0 is the
    initial state (gates 0, predictions NaN). ``hrel`` is relative to the
    initial state. Cells without a gate report every gate as 1.
    """
    h = trace.h[0] if trace.h.ndim == 3 else trace.h
    N, H = h.shape[0] - 1, h.shape[1]
    preds = np.asarray(predictions).reshape(N, -1)
    if trace.gated:
        g = trace.gate[0] if trace.gate.ndim == 3 else trace.gate
    else:
        g = np.ones((N, H))
    g = np.vstack([np.zeros((1, H)), g])
    p = np.vstack([np.full((1, preds.shape[1]), np.nan), preds])
    rel = h - h[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(trace_columns(H, preds.shape[1]))
        for t in range(N + 1):
            row = [t, int((g[t] > 0).sum())]
            row += [repr(float(v)) for v in np.concatenate([h[t], rel[t], g[t], p[t]])]
            writer.writerow(row)


def read_latent_trace(path) -> dict[str, np.ndarray]:
    """Parse a trace CSV back into ``t``, ``open_count``, ``h``, ``hrel``, ``g`` and ``pred`` arrays."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in r] for r in reader]
    data = np.array(rows)
    cols = {name: i for i, name in enumerate(header)}
    pick = lambda prefix: data[:, [i for n, i in cols.items() if n.startswith(prefix + "_")]]
    return {
        "t": data[:, cols["t"]].astype(int),
        "open_count": data[:, cols["open_count"]].astype(int),
        "h": pick("h"),
        "hrel": pick("hrel"),
        "g": pick("g"),
        "pred": pick("pred"),
    }
