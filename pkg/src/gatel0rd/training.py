"""Losses, scheduled sampling and the minibatch training loop.

Loss per sequence: sum over predicted steps of the mean-over-dims squared
error between predicted and real observation, plus ``lam`` times the
per-step gate penalty summed over latent dims; both averaged over the batch.
"""
from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .model import ForwardResult, GateTrace, SeqModel
from .optim import ParamStore, adam_step, clip_grad_norm
from .rng import RngStream, as_stream

log = logging.getLogger(__name__)

PENALTIES = ("l0", "l1", "l2", "none")
LOG_COLUMNS = ("epoch", "task_loss", "gate_penalty", "total_loss", "gate_open_rate", "p_i", "wall_ms")


class TrainingDiverged(RuntimeError):
    """Loss or rollout became non-finite; the model holds the last good parameters."""


@dataclass
class TrainConfig:
    lam: float = 0.001
    penalty: str = "l0"
    lr: float = 0.001
    batch_size: int = 64
    epochs: int = 300
    k: float = 0.998
    p_min: float = 0.0
    clip: float = 0.1
    seed: int = 0
    bptt_window: int = 0  # 0 = full backpropagation through time

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.penalty not in PENALTIES:
            raise ValueError(f"unknown penalty {self.penalty!r}; expected one of {PENALTIES}")
        if not 0 <= self.p_min <= 1:
            raise ValueError("p_min must lie in [0, 1]")
        if not 0 < self.k <= 1:
            raise ValueError("k must lie in (0, 1]")
        if self.clip <= 0:
            raise ValueError("clip threshold must be > 0")
        if self.bptt_window < 0:
            raise ValueError("bptt_window must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    task: float
    penalty: float
    total: float
    gate_open_rate: float


# -- penalties ----------------------------------------------------------------


def l0_gate_penalty(gates: T.Tensor) -> T.Tensor:
    """Number of open gates, ``sum Theta(Lambda)``, with a straight-through gradient."""
    if gates.size == 0:
        raise ValueError("empty gate trace")
    return T.sum(T.heaviside_ste(gates))


def l1_l2_gate_penalty(gates: T.Tensor, kind: str, gate_variant: str | None = None) -> T.Tensor:
    """``sum |Lambda|`` (l1) or ``sum Lambda^2`` (l2) over steps and dims."""
    if gate_variant is not None and gate_variant != "sigmoid":
        warnings.warn(f"{kind} penalty is meant for sigmoid gates, got {gate_variant}", stacklevel=2)
    if kind == "l1":
        return T.sum(T.absolute(gates))
    if kind == "l2":
        return T.sum(T.square(gates))
    raise ValueError(f"kind must be 'l1' or 'l2', got {kind!r}")


def gate_penalty(gates: T.Tensor | None, kind: str, gate_variant: str | None = None) -> T.Tensor | None:
    if gates is None or kind == "none":
        return None
    if kind == "l0":
        return l0_gate_penalty(gates)
    return l1_l2_gate_penalty(gates, kind, gate_variant)


def sequence_loss(result: ForwardResult, lam: float, penalty: str = "l0",
                  gate_variant: str | None = None) -> tuple[T.Tensor, LossReport]:
    """Batch-mean of (summed task MSE + lam * summed gate penalty)."""
    if not np.all(np.isfinite(result.pred.data)):
        rows = np.where(~np.isfinite(result.pred.data).all(axis=1))[0]
        step, seq = divmod(int(rows[0]), result.batch)
        raise FloatingPointError(f"non-finite prediction in sequence {seq} at step {step}")
    task = T.scale(T.mse(result.pred, result.target), result.steps)
    pen = gate_penalty(result.gates, penalty, gate_variant)
    if pen is None:
        total = task
        pen_value = 0.0
    else:
        pen = T.scale(pen, 1.0 / result.batch)
        pen_value = pen.item()
        total = T.add(task, T.scale(pen, lam)) if lam != 0 else task
    rate = float(result.trace.opened.mean()) if result.trace.gated else 1.0
    report = LossReport(task.item(), pen_value, total.item(), rate)
    return total, report


# -- scheduled sampling ---------------------------------------------------------


def scheduled_sampling_prob(epoch: int, k: float = 0.998, p_min: float = 0.0) -> float:
    """``max(k**epoch, p_min)``: probability of feeding the real observation."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return max(k ** epoch, p_min)


def build_feed_mask(T_len: int, p: float, rng: RngStream, warmup: int = 1,
                    batch: int | None = None) -> np.ndarray:
    """Per-step Bernoulli(p) mask of real inputs; warm-up steps are always real."""
    if not 0 <= p <= 1:
        raise ValueError(f"probability must lie in [0, 1], got {p}")
    shape = (T_len,) if batch is None else (batch, T_len)
    mask = rng.random(shape) < p
    mask[..., :warmup] = True
    return mask


# -- training loop --------------------------------------------------------------


def _batches(n: int, size: int, order: np.ndarray) -> Iterable[np.ndarray]:
    for start in range(0, n, size):
        yield order[start:start + size]


def train(model: SeqModel, obs: np.ndarray, act: np.ndarray | None, config: TrainConfig,
          callbacks: Iterable[Callable] = (), log_path=None,
          record_wall_time: bool = True) -> list[LossReport]:
    """Train ``model`` in place on ``obs`` (N, T, D_o) / ``act`` (N, T, D_a).

    Returns one :class:`LossReport` per epoch (batch-averaged). Each callback
    is called as ``cb(epoch, report, model)``. If the loss turns non-finite
    the parameters are rolled back to the last good step and
    :class:`TrainingDiverged` is raised.
    """
    obs = np.asarray(obs, dtype=T.get_dtype())
    if obs.ndim != 3 or obs.shape[0] == 0:
        raise ValueError(f"expected a non-empty (N, T, D) observation array, got shape {obs.shape}")
    if act is not None and np.asarray(act).shape[-1] > 0:
        act = np.asarray(act, dtype=T.get_dtype())
        if act.shape[:2] != obs.shape[:2]:
            raise T.ShapeError(f"actions {act.shape} do not match observations {obs.shape}")
    else:
        act = None
    N, Tn, _ = obs.shape
    root = as_stream(config.seed)
    shuffle_rng, mask_rng, noise_rng = root.derive(1), root.derive(2), root.derive(3)
    named = model.named_parameters()
    store = ParamStore(named)
    params = store.tensors()
    gate_variant = getattr(model.cell, "gate_variant", None)
    w = model.config.warmup
    history: list[LossReport] = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            p_i = scheduled_sampling_prob(epoch, config.k, config.p_min)
            order = shuffle_rng.permutation(N)
            sums = np.zeros(4)
            for idx in _batches(N, config.batch_size, order):
                b_obs = obs[idx]
                b_act = act[idx] if act is not None else None
                feed = "teacher" if p_i >= 1.0 else build_feed_mask(Tn, p_i, mask_rng, w, len(idx))
                good = store.snapshot()
                try:
                    with T.Tape() as tape:
                        result = model.forward(b_obs, b_act, feed=feed, train=True, rng=noise_rng,
                                               truncate=config.bptt_window)
                        loss, report = sequence_loss(result, config.lam, config.penalty, gate_variant)
                    if not np.isfinite(report.total):
                        raise FloatingPointError(f"non-finite loss in epoch {epoch}")
                    grads = tape.gradient(loss, params)
                    if not all(np.all(np.isfinite(g)) for g in grads):
                        raise FloatingPointError(f"non-finite gradient in epoch {epoch}")
                except FloatingPointError as exc:
                    store.restore(good)
                    raise TrainingDiverged(str(exc)) from exc
                grads, _ = clip_grad_norm(grads, config.clip)
                adam_step(store, grads, config.lr)
                frac = len(idx) / N
                sums += frac * np.array([report.task, report.penalty, report.total, report.gate_open_rate])
            report = LossReport(*map(float, sums))
            history.append(report)
            if writer is not None:
                wall = int(round((time.perf_counter() - t0) * 1000)) if record_wall_time else 0
                writer.writerow([epoch, repr(report.task), repr(report.penalty), repr(report.total),
                                 repr(report.gate_open_rate), repr(p_i), wall])
                fh.flush()
            for cb in callbacks:
                cb(epoch, report, model)
    finally:
        if fh is not None:
            fh.close()
    return history


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k in ("epoch", "wall_ms") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
