"""Sequence model: preprocessing net, latent initialisation net, recurrent
core and linear readout, rolled out over an observation/action sequence.

The core predicts scaled observation deltas. The observation fed back at the
next step is ``o_hat[t+1] = o_in[t] + c * y_hat[t]``, where ``o_in[t]`` is
whatever observation was fed at step ``t`` (real or generated).
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .cells import CellConfig, Mlp, MlpSpec, build_cell
from .rng import RngStream, as_stream
from .tensor import Tensor

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    obs_dim: int
    act_dim: int = 0
    cell: CellConfig = field(default_factory=CellConfig)
    warmup: int = 2
    pre_widths: list[int] = field(default_factory=lambda: [64, 32, 16])
    init_widths: list[int] = field(default_factory=lambda: [64, 32, 16])
    residual_scale: float = 0.1
    zero_init: bool = False

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.act_dim

    def to_dict(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "cell": self.cell.to_dict(),
            "warmup": self.warmup,
            "pre_widths": list(self.pre_widths),
            "init_widths": list(self.init_widths),
            "residual_scale": self.residual_scale,
            "zero_init": self.zero_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["cell"] = CellConfig.from_dict(d["cell"])
        return cls(**d)


@dataclass
class GateTrace:
    """Per-step record of one rollout, arrays indexed ``[batch, step, dim]``.

    ``h`` has one more step than the others: ``h[:, 0]`` is the initial state.
    ``pre``, ``gate`` and ``opened`` are ``None`` for cells without a
    sparsity gate.
    """

    h: np.ndarray
    pre: np.ndarray | None = None
    gate: np.ndarray | None = None
    opened: np.ndarray | None = None

    @property
    def gated(self) -> bool:
        return self.gate is not None

    def episode(self, i: int) -> "GateTrace":
        pick = lambda a: None if a is None else a[i:i + 1]
        return GateTrace(self.h[i:i + 1], pick(self.pre), pick(self.gate), pick(self.opened))


@dataclass
class ForwardResult:
    pred: Tensor            # predicted observations, time-major rows ((T-w)*B, obs_dim)
    target: np.ndarray      # matching real observations
    gates: Tensor | None    # gate activations, time-major rows ((T-w)*B, H)
    trace: GateTrace
    batch: int
    steps: int

    def predictions(self) -> np.ndarray:
        """Predicted observations as ``(batch, steps, obs_dim)``."""
        return self.pred.data.reshape(self.steps, self.batch, -1).transpose(1, 0, 2)


class SeqModel:
    """Pre-processing, context initialisation, recurrent core and read-out around any cell."""

    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        rng = as_stream(seed).derive(0)
        c = config
        if c.warmup < 1:
            raise ValueError("warm-up length must be >= 1")
        if c.pre_widths:
            self.f_pre = Mlp(c.input_dim, MlpSpec(c.pre_widths, "tanh"), rng, "f_pre")
            feat_dim = self.f_pre.out_dim
        else:
            self.f_pre = None
            feat_dim = c.input_dim
        self.cell = build_cell(c.cell, feat_dim, rng)
        self.f_init = Mlp(
            c.warmup * c.input_dim, MlpSpec(list(c.init_widths) + [self.cell.state_size], "tanh"),
            rng, "f_init",
        )
        self.f_post = Mlp(self.cell.output_dim, MlpSpec([c.obs_dim], "linear"), rng, "f_post")

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        if self.f_pre is not None:
            out += self.f_pre.named_parameters()
        out += self.cell.named_parameters()
        if not self.config.zero_init:
            out += self.f_init.named_parameters()
        out += self.f_post.named_parameters()
        return out

    def all_parameters(self) -> list[tuple[str, Tensor]]:
        """Like :meth:`named_parameters` but always including ``f_init``."""
        out = self.named_parameters()
        if self.config.zero_init:
            out += self.f_init.named_parameters()
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    @property
    def gated(self) -> bool:
        return self.cell.gated

    # -- rollout ------------------------------------------------------------

    def initial_state(self, x0: np.ndarray) -> Tensor:
        """``h_0`` from the first ``warmup`` inputs, ``x0`` shaped ``(B, w, D_x)``."""
        B = x0.shape[0]
        if self.config.zero_init:
            return Tensor(np.zeros((B, self.cell.state_size)))
        return self.f_init(Tensor(x0.reshape(B, -1)))

    def step(self, obs_in: Tensor, act: np.ndarray | None, state: Tensor,
             train: bool = False, rng: RngStream | None = None):
        """One recurrent step; returns ``(pred_next_obs, new_state, gate_info)``."""
        x = obs_in if act is None or act.shape[-1] == 0 else T.concat([obs_in, Tensor(act)])
        feat = self.f_pre(x) if self.f_pre is not None else x
        y, state, info = self.cell.step(feat, state, train, rng)
        y_hat = self.f_post(y)
        pred = T.add(obs_in, T.scale(y_hat, self.config.residual_scale))
        return pred, state, info

    def forward(self, obs, act=None, feed="teacher", train: bool = False,
                rng: RngStream | None = None, truncate: int = 0) -> ForwardResult:
        """Roll the model over ``obs`` (B, T, D_o) with actions ``act`` (B, T, D_a).

        ``feed`` is ``"teacher"``, ``"autoregressive"`` or a boolean mask of
        shape ``(T,)`` or ``(B, T)`` (True = feed the real observation).
        Predictions cover steps ``w .. T-1``. ``truncate > 0`` cuts the
        gradient path through the latent state every ``truncate`` steps.
        """
        obs = np.asarray(obs, dtype=T.get_dtype())
        if obs.ndim == 2:
            obs = obs[None]
        B, Tn, Do = obs.shape
        w = self.config.warmup
        if Do != self.config.obs_dim:
            raise T.ShapeError(f"model expects observations of width {self.config.obs_dim}, got {Do}")
        if Tn <= w:
            raise ValueError(f"sequence of length {Tn} is too short for warm-up {w}")
        if act is None or self.config.act_dim == 0:
            act = np.zeros((B, Tn, 0))
        else:
            act = np.asarray(act, dtype=T.get_dtype())
            if act.ndim == 2:
                act = act[None]
            if act.shape[:2] != (B, Tn) or act.shape[2] != self.config.act_dim:
                raise T.ShapeError(
                    f"actions of shape {act.shape} do not match observations {obs.shape} "
                    f"and action width {self.config.act_dim}"
                )
        mask = _resolve_feed(feed, B, Tn, w)
        state = self.initial_state(np.concatenate([obs[:, :w], act[:, :w]], axis=2))
        N = Tn - w
        if mask.all():
            return self._forward_teacher(obs, act, state, train, rng, truncate)

        gated = self.cell.gated
        preds, gates, pres, hs = [], [], [], [self.cell.latent(state.data)]
        prev_pred = None
        for t in range(w - 1, Tn - 1):
            if t == w - 1 or mask[:, t].all():
                obs_in = Tensor(obs[:, t])
            elif not mask[:, t].any():
                obs_in = prev_pred
            else:
                obs_in = T.where(mask[:, t:t + 1], obs[:, t], prev_pred)
            pred, state, info = self.step(obs_in, act[:, t], state, train, rng)
            if truncate and (t - w + 2) % truncate == 0:
                state = state.detach()
            if not np.all(np.isfinite(pred.data)):
                raise FloatingPointError(f"non-finite prediction at step {t + 1}")
            preds.append(pred)
            hs.append(self.cell.latent(state.data))
            if gated:
                gates.append(info.gate)
                pres.append(info.pre.data)
            prev_pred = pred
        pred_all = T.concat(preds, axis=0)
        target = obs[:, w:].transpose(1, 0, 2).reshape(N * B, Do)
        return ForwardResult(
            pred=pred_all,
            target=target,
            gates=T.concat(gates, axis=0) if gated else None,
            trace=_make_trace(hs, pres, gates, gated),
            batch=B,
            steps=N,
        )

    def _forward_teacher(self, obs, act, state, train, rng, truncate=0) -> ForwardResult:
        # every input is real: batch the feed-forward parts over time
        B, Tn, Do = obs.shape
        w = self.config.warmup
        N = Tn - w
        x_all = np.concatenate([obs, act], axis=2)[:, w - 1:Tn - 1].transpose(1, 0, 2).reshape(N * B, -1)
        x_t = Tensor(x_all)
        feats = self.f_pre(x_t) if self.f_pre is not None else x_t
        gated = self.cell.gated
        ys, gates, pres, hs = [], [], [], [self.cell.latent(state.data)]
        for k in range(N):
            feat = T.take_rows(feats, k * B, (k + 1) * B)
            y, state, info = self.cell.step(feat, state, train, rng)
            if truncate and (k + 1) % truncate == 0:
                state = state.detach()
            ys.append(y)
            hs.append(self.cell.latent(state.data))
            if gated:
                gates.append(info.gate)
                pres.append(info.pre.data)
        y_hat = self.f_post(T.concat(ys, axis=0))
        pred = T.add(Tensor(x_all[:, :Do]), T.scale(y_hat, self.config.residual_scale))
        if not np.all(np.isfinite(pred.data)):
            bad = int(np.argmax(~np.isfinite(pred.data).all(axis=1))) // B
            raise FloatingPointError(f"non-finite prediction at step {w + bad}")
        target = obs[:, w:].transpose(1, 0, 2).reshape(N * B, Do)
        return ForwardResult(
            pred=pred,
            target=target,
            gates=T.concat(gates, axis=0) if gated else None,
            trace=_make_trace(hs, pres, gates, gated),
            batch=B,
            steps=N,
        )

    # -- variants -----------------------------------------------------------

    def copy(self) -> "SeqModel":
        return copy.deepcopy(self)

    def to_checkpoint(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "params": {
                name: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
                for name, p in self.all_parameters()
            },
        }

    @classmethod
    def from_checkpoint(cls, doc: dict) -> "SeqModel":
        if doc.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
        model = cls(ModelConfig.from_dict(doc["config"]))
        params = dict(model.all_parameters())
        missing = set(params) - set(doc["params"])
        if missing:
            raise ValueError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, entry in doc["params"].items():
            if name not in params:
                raise ValueError(f"checkpoint has unknown parameter {name!r}")
            arr = np.asarray(entry["data"], dtype=T.get_dtype()).reshape(entry["shape"])
            if arr.shape != params[name].shape:
                raise T.ShapeError(f"parameter {name!r}: checkpoint shape {arr.shape}, model {params[name].shape}")
            params[name].data = arr
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_checkpoint()))

    @classmethod
    def load(cls, path) -> "SeqModel":
        return cls.from_checkpoint(json.loads(Path(path).read_text()))


def zero_init_ablation(model: SeqModel) -> SeqModel:
    """Copy of ``model`` whose initial latent state is zero (``f_init`` bypassed)."""
    ablated = model.copy()
    ablated.config = copy.deepcopy(model.config)
    ablated.config.zero_init = True
    return ablated


def plain_output_ablation(config: ModelConfig) -> ModelConfig:
    """Config whose GateL0RD output is ``p(x, h)`` alone, without the ``o`` branch."""
    if config.cell.kind != "gatel0rd":
        raise ValueError("the output ablation applies to GateL0RD cells only")
    out = copy.deepcopy(config)
    out.cell.plain_output = True
    return out


def _resolve_feed(feed, B: int, Tn: int, w: int) -> np.ndarray:
    if isinstance(feed, str):
        if feed == "teacher":
            mask = np.ones((B, Tn), dtype=bool)
        elif feed == "autoregressive":
            mask = np.zeros((B, Tn), dtype=bool)
        else:
            raise ValueError(f"unknown feed {feed!r}; expected 'teacher', 'autoregressive' or a mask")
    else:
        mask = np.asarray(feed, dtype=bool)
        if mask.ndim == 1 and mask.shape[0] == Tn:
            mask = np.broadcast_to(mask, (B, Tn))
        if mask.shape != (B, Tn):
            raise T.ShapeError(f"feed mask of shape {mask.shape} does not match (batch, time) = {(B, Tn)}")
        mask = mask.copy()
    mask[:, :w] = True
    return mask


def _make_trace(hs, pres, gates, gated) -> GateTrace:
    h = np.stack(hs, axis=1)
    if not gated:
        return GateTrace(h=h)
    gate = np.stack([g.data for g in gates], axis=1)
    return GateTrace(h=h, pre=np.stack(pres, axis=1), gate=gate, opened=gate > 0)

