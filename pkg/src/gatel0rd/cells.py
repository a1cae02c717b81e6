"""Recurrent cells: GateL0RD, its ablations, and GRU / LSTM / Elman baselines.

Every cell carries its recurrent state as one 2-D tensor (``batch x
state_size``) so that initialisation networks, stacking and checkpointing can
treat all cells alike. ``step`` returns ``(output, new_state, gate_info)``;
``gate_info`` is ``None`` for cells without a sparsity gate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import ShapeError, Tensor

GATE_VARIANTS = ("retanh-stochastic", "retanh-deterministic", "sigmoid", "heaviside-ste")
CELL_KINDS = ("gatel0rd", "gru", "lstm", "elman")
ACTIVATIONS = ("tanh", "sigmoid", "linear")


@dataclass
class MlpSpec:
    """Layer widths of a feed-forward net; hidden layers always use tanh."""

    widths: list[int]
    output_activation: str = "tanh"
    hidden_activation: str = "tanh"

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ValueError(f"MLP needs at least one positive layer width, got {self.widths}")
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"output activation must be one of {ACTIVATIONS}")
        if self.hidden_activation != "tanh":
            raise ValueError("hidden activation is fixed to tanh")

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "output_activation": self.output_activation}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(d["widths"], d.get("output_activation", "tanh"))


def init_dense(in_dim: int, out_dim: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(in_dim)
    return rng.uniform(-bound, bound, (in_dim, out_dim)), np.zeros(out_dim)


class Mlp:
    def __init__(self, in_dim: int, spec: MlpSpec, rng: RngStream, name: str = "mlp"):
        self.in_dim = in_dim
        self.spec = spec
        self.name = name
        self.layers: list[tuple[Tensor, Tensor]] = []
        prev = in_dim
        for i, width in enumerate(spec.widths):
            w, b = init_dense(prev, width, rng)
            self.layers.append((T.parameter(w, f"{name}.{i}.w"), T.parameter(b, f"{name}.{i}.b")))
            prev = width
        self.out_dim = prev

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            act = self.spec.output_activation if i == last else self.spec.hidden_activation
            x = T.dense(x, w, b, act)
        return x

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for w, b in self.layers:
            out += [(w.name, w), (b.name, b)]
        return out


class GateInfo(NamedTuple):
    pre: Tensor   # gate input s (after noise)
    gate: Tensor  # gate activation Lambda(s)


def _check_width(name: str, x: Tensor, expected: int) -> None:
    if x.data.ndim != 2 or x.shape[1] != expected:
        raise ShapeError(f"{name}: expected input of width {expected}, got shape {x.shape}")


class GateL0RDCell:
    """Gated latent update ``h = h_prev + Lambda(s) * (r(x, h_prev) - h_prev)``.

    ``s = g(x, h_prev) + eps`` with ``eps ~ N(0, noise_variance)`` in training
    mode only. The output is ``p(x, h) * o(x, h)``, or just ``p(x, h)`` when
    ``plain_output`` is set.
    """

    kind = "gatel0rd"
    gated = True

    def __init__(self, input_dim: int, latent_dim: int, rng: RngStream, *,
                 g_spec: MlpSpec | None = None, r_spec: MlpSpec | None = None,
                 gate: str = "retanh-stochastic", noise_variance: float = 0.1,
                 plain_output: bool = False, name: str = "cell"):
        if gate not in GATE_VARIANTS:
            raise ValueError(f"unknown gate variant {gate!r}; expected one of {GATE_VARIANTS}")
        if noise_variance < 0:
            raise ValueError("noise variance must be >= 0")
        H = latent_dim
        self.input_dim, self.latent_dim = input_dim, H
        self.state_size = self.output_dim = H
        self.gate_variant = gate
        self.noise_variance = float(noise_variance)
        self.plain_output = plain_output
        g_spec = g_spec or MlpSpec([H], "linear")
        r_spec = r_spec or MlpSpec([H], "tanh")
        if g_spec.widths[-1] != H or r_spec.widths[-1] != H:
            raise ValueError("g and r must end in a layer of the latent width")
        self.g = Mlp(input_dim + H, MlpSpec(g_spec.widths, "linear"), rng, f"{name}.g")
        self.r = Mlp(input_dim + H, MlpSpec(r_spec.widths, "tanh"), rng, f"{name}.r")
        self.p = Mlp(input_dim + H, MlpSpec([H], "tanh"), rng, f"{name}.p")
        self.o = None if plain_output else Mlp(input_dim + H, MlpSpec([H], "sigmoid"), rng, f"{name}.o")

    def named_parameters(self):
        out = self.g.named_parameters() + self.r.named_parameters() + self.p.named_parameters()
        if self.o is not None:
            out += self.o.named_parameters()
        return out

    def latent(self, state: np.ndarray) -> np.ndarray:
        return state

    def gate_activation(self, s: Tensor) -> Tensor:
        if self.gate_variant.startswith("retanh"):
            return T.retanh(s)
        if self.gate_variant == "sigmoid":
            return T.sigmoid(s)
        return T.heaviside_ste(s)

    def step(self, x: Tensor, h_prev: Tensor, train: bool = False, rng: RngStream | None = None):
        _check_width("gatel0rd input", x, self.input_dim)
        _check_width("gatel0rd state", h_prev, self.latent_dim)
        xh = T.concat([x, h_prev])
        s = self.g(xh)
        if train and self.gate_variant != "retanh-deterministic" and self.noise_variance > 0:
            if rng is None:
                raise ValueError("training-mode GateL0RD step needs an RngStream for gate noise")
            s = T.gaussian_noise(s, self.noise_variance, rng)
        lam = self.gate_activation(s)
        proposal = self.r(xh)
        h = T.add(h_prev, T.mul(lam, T.sub(proposal, h_prev)))
        xh_new = T.concat([x, h])
        y = self.p(xh_new)
        if self.o is not None:
            y = T.mul(y, self.o(xh_new))
        return y, h, GateInfo(s, lam)


class GRUCell:
    """Textbook GRU: ``h = (1 - z) * h_prev + z * tanh(W [x, r * h_prev] + b)``."""

    kind = "gru"
    gated = False

    def __init__(self, input_dim: int, latent_dim: int, rng: RngStream, name: str = "cell"):
        H = latent_dim
        self.input_dim, self.latent_dim = input_dim, H
        self.state_size = self.output_dim = H
        self.z = Mlp(input_dim + H, MlpSpec([H], "sigmoid"), rng, f"{name}.z")
        self.r = Mlp(input_dim + H, MlpSpec([H], "sigmoid"), rng, f"{name}.r")
        self.n = Mlp(input_dim + H, MlpSpec([H], "tanh"), rng, f"{name}.n")

    def named_parameters(self):
        return self.z.named_parameters() + self.r.named_parameters() + self.n.named_parameters()

    def latent(self, state: np.ndarray) -> np.ndarray:
        return state

    def step(self, x: Tensor, h_prev: Tensor, train: bool = False, rng=None):
        _check_width("gru input", x, self.input_dim)
        _check_width("gru state", h_prev, self.latent_dim)
        xh = T.concat([x, h_prev])
        z = self.z(xh)
        reset = self.r(xh)
        candidate = self.n(T.concat([x, T.mul(reset, h_prev)]))
        h = T.add(T.mul(T.sub(1.0, z), h_prev), T.mul(z, candidate))
        return h, h, None


class LSTMCell:
    """LSTM with state ``[h, c]``; the trace reports the cell state ``c``."""

    kind = "lstm"
    gated = False

    def __init__(self, input_dim: int, latent_dim: int, rng: RngStream, name: str = "cell"):
        H = latent_dim
        self.input_dim, self.latent_dim = input_dim, H
        self.state_size = 2 * H
        self.output_dim = H
        self.i = Mlp(input_dim + H, MlpSpec([H], "sigmoid"), rng, f"{name}.i")
        self.f = Mlp(input_dim + H, MlpSpec([H], "sigmoid"), rng, f"{name}.f")
        self.o = Mlp(input_dim + H, MlpSpec([H], "sigmoid"), rng, f"{name}.o")
        self.c = Mlp(input_dim + H, MlpSpec([H], "tanh"), rng, f"{name}.c")

    def named_parameters(self):
        return (self.i.named_parameters() + self.f.named_parameters()
                + self.o.named_parameters() + self.c.named_parameters())

    def latent(self, state: np.ndarray) -> np.ndarray:
        return state[..., self.latent_dim:]

    def step(self, x: Tensor, state: Tensor, train: bool = False, rng=None):
        H = self.latent_dim
        _check_width("lstm input", x, self.input_dim)
        _check_width("lstm state", state, 2 * H)
        h_prev = T.take_cols(state, 0, H)
        c_prev = T.take_cols(state, H, 2 * H)
        xh = T.concat([x, h_prev])
        c = T.add(T.mul(self.f(xh), c_prev), T.mul(self.i(xh), self.c(xh)))
        h = T.mul(self.o(xh), T.tanh(c))
        return h, T.concat([h, c]), None


class ElmanCell:
    kind = "elman"
    gated = False

    def __init__(self, input_dim: int, latent_dim: int, rng: RngStream, name: str = "cell"):
        H = latent_dim
        self.input_dim, self.latent_dim = input_dim, H
        self.state_size = self.output_dim = H
        self.w = Mlp(input_dim + H, MlpSpec([H], "tanh"), rng, f"{name}.w")

    def named_parameters(self):
        return self.w.named_parameters()

    def latent(self, state: np.ndarray) -> np.ndarray:
        return state

    def step(self, x: Tensor, h_prev: Tensor, train: bool = False, rng=None):
        _check_width("elman input", x, self.input_dim)
        _check_width("elman state", h_prev, self.latent_dim)
        h = self.w(T.concat([x, h_prev]))
        return h, h, None


class StackedCell:
    """Up to three cells composed; each layer's output feeds the next."""

    gated = False

    def __init__(self, cells: list):
        if not 1 <= len(cells) <= 3:
            raise ValueError("a stack holds 1 to 3 cells")
        self.cells = cells
        self.kind = cells[0].kind
        self.input_dim = cells[0].input_dim
        self.latent_dim = sum(c.latent_dim for c in cells)
        self.output_dim = cells[-1].output_dim
        self.state_size = sum(c.state_size for c in cells)
        self._bounds = np.cumsum([0] + [c.state_size for c in cells])

    def named_parameters(self):
        return [item for c in self.cells for item in c.named_parameters()]

    def latent(self, state: np.ndarray) -> np.ndarray:
        parts = [c.latent(state[..., a:b]) for c, a, b in zip(self.cells, self._bounds[:-1], self._bounds[1:])]
        return np.concatenate(parts, axis=-1)

    def step(self, x: Tensor, state: Tensor, train: bool = False, rng=None):
        new_states = []
        for c, a, b in zip(self.cells, self._bounds[:-1], self._bounds[1:]):
            sub = T.take_cols(state, int(a), int(b)) if len(self.cells) > 1 else state
            x, s, _ = c.step(x, sub, train, rng)
            new_states.append(s)
        return x, (T.concat(new_states) if len(new_states) > 1 else new_states[0]), None


@dataclass
class CellConfig:
    """Everything needed to rebuild a recurrent core."""

    kind: str = "gatel0rd"
    latent_dim: int = 8
    gate: str = "retanh-stochastic"
    noise_variance: float = 0.1
    g_spec: MlpSpec | None = None
    r_spec: MlpSpec | None = None
    plain_output: bool = False
    layers: int = 1  # stacked cells for the baselines

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise ValueError(f"unknown cell kind {self.kind!r}; expected one of {CELL_KINDS}")
        if self.gate not in GATE_VARIANTS:
            raise ValueError(f"unknown gate variant {self.gate!r}; expected one of {GATE_VARIANTS}")
        if self.kind == "gatel0rd" and self.layers != 1:
            raise ValueError("deep GateL0RD uses multi-layer g/r networks, not stacked cells")
        for spec in (self.g_spec, self.r_spec):
            if spec is not None and not 1 <= len(spec.widths) <= 3:
                raise ValueError("g and r have 1 to 3 layers")

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "latent_dim": self.latent_dim,
            "gate": self.gate,
            "noise_variance": self.noise_variance,
            "plain_output": self.plain_output,
            "layers": self.layers,
            "g_spec": self.g_spec.to_dict() if self.g_spec else None,
            "r_spec": self.r_spec.to_dict() if self.r_spec else None,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CellConfig":
        d = dict(d)
        for key in ("g_spec", "r_spec"):
            if d.get(key) is not None:
                d[key] = MlpSpec.from_dict(d[key])
        return cls(**d)


def build_cell(config: CellConfig, input_dim: int, rng: RngStream):
    H = config.latent_dim
    if config.kind == "gatel0rd":
        return GateL0RDCell(
            input_dim, H, rng, g_spec=config.g_spec, r_spec=config.r_spec,
            gate=config.gate, noise_variance=config.noise_variance,
            plain_output=config.plain_output,
        )
    cls = {"gru": GRUCell, "lstm": LSTMCell, "elman": ElmanCell}[config.kind]
    if config.layers == 1:
        return cls(input_dim, H, rng)
    cells = []
    prev = input_dim
    for i in range(config.layers):
        cells.append(cls(prev, H, rng, name=f"cell{i}"))
        prev = H
    return StackedCell(cells)


def parameter_count(cell) -> int:
    return int(sum(p.size for _, p in cell.named_parameters()))
