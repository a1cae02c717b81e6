"""Adam with bias correction and global gradient-norm clipping."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterable, Sequence

import numpy as np

from .tensor import ShapeError, Tensor

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-4


class ParamStore:
    """Named parameters plus Adam's first/second moment accumulators."""

    def __init__(self, params: Iterable[tuple[str, Tensor]] | dict,
                 beta1: float = BETA1, beta2: float = BETA2, eps: float = EPSILON):
        items = params.items() if isinstance(params, dict) else params
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(items)
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step_count = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def __len__(self) -> int:
        return len(self.params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self.params[k].data = arr.copy()


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.vdot(g, g) for g in grads]))) if grads else 0.0


def clip_grad_norm(grads: Sequence[np.ndarray], threshold: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients by ``threshold / norm`` when the global L2 norm exceeds it.

    Returns the (possibly new) gradient list and the pre-clipping norm.
    """
    if threshold <= 0:
        raise ValueError(f"clipping threshold must be > 0, got {threshold}")
    norm = global_norm(grads)
    if norm <= threshold:
        return list(grads), norm
    factor = threshold / norm
    return [g * factor for g in grads], norm


def adam_step(store: ParamStore, grads: Sequence[np.ndarray] | dict, lr: float) -> None:
    """One in-place Adam update of every parameter in ``store``."""
    if isinstance(grads, dict):
        grads = [grads[k] for k in store.params]
    if len(grads) != len(store.params):
        raise ShapeError(f"got {len(grads)} gradients for {len(store.params)} parameters")
    store.step_count += 1
    t = store.step_count
    b1, b2 = store.beta1, store.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for (name, p), g in zip(store.params.items(), grads):
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.data.shape}")
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + store.eps)
