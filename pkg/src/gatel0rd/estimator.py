"""scikit-learn style wrapper: ``fit`` trains, ``predict`` rolls out,
``transform`` returns latent trajectories."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .cells import CellConfig
from .model import ModelConfig, SeqModel
from .training import TrainConfig, train


def check_sequences(X, name: str = "X", min_length: int = 1, width: int | None = None) -> np.ndarray:
    """Validate a batch of sequences and return it as a float array ``(N, T, D)``.

    A single 2-D sequence is promoted to a batch of one.
    """
    try:
        arr = np.asarray(X, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{name} must be numeric: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (n_sequences, n_steps, n_features), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} holds no sequences")
    if arr.shape[1] < min_length:
        raise ValueError(f"{name} sequences need at least {min_length} steps, got {arr.shape[1]}")
    if width is not None and arr.shape[2] != width:
        raise ValueError(f"{name} has {arr.shape[2]} features per step, expected {width}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_actions(actions, X: np.ndarray, width: int | None = None) -> np.ndarray | None:
    """Validate actions aligned with observations ``X``; ``None`` or width 0 means no actions."""
    if actions is None:
        if width:
            raise ValueError(f"the model expects actions of width {width}")
        return None
    A = check_sequences(actions, "actions", width=width)
    if A.shape[:2] != X.shape[:2]:
        raise ValueError(f"actions {A.shape} do not align with observations {X.shape}")
    return A if A.shape[2] else None


class SequencePredictor(BaseEstimator):
    """Recurrent forward model of observation sequences.

    ``fit(X, actions=...)`` learns to predict ``X[:, t+1]`` from the past.
    ``predict`` returns the autoregressive rollout after the warm-up steps,
    ``transform`` the latent trajectory under teacher forcing.
    """

    def __init__(self, cell="gatel0rd", latent_dim=8, gate="retanh-stochastic", lam=0.001,
                 penalty="l0", warmup=2, layers=1, noise_variance=0.1,
                 pre_widths=(64, 32, 16), init_widths=(64, 32, 16), lr=0.001, batch_size=64,
                 epochs=300, k=0.998, p_min=0.0, clip=0.1, random_state=0):
        self.cell = cell
        self.latent_dim = latent_dim
        self.gate = gate
        self.lam = lam
        self.penalty = penalty
        self.warmup = warmup
        self.layers = layers
        self.noise_variance = noise_variance
        self.pre_widths = pre_widths
        self.init_widths = init_widths
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.k = k
        self.p_min = p_min
        self.clip = clip
        self.random_state = random_state

    def _model_config(self, obs_dim: int, act_dim: int) -> ModelConfig:
        cell = CellConfig(kind=self.cell, latent_dim=self.latent_dim, gate=self.gate,
                          noise_variance=self.noise_variance, layers=self.layers)
        return ModelConfig(obs_dim=obs_dim, act_dim=act_dim, cell=cell, warmup=self.warmup,
                           pre_widths=list(self.pre_widths), init_widths=list(self.init_widths))

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lam=self.lam, penalty=self.penalty, lr=self.lr, batch_size=self.batch_size,
                           epochs=self.epochs, k=self.k, p_min=self.p_min, clip=self.clip,
                           seed=self.random_state)

    def fit(self, X, y=None, actions=None, log_path=None):
        """Train on observation sequences ``X``; ``y`` is ignored (targets are ``X`` shifted)."""
        X = check_sequences(X, min_length=self.warmup + 1)
        A = check_actions(actions, X)
        act_dim = 0 if A is None else A.shape[2]
        self.model_ = SeqModel(self._model_config(X.shape[2], act_dim), seed=self.random_state)
        self.history_ = train(self.model_, X, A, self._train_config(), log_path=log_path)
        self.n_features_in_ = X.shape[2]
        self.n_actions_in_ = act_dim
        return self

    @classmethod
    def from_model(cls, model: SeqModel) -> "SequencePredictor":
        """Wrap an already trained model."""
        c = model.config
        est = cls(cell=c.cell.kind, latent_dim=c.cell.latent_dim, gate=c.cell.gate, warmup=c.warmup,
                  layers=c.cell.layers, noise_variance=c.cell.noise_variance,
                  pre_widths=tuple(c.pre_widths), init_widths=tuple(c.init_widths))
        est.model_ = model
        est.history_ = []
        est.n_features_in_ = c.obs_dim
        est.n_actions_in_ = c.act_dim
        return est

    def _inputs(self, X, actions):
        check_is_fitted(self, "model_")
        X = check_sequences(X, min_length=self.model_.config.warmup + 1, width=self.n_features_in_)
        return X, check_actions(actions, X, self.n_actions_in_)

    def predict(self, X, actions=None, feed="autoregressive") -> np.ndarray:
        """Predicted observations ``(N, T - w, D)`` for steps ``w .. T-1``."""
        X, A = self._inputs(X, actions)
        return self.model_.forward(X, A, feed=feed, train=False).predictions()

    def transform(self, X, actions=None) -> np.ndarray:
        """Latent states ``(N, T - w + 1, H)`` under teacher forcing, initial state first."""
        X, A = self._inputs(X, actions)
        return self.model_.forward(X, A, feed="teacher", train=False).trace.h

    def score(self, X, y=None, actions=None) -> float:
        """Negative autoregressive mean squared error (higher is better)."""
        X, A = self._inputs(X, actions)
        pred = self.model_.forward(X, A, feed="autoregressive", train=False).predictions()
        return -float(np.mean((pred - X[:, self.model_.config.warmup:]) ** 2))


__all__ = ["SequencePredictor", "check_sequences", "check_actions", "NotFittedError"]
