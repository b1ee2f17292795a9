"""Mini-batch training loops shared by every method."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import DataError
from .nn import SCOPES, AdamState, WeightState, adam_step_inplace, head_layout


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.0005
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8

    def fresh(self, n: int) -> AdamState:
        return AdamState.fresh(n, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                               epsilon=self.epsilon)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list:
    """Shuffled partition of ``range(n)`` into chunks of ``batch_size``."""
    order = rng.permutation(n)
    if batch_size <= 0 or batch_size >= n:
        return [order]
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class QuadraticPenalty:
    """``strength * sum_i coef_i * (theta_i - anchor_i)**2`` over a parameter prefix/mask."""

    def __init__(self, anchor: np.ndarray, coef: np.ndarray, strength: float):
        if strength < 0:
            raise ValueError("penalty strength must be >= 0")
        self.anchor = anchor
        self.coef = coef
        self.strength = strength
        self.n = coef.shape[0]

    def value(self, values: np.ndarray) -> float:
        d = values[: self.n] - self.anchor[: self.n]
        return float(self.strength * np.sum(self.coef * d * d))

    def add_grad(self, values: np.ndarray, grad: np.ndarray) -> None:
        d = values[: self.n] - self.anchor[: self.n]
        grad[: self.n] += 2.0 * self.strength * self.coef * d


def train_epochs(weights: WeightState, X, y, epochs: int, batch_size: int,
                 optim: OptimConfig, rng: np.random.Generator, scope: str = "all",
                 penalty: QuadraticPenalty | None = None, tracker=None) -> list:
    """Train ``weights`` in place for ``epochs`` passes; returns per-epoch mean loss.

    ``tracker`` (if given) is called as ``tracker(grad, delta)`` after each
    step with the data-loss gradient and the parameter change.
    """
    n = X.shape[0]
    if n == 0:
        raise DataError("no training examples")
    opt = optim.fresh(weights.values.shape[0])
    code = SCOPES[scope]
    values, table = weights.values, weights.table
    history = []
    for _ in range(epochs):
        total = 0.0
        batches = epoch_batches(n, batch_size, rng)
        for idx in batches:
            loss, grad = K.loss_grad(values, table, X[idx], y[idx], code)
            total += loss
            if tracker is not None:
                before = values.copy()
                data_grad = grad.copy()
            if penalty is not None:
                penalty.add_grad(values, grad)
            adam_step_inplace(values, grad, opt)
            if tracker is not None:
                tracker(data_grad, values - before)
        history.append(total / len(batches))
    if not np.isfinite(values).all():
        raise FloatingPointError("non-finite parameters after training")
    return history


def train_head_on_features(head_values: np.ndarray, n_classes: int, features, y,
                           max_epochs: int, batch_size: int, optim: OptimConfig,
                           rng: np.random.Generator, plateau_tol: float | None = None,
                           patience: int = 3) -> list:
    """Fit a linear softmax head in place on fixed features.

    Stops after ``max_epochs``, or earlier once the epoch-mean loss has
    improved by less than ``plateau_tol`` (relative) for ``patience``
    consecutive epochs.
    """
    n = features.shape[0]
    if n == 0:
        raise DataError("no training examples")
    dim = features.shape[1]
    table = np.array([[0, dim, n_classes, 0]], dtype=np.int64)
    opt = optim.fresh(head_values.shape[0])
    history = []
    stall = 0
    for _ in range(max_epochs):
        total = 0.0
        batches = epoch_batches(n, batch_size, rng)
        for idx in batches:
            loss, grad = K.loss_grad(head_values, table, features[idx], y[idx], 0)
            total += loss
            adam_step_inplace(head_values, grad, opt)
        epoch_loss = total / len(batches)
        if plateau_tol is not None and history:
            prev = history[-1]
            rel = (prev - epoch_loss) / max(abs(prev), 1e-300)
            stall = stall + 1 if rel < plateau_tol else 0
        history.append(epoch_loss)
        if plateau_tol is not None and stall >= patience:
            break
    if not np.isfinite(head_values).all():
        raise FloatingPointError("non-finite head parameters after training")
    return history


def train_output_only(weights: WeightState, X, y, max_epochs: int, batch_size: int,
                      optim: OptimConfig, rng, plateau_tol=None, patience: int = 3) -> list:
    """Head-only training of a full network: embedding frozen, features computed once."""
    feats = K.embed(weights.values, weights.table, X)
    head = weights.values[weights.n_embedding :].copy()
    out = head_layout(weights)[0]
    history = train_head_on_features(head, out.out_dim, feats, y, max_epochs, batch_size,
                                     optim, rng, plateau_tol, patience)
    weights.values[weights.n_embedding :] = head
    return history
