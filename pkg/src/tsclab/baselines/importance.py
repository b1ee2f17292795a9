"""Per-parameter importance estimates for the regularized-replay baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels as K
from ..errors import DataError, LayoutError
from ..nn import NetworkSpec, WeightState, _check_labels, build_layout, expand_values

METHODS = ("fisher", "mas", "si", "constant")


@dataclass
class ImportanceMap:
    values: np.ndarray
    method: str
    anchor: np.ndarray | None = None
    layout: tuple | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown importance method {self.method!r}")
        if np.any(self.values < 0):
            raise ValueError("importance values must be non-negative")


def layer_means(values: np.ndarray, layout) -> np.ndarray:
    """Mean of ``values`` within each layer (weights and bias together)."""
    return np.array([values[l.offset : l.stop].mean() if l.size else 0.0 for l in layout])


def _prepare(weights: WeightState, spec: NetworkSpec, X, y=None):
    if weights.layout != build_layout(spec):
        raise LayoutError("weight layout does not match the network spec")
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("importance estimation needs a non-empty batch")
    if y is not None:
        y = _check_labels(y, X.shape[0], spec.output_classes)
    return X, y


def estimate_fisher(weights: WeightState, spec: NetworkSpec, X, y) -> ImportanceMap:
    """Diagonal empirical Fisher with the observed labels.

    ``F_i = mean_n (d log p(y_n|x_n) / d theta_i)**2``.
    """
    X, y = _prepare(weights, spec, X, y)
    total = np.zeros_like(weights.values)
    for n in range(X.shape[0]):
        _, g = K.loss_grad(weights.values, weights.table, X[n : n + 1], y[n : n + 1], 0)
        total += g * g
    return ImportanceMap(total / X.shape[0], "fisher", weights.values.copy(), weights.layout)


def estimate_mas(weights: WeightState, spec: NetworkSpec, X) -> ImportanceMap:
    """``Omega_i = mean_n |d ||f(x_n)||^2 / d theta_i|`` with f the logit vector."""
    X, _ = _prepare(weights, spec, X)
    total = np.zeros_like(weights.values)
    for n in range(X.shape[0]):
        row = X[n : n + 1]
        out = K.forward(weights.values, weights.table, row)
        total += np.abs(K.vjp(weights.values, weights.table, row, 2.0 * out))
    return ImportanceMap(total / X.shape[0], "mas", weights.values.copy(), weights.layout)


class SITracker:
    """Running path integral ``sum_steps -grad * delta`` for one task."""

    def __init__(self, n: int):
        self.omega = np.zeros(n)
        self.steps = 0

    def __call__(self, grad, delta) -> None:
        if grad.shape != self.omega.shape or delta.shape != self.omega.shape:
            raise LayoutError("SI step arrays do not match the tracked parameter count")
        self.omega -= grad * delta
        self.steps += 1

    def finish(self, theta_start, theta_end, damping: float, layout=None) -> ImportanceMap:
        moved = np.asarray(theta_end) - np.asarray(theta_start)
        values = np.maximum(self.omega, 0.0) / (moved * moved + damping)
        return ImportanceMap(values, "si", np.array(theta_end, dtype=np.float64), layout)


def accumulate_si(trajectory, theta_start, theta_end, damping: float) -> ImportanceMap:
    """SI importance of one task from its ``(grad, delta)`` step records."""
    theta_start = np.asarray(theta_start, dtype=np.float64)
    tracker = SITracker(theta_start.shape[0])
    for grad, delta in trajectory:
        tracker(np.asarray(grad, dtype=np.float64), np.asarray(delta, dtype=np.float64))
    if np.shape(theta_end) != theta_start.shape:
        raise LayoutError("theta_start and theta_end lengths differ")
    return tracker.finish(theta_start, theta_end, damping)


def accumulate(previous: ImportanceMap | None, new: ImportanceMap) -> ImportanceMap:
    """Additive, equal-weight accumulation across tasks; anchor follows ``new``."""
    if previous is None:
        return new
    old = previous.values
    if previous.layout is not None and new.layout is not None \
            and previous.layout != new.layout:
        # head grew since the previous estimate; new rows start unimportant
        old = expand_values(old, previous.layout, new.layout)
    if old.shape != new.values.shape:
        raise LayoutError("importance maps are not aligned")
    return ImportanceMap(old + new.values, new.method, new.anchor, new.layout)
