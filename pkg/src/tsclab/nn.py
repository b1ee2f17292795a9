"""Feed-forward classifier with an explicit embedding/output split.

The network is an MLP: one or more hidden layers form the embedding, and a
final linear layer (softmax classifier) forms the output head.  All
parameters live in one flat float64 vector; ``WeightState.layout`` says
where each layer's weights and bias sit.  The head is always the tail of
the vector, so growing it never moves embedding parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import kernels as K
from .errors import DataError, DimensionError, LayoutError
from .seeding import rng_for

ACTIVATIONS = {"relu": K._pykernels.RELU, "tanh": K._pykernels.TANH}
SCOPES = {"all": 0, "embedding_only": 1, "output_only": 2}


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_layers: tuple = ((64, "relu"), (64, "relu"))
    output_classes: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        hidden = tuple((int(w), str(a)) for w, a in self.hidden_layers)
        if not hidden:
            raise ValueError("hidden_layers must be non-empty")
        for width, act in hidden:
            if width < 1:
                raise ValueError("hidden widths must be positive")
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if self.output_classes < 0:
            raise ValueError("output_classes must be non-negative")
        object.__setattr__(self, "hidden_layers", hidden)

    @property
    def embedding_dim(self) -> int:
        return self.hidden_layers[-1][0]

    def with_classes(self, n: int) -> "NetworkSpec":
        return replace(self, output_classes=n)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": [[w, a] for w, a in self.hidden_layers],
            "output_classes": self.output_classes,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_layers=tuple((int(w), str(a)) for w, a in d["hidden_layers"]),
            output_classes=int(d["output_classes"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class Layer:
    offset: int
    in_dim: int
    out_dim: int
    activation: str  # "relu", "tanh" or "identity"
    role: str  # "embedding" or "output"

    @property
    def size(self) -> int:
        return self.out_dim * (self.in_dim + 1)

    @property
    def stop(self) -> int:
        return self.offset + self.size


def build_layout(spec: NetworkSpec) -> tuple:
    layers = []
    offset = 0
    n_in = spec.input_dim
    for width, act in spec.hidden_layers:
        layers.append(Layer(offset, n_in, width, act, "embedding"))
        offset += width * (n_in + 1)
        n_in = width
    layers.append(Layer(offset, n_in, spec.output_classes, "identity", "output"))
    return tuple(layers)


def _table(layout) -> np.ndarray:
    codes = {"identity": 0, **ACTIVATIONS}
    return np.array(
        [[l.offset, l.in_dim, l.out_dim, codes[l.activation]] for l in layout],
        dtype=np.int64,
    )


@dataclass
class WeightState:
    """Flat parameter vector plus its per-layer layout."""

    values: np.ndarray
    layout: tuple
    _table: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        expected = sum(l.size for l in self.layout)
        if self.values.shape != (expected,):
            raise LayoutError(
                f"parameter vector has shape {self.values.shape}, layout needs ({expected},)"
            )
        if self._table is None:
            self._table = _table(self.layout)

    @property
    def table(self) -> np.ndarray:
        return self._table

    @property
    def output_layer(self) -> Layer:
        return self.layout[-1]

    @property
    def embedding_layers(self) -> tuple:
        return self.layout[:-1]

    @property
    def n_embedding(self) -> int:
        """Number of embedding parameters; they occupy ``values[:n_embedding]``."""
        return self.layout[-1].offset

    @property
    def embedding(self) -> np.ndarray:
        return self.values[: self.n_embedding]

    @property
    def head(self) -> np.ndarray:
        return self.values[self.n_embedding :]

    def copy(self) -> "WeightState":
        return WeightState(self.values.copy(), self.layout, self._table)

    def same_layout(self, other: "WeightState") -> bool:
        return self.layout == other.layout


def init_weights(spec: NetworkSpec) -> WeightState:
    """Uniform(+-1/sqrt(fan_in)) init for every weight and bias."""
    layout = build_layout(spec)
    rng = rng_for(spec.seed, "init")
    values = np.empty(sum(l.size for l in layout))
    for layer in layout:
        bound = 1.0 / np.sqrt(layer.in_dim)
        values[layer.offset : layer.stop] = rng.uniform(-bound, bound, layer.size)
    return WeightState(values, layout)


def _check_batch(weights: WeightState, X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError("batch rank", 2, X.ndim)
    n_in = weights.layout[0].in_dim
    if X.shape[1] != n_in:
        raise DimensionError("batch feature columns", n_in, X.shape[1])
    return X


def _check_spec(weights: WeightState, spec: NetworkSpec):
    if weights.layout != build_layout(spec):
        raise LayoutError("weight layout does not match the network spec")


def forward(weights: WeightState, spec: NetworkSpec, X) -> np.ndarray:
    _check_spec(weights, spec)
    if spec.output_classes < 1:
        raise DimensionError("output classes", ">= 1", spec.output_classes)
    X = _check_batch(weights, X)
    return K.forward(weights.values, weights.table, X)


def embed(weights: WeightState, X) -> np.ndarray:
    """Embedding features (input to the output head) for each row of ``X``."""
    X = _check_batch(weights, X)
    return K.embed(weights.values, weights.table, X)


def _check_labels(y, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.ascontiguousarray(y, dtype=np.int64)
    if n_rows == 0:
        raise DataError("empty batch")
    if y.shape != (n_rows,):
        raise DimensionError("label count", n_rows, y.shape)
    if y.min() < 0 or y.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes}), got [{y.min()}, {y.max()}]")
    return y


def loss_and_grad(weights: WeightState, spec: NetworkSpec, X, y, scope: str = "all"):
    """Mean cross-entropy over the batch and its gradient.

    Gradient entries outside ``scope`` are exactly zero.
    """
    _check_spec(weights, spec)
    X = _check_batch(weights, X)
    y = _check_labels(y, X.shape[0], spec.output_classes)
    return K.loss_grad(weights.values, weights.table, X, y, SCOPES[scope])


def head_layout(weights: WeightState) -> tuple:
    """Layout of the output layer alone, as a standalone one-layer network."""
    out = weights.output_layer
    return (Layer(0, out.in_dim, out.out_dim, "identity", "output"),)


def head_loss_and_grad(head: WeightState, features, y):
    """Cross-entropy of a linear softmax head applied to precomputed features."""
    if len(head.layout) != 1:
        raise LayoutError("head_loss_and_grad expects a one-layer head state")
    X = _check_batch(head, features)
    y = _check_labels(y, X.shape[0], head.layout[0].out_dim)
    return K.loss_grad(head.values, head.table, X, y, 0)


def split_head(weights: WeightState) -> WeightState:
    return WeightState(weights.head.copy(), head_layout(weights))


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 0.0005
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **hyper)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon}

    def copy(self) -> "AdamState":
        return replace(self, first_moment=self.first_moment.copy(),
                       second_moment=self.second_moment.copy())


def adam_step_inplace(values: np.ndarray, grad: np.ndarray, opt: AdamState) -> None:
    opt.step_count += 1
    K.adam_update(values, grad, opt.first_moment, opt.second_moment, opt.step_count,
                  opt.lr, opt.beta1, opt.beta2, opt.epsilon)


def adam_step(weights: WeightState, grad, opt: AdamState):
    """One bias-corrected Adam update; returns new ``(weights, opt)``."""
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    n = weights.values.shape[0]
    if grad.shape != (n,) or opt.first_moment.shape != (n,) or opt.second_moment.shape != (n,):
        raise LayoutError(
            f"adam_step: weights have {n} entries, grad {grad.shape}, "
            f"moments {opt.first_moment.shape}/{opt.second_moment.shape}"
        )
    new_w = weights.copy()
    new_opt = opt.copy()
    adam_step_inplace(new_w.values, grad, new_opt)
    if not np.isfinite(new_w.values).all():
        raise FloatingPointError("non-finite parameter after Adam step")
    return new_w, new_opt


def grow_output(weights: WeightState, spec: NetworkSpec, new_classes: int,
                init_scale: float = 0.0, seed: int = 0):
    """Append ``new_classes`` rows to the output layer.

    Existing values are copied bit-for-bit; the new weight rows and biases are
    drawn from Uniform(-init_scale, init_scale) (all zero when init_scale is 0).
    """
    if new_classes < 1:
        raise ValueError("new_classes must be >= 1")
    if init_scale < 0:
        raise ValueError("init_scale must be >= 0")
    _check_spec(weights, spec)
    out = weights.output_layer
    h, c = out.in_dim, out.out_dim
    old_w = weights.values[out.offset : out.offset + h * c]
    old_b = weights.values[out.offset + h * c :]
    if init_scale > 0:
        rng = rng_for(seed, "grow", c, new_classes)
        add_w = rng.uniform(-init_scale, init_scale, new_classes * h)
        add_b = rng.uniform(-init_scale, init_scale, new_classes)
    else:
        add_w = np.zeros(new_classes * h)
        add_b = np.zeros(new_classes)
    new_spec = spec.with_classes(c + new_classes)
    values = np.concatenate([weights.embedding, old_w, add_w, old_b, add_b])
    return WeightState(values, build_layout(new_spec)), new_spec


def drop_head(weights: WeightState, spec: NetworkSpec):
    """Discard the output layer, leaving a head with zero classes."""
    new_spec = spec.with_classes(0)
    return WeightState(weights.embedding.copy(), build_layout(new_spec)), new_spec


def new_rows_mask(layout_small: Sequence[Layer], layout_big: Sequence[Layer]) -> np.ndarray:
    """Boolean mask over the bigger layout marking head entries absent from the smaller."""
    small, big = layout_small[-1], layout_big[-1]
    if layout_small[:-1] != tuple(layout_big[:-1]) or small.in_dim != big.in_dim \
            or small.out_dim > big.out_dim:
        raise LayoutError("layouts differ beyond output-row growth")
    h = big.in_dim
    mask = np.zeros(big.stop, dtype=bool)
    mask[big.offset + small.out_dim * h : big.offset + big.out_dim * h] = True
    mask[big.offset + big.out_dim * h + small.out_dim :] = True
    return mask


def expand_values(values: np.ndarray, old_layout, new_layout, fill: float = 0.0) -> np.ndarray:
    """Re-index a parameter-aligned array after head growth; new entries get ``fill``."""
    mask = new_rows_mask(old_layout, new_layout)
    out = np.full(mask.shape[0], fill, dtype=np.float64)
    out[~mask] = values
    return out
