"""Joint, sequential, memory-replay and regularized-replay learners.

Every learner starts from the same pretrained weights, consumes the same
stream, and draws its mini-batch order from ``rng_for(seed, "train", t)``,
so at t=1 joint training, sequential training and memory replay are the
same computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..evalkit import Evaluator
from ..nn import NetworkSpec, WeightState, expand_values, grow_output
from ..seeding import rng_for
from ..taskgen import TaskStream, sample_task
from ..training import OptimConfig, QuadraticPenalty, train_epochs
from .importance import (ImportanceMap, SITracker, accumulate, estimate_fisher,
                         estimate_mas)
from .replay import ClassIndex, ReplayBuffer

METHODS = ("jt", "st", "mr", "cp", "ewc_m", "mas_m", "si_m", "tsc")
IMPORTANCE_OF = {"cp": "constant", "ewc_m": "fisher", "mas_m": "mas", "si_m": "si"}


@dataclass(frozen=True)
class MethodConfig:
    method: str = "tsc"
    reg_strength: float = 0.1
    epochs: int = 500
    batch_size: int = 25
    si_damping: float = 0.1
    reg_head: bool = False
    init_scale: float = 0.0
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.reg_strength < 0:
            raise ValueError("reg_strength must be >= 0")


class BaselineLearner:
    """Single-weight-set learner driven one task at a time via ``step``."""

    def __init__(self, stream: TaskStream, weights: WeightState, spec: NetworkSpec,
                 cfg: MethodConfig, evaluator: Evaluator | None = None):
        self.stream = stream
        self.cfg = cfg
        self.start = (weights.copy(), spec)
        self.weights = weights.copy()
        self.spec = spec
        self.classes = ClassIndex()
        self.replay = ReplayBuffer()
        self.importance: ImportanceMap | None = None
        self.anchor: WeightState | None = None
        self.evaluator = evaluator
        self.t = 0

    @property
    def seed(self) -> int:
        return self.stream.config.seed

    def _grow(self, weights, spec, class_ids):
        added = self.classes.add(class_ids)
        if added:
            weights, spec = grow_output(weights, spec, added, self.cfg.init_scale,
                                        self.seed)
        return weights, spec

    def step(self, t: int):
        if t != self.t + 1:
            raise ValueError(f"expected task {self.t + 1}, got {t}")
        train, _ = sample_task(self.stream, t)
        self.replay.extend(train)
        method = self.cfg.method
        rng = rng_for(self.seed, "train", t)
        if method == "jt":
            self.weights, self.spec = joint_fit(self.stream, t, *self.start, self.cfg,
                                                self.classes, self.replay)
        else:
            self.weights, self.spec = self._grow(self.weights, self.spec, train.classes)
            if method == "st":
                X, ids = train.X, train.class_ids
            else:
                X, ids, _ = self.replay.arrays()
            y = self.classes.rows(ids)
            if method == "mr":
                train_epochs(self.weights, X, y, self.cfg.epochs, self.cfg.batch_size,
                             self.cfg.optim, rng)
            elif method in IMPORTANCE_OF:
                self._regularized_task(X, y, train, rng)
            else:
                if method != "st":
                    raise ValueError(f"{method} is not a baseline learner")
                train_epochs(self.weights, X, y, self.cfg.epochs, self.cfg.batch_size,
                             self.cfg.optim, rng)
        self.t = t
        if self.evaluator is None:
            return None
        return self.evaluator.record(t, self.weights, self.spec, self.classes, train=train)

    def _penalty(self) -> QuadraticPenalty | None:
        if self.importance is None or self.cfg.reg_strength == 0:
            return None
        layout = self.weights.layout
        coef = self.importance.values
        anchor = self.anchor.values
        if self.importance.layout != layout:
            coef = expand_values(coef, self.importance.layout, layout)
        if self.anchor.layout != layout:
            anchor = expand_values(anchor, self.anchor.layout, layout)
        n = layout[-1].stop if self.cfg.reg_head else self.weights.n_embedding
        return QuadraticPenalty(anchor[:n], coef[:n], self.cfg.reg_strength)

    def _regularized_task(self, X, y, train, rng):
        kind = IMPORTANCE_OF[self.cfg.method]
        start = self.weights.values.copy()
        tracker = SITracker(start.shape[0]) if kind == "si" else None
        train_epochs(self.weights, X, y, self.cfg.epochs, self.cfg.batch_size, self.cfg.optim,
                     rng, penalty=self._penalty(), tracker=tracker)
        w = self.weights
        ty = self.classes.rows(train.class_ids)
        if kind == "fisher":
            new = estimate_fisher(w, self.spec, train.X, ty)
        elif kind == "mas":
            new = estimate_mas(w, self.spec, train.X)
        elif kind == "si":
            new = tracker.finish(start, w.values, self.cfg.si_damping, w.layout)
        else:
            new = ImportanceMap(np.ones_like(w.values), "constant", w.values.copy(), w.layout)
        if kind == "constant":
            self.importance = new
        else:
            self.importance = accumulate(self.importance, new)
        self.anchor = w.copy()

    def state_dict(self) -> dict:
        d = {"t": self.t, "spec": self.spec.to_dict(), "values": self.weights.values.tolist(),
             "classes": self.classes.class_ids}
        if self.importance is not None:
            d["importance"] = {"method": self.importance.method,
                               "values": self.importance.values.tolist(),
                               "spec_classes": len(self.importance.values)}
            d["anchor"] = self.anchor.values.tolist()
            d["anchor_classes"] = self.anchor.layout[-1].out_dim
        return d

    def load_state_dict(self, d: dict) -> None:
        from ..nn import build_layout

        self.t = int(d["t"])
        self.spec = NetworkSpec.from_dict(d["spec"])
        self.weights = WeightState(np.array(d["values"], dtype=np.float64),
                                   build_layout(self.spec))
        self.classes = ClassIndex(d["classes"])
        self.replay = ReplayBuffer()
        for i in range(1, self.t + 1):
            self.replay.extend(sample_task(self.stream, i)[0])
        if "importance" in d:
            anchor_spec = self.spec.with_classes(int(d["anchor_classes"]))
            layout = build_layout(anchor_spec)
            self.anchor = WeightState(np.array(d["anchor"], dtype=np.float64), layout)
            self.importance = ImportanceMap(np.array(d["importance"]["values"]),
                                            d["importance"]["method"], self.anchor.values,
                                            layout)


def joint_fit(stream, t, start_weights, start_spec, cfg, classes=None, replay=None):
    """Train a copy of the start weights on the union of tasks 1..t."""
    if classes is None:
        classes = ClassIndex()
    if replay is None:
        replay = ReplayBuffer()
        for i in range(1, t + 1):
            replay.extend(sample_task(stream, i)[0])
    X, ids, _ = replay.arrays()
    for i in range(1, t + 1):
        classes.add(stream.task_classes[i - 1])
    w, spec = start_weights.copy(), start_spec
    if len(classes) > spec.output_classes:
        w, spec = grow_output(w, spec, len(classes) - spec.output_classes, cfg.init_scale,
                              stream.config.seed)
    train_epochs(w, X, classes.rows(ids), cfg.epochs, cfg.batch_size, cfg.optim,
                 rng_for(stream.config.seed, "train", t))
    return w, spec


def _run(stream, weights, spec, cfg, evaluator):
    learner = BaselineLearner(stream, weights, spec, cfg, evaluator)
    records = [learner.step(t) for t in range(1, stream.config.T + 1)]
    return learner, records


def run_joint_training(stream, t, weights, spec, cfg, evaluator=None):
    """JT point at task ``t``: fit on the union of tasks 1..t from the start weights."""
    cfg = _with_method(cfg, "jt")
    w, s = joint_fit(stream, t, weights, spec, cfg)
    if evaluator is None:
        return w, s, None
    classes = ClassIndex()
    for i in range(1, t + 1):
        classes.add(stream.task_classes[i - 1])
    return w, s, evaluator.record(t, w, s, classes)


def run_sequential(stream, weights, spec, cfg, evaluator=None):
    return _run(stream, weights, spec, _with_method(cfg, "st"), evaluator)[1]


def run_memory_replay(stream, weights, spec, cfg, evaluator=None):
    return _run(stream, weights, spec, _with_method(cfg, "mr"), evaluator)[1]


def run_regularized_replay(stream, weights, spec, cfg, importance_method: str, evaluator=None):
    """Memory replay plus a quadratic penalty weighted by accumulated importance.

    ``importance_method`` is one of ``cp``, ``ewc_m``, ``mas_m``, ``si_m``.
    """
    return _run(stream, weights, spec, _with_method(cfg, importance_method), evaluator)[1]


def _with_method(cfg: MethodConfig, method: str) -> MethodConfig:
    from dataclasses import replace

    return replace(cfg, method=method)
