"""Two-step consolidation with fast and slow weights.

Per task t:

1. Tag: on the slow weights, measure each embedding parameter's activity
   ``a_t = |mean gradient over D_t|``, add it to the cumulative activity and
   recompute the gate ``delta = sigmoid(m * (a_cum - layer_mean / t))``.
2. Capture: copy slow -> fast, run ``k`` Adam iterations on replay
   mini-batches with the loss plus ``lam * sum delta * (fast_e - slow_e)**2``,
   then fit the output head on the frozen embedding.
3. Move the slow weights a step ``beta`` toward the fast weights.

The fast weights make the predictions; the slow weights carry the
slowly-improving representation used to learn new few-shot tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import kernels as K
from .baselines.replay import ClassIndex, ReplayBuffer
from .errors import DataError, LayoutError
from .nn import (AdamState, NetworkSpec, WeightState, adam_step_inplace, build_layout,
                 grow_output, new_rows_mask)
from .seeding import rng_for
from .taskgen import TaskStream, sample_task
from .training import OptimConfig, train_output_only

_GATE_LO = np.nextafter(0.0, 1.0)
_GATE_HI = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class TscConfig:
    beta: float = 0.01
    k: int = 100
    lam: float = 1e-10
    m: float = 1.0
    penalty: str = "stc"  # "stc" gated, "constant" (delta = 1), or "none"
    joint_step2: bool = True
    max_epochs: int = 500
    plateau_tol: float = 1e-4
    patience: int = 3
    batch_size: int = 25
    init_scale: float = 0.0
    probe_from: str = "slow"
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.m <= 0:
            raise ValueError("m must be positive")
        if self.penalty not in ("stc", "constant", "none"):
            raise ValueError(f"unknown penalty {self.penalty!r}")
        if self.probe_from not in ("slow", "fast"):
            raise ValueError("probe_from must be 'slow' or 'fast'")


@dataclass
class ActivityState:
    """Cumulative activity and gate over the embedding parameters."""

    cumulative: np.ndarray
    tasks_seen: int
    per_layer_mean: np.ndarray
    gate: np.ndarray
    gate_scale: float
    penalty_weight: float
    layer_sizes: tuple

    @classmethod
    def empty(cls, weights: WeightState, gate_scale: float = 1.0,
              penalty_weight: float = 1e-10) -> "ActivityState":
        n = weights.n_embedding
        sizes = tuple(l.size for l in weights.embedding_layers)
        return cls(np.zeros(n), 0, np.zeros(len(sizes)), np.full(n, 0.5), gate_scale,
                   penalty_weight, sizes)

    def layer_bounds(self):
        edges = np.cumsum((0,) + self.layer_sizes)
        return list(zip(edges[:-1], edges[1:]))


@dataclass
class TscState:
    spec: NetworkSpec
    slow: WeightState
    fast: WeightState
    activity: ActivityState
    classes: ClassIndex
    t: int = 0

    @classmethod
    def start(cls, weights: WeightState, spec: NetworkSpec, cfg: TscConfig) -> "TscState":
        return cls(spec, weights.copy(), weights.copy(),
                   ActivityState.empty(weights, cfg.m, cfg.lam), ClassIndex())


def compute_activity(slow: WeightState, spec: NetworkSpec, X, y) -> np.ndarray:
    """``|mean_n dL/dtheta_i|`` on the slow weights, embedding parameters only."""
    from .nn import loss_and_grad

    if len(X) == 0:
        raise DataError("activity needs a non-empty task")
    _, grad = loss_and_grad(slow, spec, X, y, scope="embedding_only")
    return np.abs(grad[: slow.n_embedding])


def _layer_means(cumulative, bounds, t):
    return np.array([cumulative[a:b].sum() / (b - a) / t for a, b in bounds])


def update_cumulative(activity: ActivityState, a_t) -> ActivityState:
    a_t = np.asarray(a_t, dtype=np.float64)
    if a_t.shape != activity.cumulative.shape:
        raise LayoutError(f"activity has shape {a_t.shape}, "
                          f"cumulative state has {activity.cumulative.shape}")
    cumulative = activity.cumulative + a_t
    t = activity.tasks_seen + 1
    means = _layer_means(cumulative, activity.layer_bounds(), t)
    return replace(activity, cumulative=cumulative, tasks_seen=t, per_layer_mean=means)


def compute_gate(activity: ActivityState) -> np.ndarray:
    """``sigmoid(m * (cumulative - per-layer threshold))``, kept strictly inside (0, 1)."""
    if activity.tasks_seen < 1:
        raise ValueError("gate is undefined before the first task")
    threshold = np.empty_like(activity.cumulative)
    for (a, b), mean in zip(activity.layer_bounds(), activity.per_layer_mean):
        threshold[a:b] = mean
    gate = expit(activity.gate_scale * (activity.cumulative - threshold))
    return np.clip(gate, _GATE_LO, _GATE_HI)


def stc_penalty(fast_e, slow_e, gate, lam: float):
    """Gated squared displacement and its gradient wrt the fast weights."""
    if lam < 0:
        raise ValueError("penalty weight must be non-negative")
    fast_e = np.asarray(fast_e, dtype=np.float64)
    slow_e = np.asarray(slow_e, dtype=np.float64)
    if not fast_e.shape == slow_e.shape == np.shape(gate):
        raise LayoutError("fast, slow and gate vectors are not aligned")
    diff = fast_e - slow_e
    weighted = gate * diff
    return float(lam * np.dot(weighted, diff)), 2.0 * lam * weighted


def _penalty_gate(state: TscState, cfg: TscConfig):
    if cfg.penalty == "none" or cfg.lam == 0.0:
        return None
    if cfg.penalty == "constant":
        return np.ones_like(state.activity.gate)
    return state.activity.gate


def replay_batches(n: int, batch_size: int, k: int, rng):
    """``k`` index batches: uniform with replacement, or the full set in order."""
    if batch_size <= 0 or batch_size >= n:
        full = np.arange(n)
        for _ in range(k):
            yield full
    else:
        for _ in range(k):
            yield rng.integers(0, n, batch_size)


def train_embedding_step(state: TscState, replay: ReplayBuffer, cfg: TscConfig, rng) -> None:
    """``k`` Adam iterations on the fast weights over replay mini-batches.

    The cross-entropy gradient covers the embedding and the head
    (``joint_step2``) or the embedding alone; the gated penalty touches the
    embedding only.  Updates ``state.fast`` in place.
    """
    X, ids, _ = replay.arrays()
    if len(X) == 0:
        raise DataError("empty replay set")
    if cfg.k == 0:
        return
    y = state.classes.rows(ids)
    fast, slow = state.fast, state.slow
    values, table = fast.values, fast.table
    n_e = fast.n_embedding
    slow_e = slow.values[:n_e]
    gate = _penalty_gate(state, cfg)
    scope = 0 if cfg.joint_step2 else 1
    opt = cfg.optim.fresh(values.shape[0])
    for idx in replay_batches(len(X), cfg.batch_size, cfg.k, rng):
        _, grad = K.loss_grad(values, table, X[idx], y[idx], scope)
        if gate is not None:
            grad[:n_e] += 2.0 * cfg.lam * gate * (values[:n_e] - slow_e)
        adam_step_inplace(values, grad, opt)
    if not np.isfinite(values).all():
        raise FloatingPointError("non-finite fast weights after embedding training")


def train_output_head(state: TscState, replay: ReplayBuffer, cfg: TscConfig, rng) -> list:
    """Fit the fast head on the frozen fast embedding; returns epoch losses."""
    X, ids, _ = replay.arrays()
    if len(X) == 0:
        raise DataError("empty replay set")
    y = state.classes.rows(ids)
    return train_output_only(state.fast, X, y, cfg.max_epochs, cfg.batch_size, cfg.optim,
                             rng, cfg.plateau_tol, cfg.patience)


def consolidate_slow(slow: WeightState, fast: WeightState, beta: float,
                     adopt: np.ndarray | None = None) -> WeightState:
    """``(1 - beta) * slow + beta * fast`` over every parameter.

    Head rows missing from ``slow`` (or flagged by ``adopt``) first take the
    fast values, so brand-new classes end up with their fast rows.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    s = slow.values
    if slow.layout != fast.layout:
        try:
            mask = new_rows_mask(slow.layout, fast.layout)
        except LayoutError:
            raise LayoutError("slow and fast layouts cannot be aligned") from None
        grown = fast.values.copy()
        grown[~mask] = s
        s = grown
    elif adopt is not None:
        s = s.copy()
        s[adopt] = fast.values[adopt]
    values = (1.0 - beta) * s + beta * fast.values
    return WeightState(values, fast.layout, fast.table)


def _grow_both(state: TscState, class_ids, init_scale: float, seed: int):
    added = state.classes.add(class_ids)
    if not added:
        return None
    old_layout = state.slow.layout
    slow, spec = grow_output(state.slow, state.spec, added, init_scale, seed)
    state.slow, state.spec = slow, spec
    return new_rows_mask(old_layout, slow.layout)


def run_tsc_task(state: TscState, train, stream: TaskStream, replay: ReplayBuffer,
                 cfg: TscConfig, evaluator=None, fresh_replay: bool = False):
    """One task of the algorithm; mutates and returns ``state`` plus the task's record.

    ``fresh_replay`` replaces the replay set with the current task alone
    (new-instance streams).
    """
    t = state.t + 1
    seed = stream.config.seed
    adopt = _grow_both(state, train.classes, cfg.init_scale, seed)
    if fresh_replay:
        replay = ReplayBuffer()
    replay.extend(train)
    # Step 1 reads the current task only.
    a_t = compute_activity(state.slow, state.spec, train.X, state.classes.rows(train.class_ids))
    state.activity = update_cumulative(state.activity, a_t)
    state.activity.gate = compute_gate(state.activity)
    state.fast = state.slow.copy()
    train_embedding_step(state, replay, cfg, rng_for(seed, "tsc-embed", t))
    train_output_head(state, replay, cfg, rng_for(seed, "tsc-head", t))
    state.slow = consolidate_slow(state.slow, state.fast, cfg.beta, adopt)
    state.t = t
    record = None
    if evaluator is not None:
        probe = state.slow if cfg.probe_from == "slow" else state.fast
        record = evaluator.record(t, state.fast, state.spec, state.classes,
                                  probe_weights=probe, probe_spec=state.spec, train=train)
    return state, record


class TscLearner:
    """Drives ``run_tsc_task`` over a stream, owning the replay buffer."""

    def __init__(self, stream: TaskStream, weights: WeightState, spec: NetworkSpec,
                 cfg: TscConfig, evaluator=None):
        self.stream = stream
        self.cfg = cfg
        self.state = TscState.start(weights, spec, cfg)
        self.replay = ReplayBuffer()
        self.evaluator = evaluator
        self.new_instance = stream.config.mode == "new_instance"

    @property
    def t(self) -> int:
        return self.state.t

    def step(self, t: int):
        if t != self.state.t + 1:
            raise ValueError(f"expected task {self.state.t + 1}, got {t}")
        train, _ = sample_task(self.stream, t)
        if self.new_instance:
            self.replay = ReplayBuffer()
        self.state, record = run_tsc_task(self.state, train, self.stream, self.replay,
                                          self.cfg, self.evaluator)
        return record

    def state_dict(self) -> dict:
        return state_to_dict(self.state)

    def load_state_dict(self, d: dict) -> None:
        self.state = state_from_dict(d)
        self.replay = ReplayBuffer()
        first = self.state.t if self.new_instance else 1
        for i in range(max(first, 1), self.state.t + 1):
            self.replay.extend(sample_task(self.stream, i)[0])


def run_new_instance(state: TscState, stream: TaskStream, cfg: TscConfig, evaluator=None):
    """Sequential batches of new instances of one class set, without replay of old batches."""
    if stream.config.mode != "new_instance":
        raise ValueError("run_new_instance needs a new_instance stream")
    records = []
    for t in range(state.t + 1, stream.config.T + 1):
        train, _ = sample_task(stream, t)
        state, rec = run_tsc_task(state, train, stream, ReplayBuffer(), cfg, evaluator)
        records.append(rec)
    return state, records


def state_to_dict(state: TscState) -> dict:
    act = state.activity
    return {
        "t": state.t,
        "spec": state.spec.to_dict(),
        "slow": state.slow.values.tolist(),
        "fast": state.fast.values.tolist(),
        "classes": state.classes.class_ids,
        "activity": {
            "cumulative": act.cumulative.tolist(),
            "tasks_seen": act.tasks_seen,
            "per_layer_mean": act.per_layer_mean.tolist(),
            "gate": act.gate.tolist(),
            "m": act.gate_scale,
            "lam": act.penalty_weight,
            "layer_sizes": list(act.layer_sizes),
        },
    }


def state_from_dict(d: dict) -> TscState:
    spec = NetworkSpec.from_dict(d["spec"])
    layout = build_layout(spec)
    a = d["activity"]
    act = ActivityState(np.array(a["cumulative"], dtype=np.float64), int(a["tasks_seen"]),
                        np.array(a["per_layer_mean"], dtype=np.float64),
                        np.array(a["gate"], dtype=np.float64), float(a["m"]), float(a["lam"]),
                        tuple(int(s) for s in a["layer_sizes"]))
    return TscState(spec, WeightState(np.array(d["slow"], dtype=np.float64), layout),
                    WeightState(np.array(d["fast"], dtype=np.float64), layout), act,
                    ClassIndex(d["classes"]), int(d["t"]))
