"""Single-head evaluation, backward transfer, few-shot probes and diagnostics."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import DataError
from .nn import NetworkSpec, WeightState, drop_head, forward, grow_output
from .seeding import rng_for
from .taskgen import TaskDataset, TaskStream, sample_probe_task, sample_task
from .training import OptimConfig, train_epochs, train_output_only


@dataclass
class MetricsRecord:
    t: int
    a_top1: float
    a_top5: float
    per_task: list
    bwt: float | None = None
    probe_nc: float | None = None
    probe_bc: float | None = None
    top5_valid: bool = True
    fisher_layer_means: list | None = None
    confusion: np.ndarray | None = None
    wall_ms: float | None = None


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 200
    batch_size: int = 25
    full_finetune: bool = False
    optim: OptimConfig = field(default_factory=OptimConfig)


def _ranks(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    # rank of the true class; ties are broken toward the lower class index,
    # matching argmax
    true = logits[np.arange(len(y)), y][:, None]
    cols = np.arange(logits.shape[1])[None, :]
    above = (logits > true) | ((logits == true) & (cols < y[:, None]))
    return above.sum(axis=1)


def evaluate_single_head(weights: WeightState, spec: NetworkSpec, tests, class_index):
    """Pool the test sets of tasks 1..t and score predictions over every live class.

    Returns ``(a_top1, a_top5, per_task, top5_valid, confusion)``.
    """
    if not tests:
        raise DataError("no test sets to evaluate")
    X = np.concatenate([d.X for d in tests])
    y = class_index.rows(np.concatenate([d.class_ids for d in tests]))
    C = spec.output_classes
    if y.max() >= C:
        raise DataError(f"class row {y.max()} is outside a head with {C} classes")
    logits = forward(weights, spec, X)
    ranks = _ranks(logits, y)
    top1 = ranks == 0
    top5_valid = C >= 6
    top5 = ranks < 5 if top5_valid else np.ones_like(top1)
    bounds = np.cumsum([0] + [len(d) for d in tests])
    per_task = [float(top1[a:b].mean()) for a, b in zip(bounds[:-1], bounds[1:])]
    confusion = confusion_matrix(np.argmax(logits, axis=1), y, C)
    return float(top1.mean()), float(top5.mean()), per_task, top5_valid, confusion


def compute_bwt(R) -> float:
    """Mean of ``R[T, i] - R[i, i]`` over the first T-1 tasks.

    ``R`` is square (row = after task, column = task evaluated), or a list of
    rows where row ``j`` holds the accuracies of tasks 1..j+1.
    """
    rows = [list(r) for r in R]
    T = len(rows)
    if T < 2:
        raise ValueError("backward transfer needs at least two tasks")
    last = rows[-1]
    return float(np.mean([last[i] - rows[i][i] for i in range(T - 1)]))


def confusion_matrix(predictions, labels, C: int) -> np.ndarray:
    """``counts[true, predicted]``."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.max() >= C or predictions.max() >= C):
        raise DataError(f"label or prediction outside {C} classes")
    if labels.size and (labels.min() < 0 or predictions.min() < 0):
        raise DataError("negative class label")
    counts = np.zeros((C, C), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return counts


def row_normalize(counts: np.ndarray) -> np.ndarray:
    sums = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sums, out=np.zeros(counts.shape), where=sums > 0)


def run_probe(weights: WeightState, spec: NetworkSpec, probe, cfg: ProbeConfig = ProbeConfig(),
              seed: int = 0, leaked=()) -> float:
    """Few-shot accuracy of a fresh head on a probe task; ``weights`` is left untouched."""
    train, test = probe
    classes = sorted(set(int(c) for c in train.class_ids))
    if set(int(c) for c in test.class_ids) != set(classes):
        raise DataError("probe train and test splits use different classes")
    if set(classes) & set(int(c) for c in leaked):
        raise DataError("probe classes leak into classes the run has trained on")
    rows = {c: i for i, c in enumerate(classes)}
    ytr = np.array([rows[int(c)] for c in train.class_ids])
    yte = np.array([rows[int(c)] for c in test.class_ids])
    w, s = drop_head(weights, spec)
    w, s = grow_output(w, s, len(classes))
    rng = rng_for(seed, "probe-train")
    if cfg.full_finetune:
        train_epochs(w, train.X, ytr, cfg.epochs, cfg.batch_size, cfg.optim, rng)
    else:
        train_output_only(w, train.X, ytr, cfg.epochs, cfg.batch_size, cfg.optim, rng)
    pred = np.argmax(K.forward(w.values, w.table, test.X), axis=1)
    return float(np.mean(pred == yte))


def fisher_trace_report(weights: WeightState, spec: NetworkSpec, X, y) -> list:
    """Mean diagonal Fisher of each embedding layer."""
    from .baselines.importance import estimate_fisher, layer_means

    fisher = estimate_fisher(weights, spec, X, y)
    return layer_means(fisher.values, weights.embedding_layers).tolist()


class Evaluator:
    """Builds the per-task MetricsRecord of one run.

    Keeps the diagonal ``R[i, i]`` needed for backward transfer and the fixed
    probe tasks, so the probe accuracies of a run are paired across tasks.
    """

    def __init__(self, stream: TaskStream, probe_cfg: ProbeConfig = ProbeConfig(),
                 probes: bool = True, fisher: bool = False, confusion: bool = True,
                 probe_seed: int = 0, timer: bool = False):
        self.stream = stream
        self.probe_cfg = probe_cfg
        self.fisher = fisher
        self.want_confusion = confusion
        self.timer = timer
        self.tests: list[TaskDataset] = []
        self.rows: list[list] = []
        self.probe_seed = probe_seed
        self._t0 = time.perf_counter()
        cfg = stream.config
        self.probe_tasks = {}
        if probes:
            nc = "fresh_batch" if cfg.mode == "new_instance" else "novel_query"
            self.probe_tasks["nc"] = sample_probe_task(nc, stream, cfg.N, cfg.K, probe_seed)
            if cfg.support_classes >= cfg.N:
                self.probe_tasks["bc"] = sample_probe_task("base_support", stream, cfg.N,
                                                           cfg.K, probe_seed)

    def probes(self, weights, spec, trained_classes=()) -> dict:
        out = {}
        for name, pair in self.probe_tasks.items():
            leaked = trained_classes if name == "nc" and \
                self.stream.config.mode == "new_class" else ()
            out[name] = run_probe(weights, spec, pair, self.probe_cfg,
                                  seed=self.stream.config.seed, leaked=leaked)
        return out

    def ensure_tests(self, t: int) -> None:
        while len(self.tests) < t:
            self.tests.append(sample_task(self.stream, len(self.tests) + 1)[1])

    def record(self, t, weights, spec, class_index, probe_weights=None, probe_spec=None,
               train=None) -> MetricsRecord:
        self.ensure_tests(t)
        a1, a5, per_task, valid, confusion = evaluate_single_head(
            weights, spec, self.tests[:t], class_index)
        del self.rows[t - 1 :]
        self.rows.append(per_task)
        bwt = compute_bwt(self.rows) if t >= 2 else None
        pw = weights if probe_weights is None else probe_weights
        ps = spec if probe_spec is None else probe_spec
        probe = self.probes(pw, ps, class_index.class_ids)
        fisher = None
        if self.fisher and train is not None:
            fisher = fisher_trace_report(weights, spec, train.X,
                                         class_index.rows(train.class_ids))
        wall = None
        if self.timer:
            now = time.perf_counter()
            wall, self._t0 = (now - self._t0) * 1000.0, now
        return MetricsRecord(t, a1, a5, per_task, bwt, probe.get("nc"), probe.get("bc"),
                             valid, fisher, confusion if self.want_confusion else None, wall)

    def state_dict(self) -> dict:
        return {"rows": self.rows}

    def load_state_dict(self, d: dict) -> None:
        self.rows = [list(map(float, r)) for r in d["rows"]]
        self.ensure_tests(len(self.rows))
