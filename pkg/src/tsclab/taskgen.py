"""Few-shot task streams over synthetic Gaussian classes.

Each class is a Gaussian cluster: a class mean plus isotropic noise of
standard deviation ``within_class_noise``.  Support-class means are
``class_spread * U @ z`` with ``z ~ N(0, I_r)`` and ``U`` a fixed random
orthonormal basis of an r-dimensional subspace (r = ``latent_dim``).

Query classes (the task stream and the novel-class probe reserve) move
away from the support region as ``shift`` grows: their means are
``class_spread * (cos(a) U + sin(a) V) @ z + shift * 2 * class_spread * u``
with ``a = shift * pi / 2``, ``V`` a second r-dimensional basis orthogonal
to ``U`` and ``u`` a unit direction orthogonal to both.  ``shift=0`` puts
support and query classes in the same distribution; ``shift=1`` places the
query classes in a subspace the support classes never vary in, displaced
by ``2 * class_spread``.

Class ids: support classes take ``0..support_classes-1``; the stream's
classes follow; the novel-class probe reserve comes last.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .seeding import derive_seed, rng_for

MODES = ("new_class", "new_instance")


@dataclass(frozen=True)
class StreamConfig:
    T: int = 10
    N: int = 5
    K: int = 5
    mode: str = "new_class"
    input_dim: int = 32
    latent_dim: int = 8
    shift: float = 0.3
    class_spread: float = 1.0
    within_class_noise: float = 1.0
    seed: int = 0
    test_shots: int = 50
    support_classes: int = 100
    probe_classes: int = 50

    def __post_init__(self):
        if self.T < 1 or self.N < 1 or self.K < 1 or self.test_shots < 1:
            raise ConfigError("T, N, K and test_shots must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.shift <= 1.0:
            raise ConfigError("shift must lie in [0, 1]")
        if self.class_spread <= 0 or self.within_class_noise < 0:
            raise ConfigError("class_spread must be > 0 and within_class_noise >= 0")
        if self.latent_dim < 1 or 2 * self.latent_dim >= self.input_dim:
            raise ConfigError("need 1 <= latent_dim and 2 * latent_dim < input_dim")
        if self.support_classes < 0 or self.probe_classes < 0:
            raise ConfigError("class pool sizes must be >= 0")


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    class_id: int
    origin: str  # "support" or "query"


@dataclass
class TaskDataset:
    """N-way K-shot episode stored as arrays, rows grouped by class."""

    task_index: int
    X: np.ndarray
    class_ids: np.ndarray
    ways: int
    shots: int
    origin: str = "query"

    def __post_init__(self):
        if self.X.shape[0] != self.class_ids.shape[0]:
            raise DataError("feature and label row counts differ")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def classes(self) -> list:
        return sorted(set(int(c) for c in self.class_ids))

    def examples(self) -> Iterator[LabeledExample]:
        for x, c in zip(self.X, self.class_ids):
            yield LabeledExample(x, int(c), self.origin)


@dataclass
class SupportPool:
    """Base classes used only for pretraining.

    Synthetic pools draw examples on demand from the class Gaussians;
    pools loaded from CSV hold a fixed example table.
    """

    class_ids: np.ndarray
    means: np.ndarray | None = None
    noise: float = 0.0
    seed: int = 0
    stored_X: np.ndarray | None = None
    stored_y: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    @property
    def input_dim(self) -> int:
        if self.stored_X is not None:
            return self.stored_X.shape[1]
        return self.means.shape[1]

    def sample(self, shots: int, key="pretrain") -> TaskDataset:
        if self.n_classes == 0:
            raise DataError("support pool is empty")
        if self.stored_X is not None:
            return TaskDataset(0, self.stored_X.copy(), self.stored_y.copy(),
                               self.n_classes, 0, "support")
        X = np.concatenate([
            _draw(self.means[i], self.noise, shots, rng_for(self.seed, "support", key, int(c)))
            for i, c in enumerate(self.class_ids)
        ])
        y = np.repeat(self.class_ids, shots)
        return TaskDataset(0, X, y, self.n_classes, shots, "support")


def _draw(mean, noise, n, rng) -> np.ndarray:
    return mean + noise * rng.standard_normal((n, mean.shape[0]))


@dataclass
class TaskStream:
    config: StreamConfig
    basis: np.ndarray
    query_basis: np.ndarray
    direction: np.ndarray
    task_classes: list  # per task, the class ids (length N each)
    probe_reserve: np.ndarray
    _means: dict = field(default_factory=dict, repr=False)

    @property
    def support_ids(self) -> np.ndarray:
        return np.arange(self.config.support_classes)

    @property
    def stream_class_ids(self) -> list:
        seen = []
        for cls in self.task_classes:
            seen.extend(c for c in cls if c not in seen)
        return seen

    def is_query(self, class_id: int) -> bool:
        return class_id >= self.config.support_classes

    def class_mean(self, class_id: int) -> np.ndarray:
        class_id = int(class_id)
        mean = self._means.get(class_id)
        if mean is None:
            cfg = self.config
            z = rng_for(cfg.seed, "class", class_id).standard_normal(cfg.latent_dim)
            if self.is_query(class_id):
                angle = cfg.shift * np.pi / 2.0
                rotated = np.cos(angle) * self.basis + np.sin(angle) * self.query_basis
                mean = cfg.class_spread * (rotated @ z) \
                    + cfg.shift * 2.0 * cfg.class_spread * self.direction
            else:
                mean = cfg.class_spread * (self.basis @ z)
            self._means[class_id] = mean
        return mean

    def draw(self, class_ids, shots: int, *key) -> TaskDataset:
        cfg = self.config
        X = np.concatenate([
            _draw(self.class_mean(c), cfg.within_class_noise, shots,
                  rng_for(cfg.seed, "examples", *key, int(c)))
            for c in class_ids
        ])
        y = np.repeat(np.asarray(class_ids, dtype=np.int64), shots)
        return X, y


def make_generator(config: StreamConfig):
    """Build the support pool and task stream; a pure function of ``config``."""
    cfg = config
    rng = rng_for(cfg.seed, "geometry")
    q, _ = np.linalg.qr(rng.standard_normal((cfg.input_dim, cfg.input_dim)))
    r = cfg.latent_dim
    basis, query_basis = q[:, :r], q[:, r : 2 * r]
    # unit direction orthogonal to both class subspaces
    rest = q[:, 2 * r :]
    direction = rest @ rng.standard_normal(rest.shape[1])
    direction /= np.linalg.norm(direction)

    first = cfg.support_classes
    if cfg.mode == "new_class":
        task_classes = [list(range(first + t * cfg.N, first + (t + 1) * cfg.N))
                        for t in range(cfg.T)]
        reserve_start = first + cfg.T * cfg.N
    else:
        fixed = list(range(first, first + cfg.N))
        task_classes = [list(fixed) for _ in range(cfg.T)]
        reserve_start = first + cfg.N
    reserve = np.arange(reserve_start, reserve_start + cfg.probe_classes)
    stream = TaskStream(cfg, basis, query_basis, direction, task_classes, reserve)
    ids = stream.support_ids
    means = np.array([stream.class_mean(c) for c in ids]).reshape(len(ids), cfg.input_dim)
    pool = SupportPool(ids, means, cfg.within_class_noise, derive_seed(cfg.seed, "pool"))
    return pool, stream


def sample_task(stream: TaskStream, t: int):
    """Train (K shots/class) and test (test_shots/class) splits of task ``t`` (1-based)."""
    cfg = stream.config
    if not 1 <= t <= cfg.T:
        raise IndexError(f"task index {t} outside 1..{cfg.T}")
    classes = stream.task_classes[t - 1]
    Xtr, ytr = stream.draw(classes, cfg.K, "task", t, "train")
    Xte, yte = stream.draw(classes, cfg.test_shots, "task", t, "test")
    return (TaskDataset(t, Xtr, ytr, cfg.N, cfg.K),
            TaskDataset(t, Xte, yte, cfg.N, cfg.test_shots))


PROBE_SOURCES = ("novel_query", "base_support", "fresh_batch")


def sample_probe_task(source: str, stream: TaskStream, N: int, K: int, seed: int = 0,
                      test_shots: int | None = None):
    """A fresh N-way K-shot train/test pair never used by the stream.

    ``novel_query`` picks classes from the query-region reserve,
    ``base_support`` from the support pool, and ``fresh_batch`` (new-instance
    streams) re-draws new examples of the stream's fixed class set.
    """
    cfg = stream.config
    test_shots = cfg.test_shots if test_shots is None else test_shots
    rng = rng_for(cfg.seed, "probe-classes", source, seed)
    if source == "novel_query":
        if N > len(stream.probe_reserve):
            raise DataError(f"novel-class reserve has {len(stream.probe_reserve)} classes, need {N}")
        classes = np.sort(rng.choice(stream.probe_reserve, N, replace=False))
    elif source == "base_support":
        if N > cfg.support_classes:
            raise DataError(f"support pool has {cfg.support_classes} classes, need {N}")
        classes = np.sort(rng.choice(stream.support_ids, N, replace=False))
    elif source == "fresh_batch":
        classes = np.array(stream.task_classes[0])
        if N != len(classes):
            raise DataError(f"fresh batch must use the stream's {len(classes)} classes")
    else:
        raise ValueError(f"unknown probe source {source!r}")
    classes = [int(c) for c in classes]
    Xtr, ytr = stream.draw(classes, K, "probe", source, seed, "train")
    Xte, yte = stream.draw(classes, test_shots, "probe", source, seed, "test")
    origin = "support" if source == "base_support" else "query"
    return (TaskDataset(0, Xtr, ytr, N, K, origin),
            TaskDataset(0, Xte, yte, N, test_shots, origin))


def stream_manifest(stream: TaskStream) -> dict:
    """Audit record of the stream: config, seeds, class ids and class means."""
    cfg = stream.config
    return {
        "config": asdict(cfg),
        "seeds": {
            "geometry": derive_seed(cfg.seed, "geometry"),
            "pool": derive_seed(cfg.seed, "pool"),
        },
        "shift_direction": stream.direction.tolist(),
        "tasks": [
            {"t": t + 1, "class_ids": list(map(int, cls)),
             "train_seeds": [derive_seed(cfg.seed, "examples", "task", t + 1, "train", c)
                             for c in cls]}
            for t, cls in enumerate(stream.task_classes)
        ],
        "class_means": {str(c): stream.class_mean(c).tolist()
                        for c in list(stream.stream_class_ids)},
        "probe_reserve": stream.probe_reserve.tolist(),
    }


def load_csv_dataset(path, input_dim: int | None = None):
    """Read ``class_id,feat_0,...,feat_{d-1}`` rows into a support pool.

    Returns ``(pool, class_table)`` where ``class_table`` maps class id to its
    example count.  ``input_dim`` optionally pins the expected dimension.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "missing header") from None
        header = [h.strip() for h in header]
        d = len(header) - 1
        expected = ["class_id"] + [f"feat_{i}" for i in range(d)]
        if d < 1 or header != expected:
            raise ParseError(path, 1, f"unknown header {','.join(header)!r}; "
                             "expected class_id,feat_0,...,feat_{d-1}")
        if input_dim is not None and d != input_dim:
            raise ParseError(path, 1, f"header declares {d} features, expected {input_dim}")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != d + 1:
                raise ParseError(path, lineno, f"expected {d + 1} fields, found {len(row)}")
            try:
                label = int(row[0])
                feats = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ParseError(path, lineno, f"non-numeric field ({exc})") from None
            if label < 0:
                raise ParseError(path, lineno, "class_id must be non-negative")
            if not np.all(np.isfinite(feats)):
                raise ParseError(path, lineno, "non-finite feature")
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise ParseError(path, 2, "no data rows")
    X = np.array(rows, dtype=np.float64)
    y = np.array(labels, dtype=np.int64)
    order = np.argsort(y, kind="stable")
    X, y = X[order], y[order]
    ids, counts = np.unique(y, return_counts=True)
    table = {int(c): int(n) for c, n in zip(ids, counts)}
    return SupportPool(ids, stored_X=X, stored_y=y), table
