from __future__ import annotations

import numpy as np

from ..errors import DataError


class ClassIndex:
    """Maps global class ids to output-head rows in order of first appearance."""

    def __init__(self, class_ids=()):
        self._rows: dict[int, int] = {}
        self.add(class_ids)

    def __len__(self) -> int:
        return len(self._rows)

    def __contains__(self, class_id) -> bool:
        return int(class_id) in self._rows

    @property
    def class_ids(self) -> list:
        return list(self._rows)

    def add(self, class_ids) -> int:
        """Register unseen ids; returns how many were new."""
        added = 0
        for c in class_ids:
            c = int(c)
            if c not in self._rows:
                self._rows[c] = len(self._rows)
                added += 1
        return added

    def rows(self, class_ids) -> np.ndarray:
        try:
            return np.array([self._rows[int(c)] for c in class_ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"class {exc.args[0]} is not covered by the output head") from None


class ReplayBuffer:
    """Exact memory of every training example seen, in insertion order.

    ``reads`` counts accesses to the stored data, which lets tests check
    that a computation never touched the buffer.
    """

    def __init__(self, capacity: int | None = None):
        if capacity is not None:
            raise NotImplementedError("only the unbounded exact-memory buffer is provided")
        self._X: list = []
        self._y: list = []
        self._task: list = []
        self.reads = 0

    def __len__(self) -> int:
        return sum(x.shape[0] for x in self._X)

    def extend(self, dataset) -> None:
        self._X.append(np.asarray(dataset.X, dtype=np.float64))
        self._y.append(np.asarray(dataset.class_ids, dtype=np.int64))
        self._task.append(np.full(len(dataset), dataset.task_index, dtype=np.int64))

    def arrays(self):
        """``(X, class_ids, task_index)`` of the whole buffer."""
        self.reads += 1
        if not self._X:
            raise DataError("replay buffer is empty")
        return np.concatenate(self._X), np.concatenate(self._y), np.concatenate(self._task)

    def tasks(self) -> list:
        return sorted(set(int(t[0]) for t in self._task))
