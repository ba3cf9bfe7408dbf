"""Continual-learning metrics over a lower-triangular accuracy grid.

``a[k][j]`` is the accuracy on the j-th trained task after finishing the
k-th task (1-based, j <= k). Average accuracy of stage k is the mean of
row k; forgetting of task j at stage k is the drop from its best past
accuracy to its stage-k accuracy, averaged over j < k.
"""

from __future__ import annotations

from .errors import ContractError


class AccuracyMatrix:
    def __init__(self, rows: list[list[float]] | None = None):
        self._rows: list[list[float]] = []
        for row in rows or []:
            self.add_row(row)

    def add_row(self, row):
        row = [float(v) for v in row]
        if len(row) != len(self._rows) + 1:
            raise ContractError(
                f"row {len(self._rows) + 1} must have {len(self._rows) + 1} entries"
            )
        for v in row:
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"accuracy {v} outside [0, 1]")
        self._rows.append(row)

    @property
    def num_stages(self) -> int:
        return len(self._rows)

    def value(self, k: int, j: int) -> float:
        if not 1 <= j <= k <= self.num_stages:
            raise ContractError(f"a[{k}][{j}] is outside the lower triangle")
        return self._rows[k - 1][j - 1]

    def row(self, k: int) -> list[float]:
        if not 1 <= k <= self.num_stages:
            raise ContractError(f"stage {k} not recorded")
        return list(self._rows[k - 1])

    def rows(self) -> list[list[float]]:
        return [list(r) for r in self._rows]


def average_accuracy(matrix: AccuracyMatrix, k: int) -> float:
    """Mean accuracy over the first k tasks after training k tasks."""
    row = matrix.row(k)
    return sum(row) / len(row)


def task_forgetting(matrix: AccuracyMatrix, k: int, j: int) -> float:
    """max_{l in [j, k-1]} a[l][j] - a[k][j]."""
    if j >= k:
        raise ContractError("forgetting is defined only for j < k")
    best = max(matrix.value(l, j) for l in range(j, k))
    return best - matrix.value(k, j)


def average_forgetting(matrix: AccuracyMatrix, k: int) -> float:
    """Mean forgetting over tasks seen before stage k; needs k >= 2."""
    if k < 2:
        raise ContractError("average forgetting is undefined for fewer than 2 tasks")
    return sum(task_forgetting(matrix, k, j) for j in range(1, k)) / (k - 1)
