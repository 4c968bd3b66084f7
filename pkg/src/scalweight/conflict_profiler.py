"""Gradient-conflict statistics collected during training.

The profiler is a read-only observer: it receives per-task gradients
computed from existing tapes and never touches the model, the optimizer or
any random stream of the run.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import atomic_write
from .grad_mto import GradientSet, cosine_matrix


@dataclass
class StepOutcome:
    pairs: list  # (i, j) with i < j
    cosines: np.ndarray
    conflicting: np.ndarray  # bool per pair

    @property
    def n_conflicts(self) -> int:
        return int(self.conflicting.sum())


def record_step(grads: GradientSet) -> StepOutcome:
    if grads.T < 2:
        raise ValueError("conflicts need at least two tasks")
    C = cosine_matrix(grads)
    pairs = list(itertools.combinations(range(grads.T), 2))
    cos = np.array([C[i, j] for i, j in pairs])
    return StepOutcome(pairs, cos, cos < 0.0)


@dataclass
class ConflictRecord:
    epoch: int
    steps: int
    total_pairs: int
    conflicting_pairs: int
    matrix: np.ndarray  # T x T conflict counts, symmetric, zero diagonal

    @property
    def fraction(self) -> float:
        return self.conflicting_pairs / self.total_pairs if self.total_pairs else 0.0

    def pair_fractions(self) -> np.ndarray:
        """Per-pair conflict fraction over the epoch's profiled steps."""
        return self.matrix / self.steps if self.steps else np.zeros_like(self.matrix, dtype=float)


def epoch_summary(outcomes, epoch: int = 0, T: int | None = None) -> ConflictRecord:
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("an epoch summary needs at least one step")
    if T is None:
        T = max(j for i, j in outcomes[0].pairs) + 1
    M = np.zeros((T, T), dtype=np.int64)
    total = conflicts = 0
    for o in outcomes:
        total += len(o.pairs)
        conflicts += o.n_conflicts
        for (i, j), c in zip(o.pairs, o.conflicting):
            if c:
                M[i, j] += 1
                M[j, i] += 1
    return ConflictRecord(epoch, len(outcomes), total, conflicts, M)


def affinity_matrix(records) -> np.ndarray:
    """Median over epochs of each pair's conflict fraction."""
    records = list(records)
    if not records:
        raise ValueError("need at least one epoch record")
    stack = np.stack([r.pair_fractions() for r in records])
    return np.median(stack, axis=0)


def affinity_row_medians(matrix) -> np.ndarray:
    """Median of each task's off-diagonal conflict fractions."""
    T = matrix.shape[0]
    return np.array([np.median(np.delete(matrix[i], i)) for i in range(T)])


class IncompleteGridError(ValueError):
    def __init__(self, missing):
        super().__init__(f"grid is incomplete; missing cells: {missing}")
        self.missing = missing


def variance_analysis(grid: dict, axis_names, axis: str) -> float:
    """Median, over the other axes' settings, of the population variance of
    the time-averaged conflict fraction across ``axis``.

    ``grid`` maps hyperparameter tuples (ordered as ``axis_names``) to a
    sequence of per-epoch conflict fractions.
    """
    axis_names = list(axis_names)
    k = axis_names.index(axis)
    values = sorted({key[k] for key in grid}, key=repr)
    groups: dict = {}
    for key, fractions in grid.items():
        rest = key[:k] + key[k + 1 :]
        groups.setdefault(rest, {})[key[k]] = float(np.mean(fractions))
    missing = []
    for rest, cells in groups.items():
        for v in values:
            if v not in cells:
                missing.append(rest[:k] + (v,) + rest[k:])
    if missing:
        raise IncompleteGridError(sorted(missing, key=repr))
    # shifting by the first value keeps an all-equal axis at exactly zero
    variances = [np.var(np.array([cells[v] for v in values]) - cells[values[0]]) for cells in groups.values()]
    return float(np.median(variances))


@dataclass
class ConflictProfiler:
    """Collects conflict outcomes every ``stride`` steps and folds them per epoch."""

    stride: int = 1
    records: list = field(default_factory=list)
    _pending: list = field(default_factory=list)
    _step: int = 0
    T: int | None = None

    def wants(self) -> bool:
        return self._step % self.stride == 0

    def observe(self, grads: GradientSet | None):
        if grads is not None:
            self.T = grads.T
            self._pending.append(record_step(grads))
        self._step += 1

    def end_epoch(self, epoch: int):
        if self._pending:
            self.records.append(epoch_summary(self._pending, epoch, self.T))
        self._pending = []

    def fractions(self) -> list[float]:
        return [r.fraction for r in self.records]

    def affinity(self) -> np.ndarray:
        return affinity_matrix(self.records)

    def write_csv(self, path):
        write_conflict_csv(self.records, path)


def write_conflict_csv(records, path):
    records = list(records)
    T = records[0].matrix.shape[0] if records else 0
    pairs = list(itertools.combinations(range(T), 2))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "fraction", *(f"conflict_{i}_{j}" for i, j in pairs)])
    for r in records:
        pf = r.pair_fractions()
        w.writerow([r.epoch, repr(r.fraction), *(repr(float(pf[i, j])) for i, j in pairs)])
    atomic_write(path, buf.getvalue())
