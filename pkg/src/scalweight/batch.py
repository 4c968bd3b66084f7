"""Per-source sub-batches and their losses, tapes and gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import MULTI_TASK, MultiSourceDataset, SourceStreams
from .nn_core import DivergenceError, backward, forward_heads, loss_and_grad


@dataclass
class TaskBatch:
    """One sub-batch per source (reweigh mode).

    In multi-task mode ``shared`` is true and all sources use the same
    input rows, so the trunk is evaluated once.
    """

    heads: list
    losses: list  # loss kind per source
    inputs: list
    labels: list
    shared: bool = False

    @property
    def T(self):
        return len(self.heads)


@dataclass
class MixedBatch:
    """A resampled batch: rows drawn from the source mixture."""

    heads: list
    losses: list
    inputs: np.ndarray
    labels: list  # per source, rows with that source id in order
    source_ids: np.ndarray

    @property
    def T(self):
        return len(self.heads)


def draw_task_batch(dataset: MultiSourceDataset, streams: SourceStreams, batch_size: int) -> TaskBatch:
    rows = streams.rows(batch_size)
    return TaskBatch(
        heads=[dataset.head_of(t) for t in range(dataset.T)],
        losses=[dataset.task_of(t).loss for t in range(dataset.T)],
        inputs=[x[r] for x, r in zip(dataset.inputs, rows)],
        labels=[y[r] for y, r in zip(dataset.labels, rows)],
        shared=dataset.mode == MULTI_TASK,
    )


def mixed_batch(dataset: MultiSourceDataset, inputs, labels, source_ids) -> MixedBatch:
    return MixedBatch(
        heads=[dataset.head_of(t) for t in range(dataset.T)],
        losses=[dataset.task_of(t).loss for t in range(dataset.T)],
        inputs=inputs,
        labels=labels,
        source_ids=np.asarray(source_ids),
    )


@dataclass
class Evaluation:
    """Per-source losses with tapes, ready for any number of backward passes."""

    losses: np.ndarray  # NaN for sources absent from a mixed batch
    loss_grads: list  # dL_t/d(outputs) or None
    tapes: list  # tape per source (shared tape object in multi-task mode)
    heads: list
    shared: bool
    row_share: np.ndarray  # fraction of batch rows per source (mixed) or ones

    def task_gradient(self, t: int) -> np.ndarray:
        if self.loss_grads[t] is None:
            raise ValueError(f"source {t} has no rows in this batch")
        return backward(self.tapes[t], {self.heads[t]: self.loss_grads[t]})

    def combined_gradient(self, coeffs) -> np.ndarray:
        """Gradient of ``sum_t coeffs[t] * L_t``.

        Sources with a zero coefficient are skipped entirely.  With a shared
        tape a single backward pass is used.
        """
        active = [t for t, c in enumerate(coeffs) if c != 0.0 and self.loss_grads[t] is not None]
        if self.shared:
            tape = self.tapes[0]
            return backward(tape, {self.heads[t]: coeffs[t] * self.loss_grads[t] for t in active})
        grad = None
        for t in active:
            g = coeffs[t] * backward(self.tapes[t], {self.heads[t]: self.loss_grads[t]})
            grad = g if grad is None else grad + g
        if grad is None:
            grad = np.zeros(self.tapes[0].model.n_params if self.tapes else 0)
        return grad


def _check(loss, t):
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss for task {t}", task=t)


def evaluate(model, batch) -> Evaluation:
    if isinstance(batch, MixedBatch):
        return _evaluate_mixed(model, batch)
    T = batch.T
    losses = np.empty(T)
    grads, tapes = [], []
    if batch.shared:
        outs, tape = forward_heads(model, batch.inputs[0], sorted(set(batch.heads)))
        for t in range(T):
            loss, d = loss_and_grad(batch.losses[t], outs[batch.heads[t]], batch.labels[t])
            _check(loss, t)
            losses[t] = loss
            grads.append(d)
            tapes.append(tape)
    else:
        for t in range(T):
            outs, tape = forward_heads(model, batch.inputs[t], (batch.heads[t],))
            loss, d = loss_and_grad(batch.losses[t], outs[batch.heads[t]], batch.labels[t])
            _check(loss, t)
            losses[t] = loss
            grads.append(d)
            tapes.append(tape)
    return Evaluation(losses, grads, tapes, list(batch.heads), batch.shared, np.ones(T))


def _evaluate_mixed(model, batch: MixedBatch) -> Evaluation:
    T = batch.T
    B = len(batch.source_ids)
    losses = np.full(T, np.nan)
    grads, tapes = [], []
    share = np.zeros(T)
    for t in range(T):
        mask = batch.source_ids == t
        if not mask.any():
            grads.append(None)
            tapes.append(None)
            continue
        outs, tape = forward_heads(model, batch.inputs[mask], (batch.heads[t],))
        loss, d = loss_and_grad(batch.losses[t], outs[batch.heads[t]], batch.labels[t])
        _check(loss, t)
        losses[t] = loss
        share[t] = mask.sum() / B
        grads.append(d)
        tapes.append(tape)
    return Evaluation(losses, grads, tapes, list(batch.heads), False, share)
