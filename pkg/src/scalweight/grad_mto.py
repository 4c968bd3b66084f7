"""Per-task gradients and the gradient-based MTO combiners.

All combiners take a :class:`GradientSet` (one flat gradient per task in
the canonical parameter order) and return one flat update direction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .batch import evaluate
from .nn_core import DivergenceError


@dataclass
class GradientSet:
    grads: np.ndarray  # (T, P)
    task_ids: tuple = None

    def __post_init__(self):
        self.grads = np.ascontiguousarray(np.atleast_2d(np.asarray(self.grads, dtype=np.float64)))
        if self.task_ids is None:
            self.task_ids = tuple(range(self.grads.shape[0]))
        if len(self.task_ids) != self.grads.shape[0]:
            raise ValueError("one task id per gradient required")
        if not np.all(np.isfinite(self.grads)):
            bad = [t for t, g in zip(self.task_ids, self.grads) if not np.all(np.isfinite(g))]
            raise DivergenceError(f"non-finite gradient for tasks {bad}", task=bad[0])

    @property
    def T(self) -> int:
        return self.grads.shape[0]

    @property
    def P(self) -> int:
        return self.grads.shape[1]

    @property
    def stored_values(self) -> int:
        return self.grads.size

    def mean(self) -> np.ndarray:
        return self.grads.mean(axis=0)


def per_task_gradients(model, batch, evaluation=None) -> GradientSet:
    """One backward pass per task on the batch (T passes, T*P stored values)."""
    ev = evaluation if evaluation is not None else evaluate(model, batch)
    grads = np.empty((len(ev.heads), model.n_params))
    for t in range(len(ev.heads)):
        try:
            grads[t] = ev.task_gradient(t)
        except FloatingPointError as exc:
            raise DivergenceError(str(exc), task=t) from exc
    return GradientSet(grads)


def cosine(g_i, g_j) -> float:
    ni, nj = np.linalg.norm(g_i), np.linalg.norm(g_j)
    if ni == 0.0 or nj == 0.0:
        return 0.0
    return float(np.dot(g_i, g_j) / (ni * nj))


@dataclass(frozen=True)
class Conflict:
    cosine: float
    conflicting: bool
    degenerate: bool = False


def is_conflicting(g_i, g_j) -> Conflict:
    """Two gradients conflict iff their cosine is negative.

    A zero vector is never conflicting; the result is flagged degenerate.
    """
    ni, nj = np.linalg.norm(g_i), np.linalg.norm(g_j)
    if ni == 0.0 or nj == 0.0:
        return Conflict(0.0, False, True)
    c = float(np.dot(g_i, g_j) / (ni * nj))
    return Conflict(c, c < 0.0)


def cosine_matrix(grads: GradientSet) -> np.ndarray:
    G = kernels.gram(grads.grads)
    norms = np.sqrt(np.diag(G))
    with np.errstate(invalid="ignore", divide="ignore"):
        C = G / np.outer(norms, norms)
    C[~np.isfinite(C)] = 0.0
    return C


# ----------------------------------------------------------------- PCGrad


def pcgrad_order(T: int, rng) -> np.ndarray:
    """Random visiting order of the other tasks, one row per task."""
    order = np.empty((T, T - 1), dtype=np.int64)
    for i in range(T):
        others = np.array([j for j in range(T) if j != i], dtype=np.int64)
        order[i] = others[rng.permutation(T - 1)]
    return order


def pcgrad_project(grads: GradientSet, rng=None, order=None) -> np.ndarray:
    """Per-task gradients after projecting out conflicting components."""
    if grads.T < 2:
        raise ValueError("PCGrad needs at least two tasks")
    if order is None:
        order = pcgrad_order(grads.T, rng if rng is not None else np.random.default_rng())
    return kernels.pcgrad_project(grads.grads, order)


def pcgrad_combine(grads: GradientSet, rng=None, order=None) -> np.ndarray:
    return pcgrad_project(grads, rng, order).sum(axis=0)


# --------------------------------------------------------------- GradDrop


def graddrop_keep_probability(grads: GradientSet) -> np.ndarray:
    """Per-coordinate probability of keeping the positive contributions."""
    G = grads.grads
    absum = np.abs(G).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        purity = np.where(absum > 0, G.sum(axis=0) / absum, 0.0)
    return 0.5 * (1.0 + purity)


def graddrop_expectation(grads: GradientSet) -> np.ndarray:
    G = grads.grads
    keep = graddrop_keep_probability(grads)
    pos = np.where(G > 0, G, 0.0).sum(axis=0)
    neg = np.where(G > 0, 0.0, G).sum(axis=0)
    return keep * pos + (1.0 - keep) * neg


def graddrop_combine(grads: GradientSet, rng=None, u=None) -> np.ndarray:
    if grads.T < 2:
        raise ValueError("GradDrop needs at least two tasks")
    if u is None:
        u = (rng if rng is not None else np.random.default_rng()).random(grads.P)
    return kernels.graddrop(grads.grads, u)


# ------------------------------------------------------------------ CAGrad


@dataclass(frozen=True)
class CagradConfig:
    c: float = 0.4
    inner_iters: int = 25
    inner_lr: float = 0.05

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("c must be non-negative")
        if self.inner_iters < 1 or self.inner_lr <= 0:
            raise ValueError("inner_iters and inner_lr must be positive")


@dataclass
class CagradResult:
    direction: np.ndarray
    weights: np.ndarray
    objective: list = field(default_factory=list)
    fallback: bool = False


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u * k > css - 1.0)[0][-1]
    tau = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def cagrad_solve(grads: GradientSet, config: CagradConfig = CagradConfig()) -> CagradResult:
    """Conflict-averse direction via projected gradient descent on the simplex.

    Minimizes ``F(w) = g_w . g0 + sqrt(phi) ||g_w||`` with ``g_w = sum w_t g_t``,
    ``g0`` the mean gradient and ``phi = c^2 ||g0||^2``, then returns
    ``d = g0 + sqrt(phi) / ||g_w|| * g_w``.  Steps that would increase ``F``
    are retried with a halved step, so the recorded objective never rises.
    """
    if grads.T < 2:
        raise ValueError("CAGrad needs at least two tasks")
    G = grads.grads
    T = grads.T
    g0 = G.mean(axis=0)
    gram = kernels.gram(G)
    scale = float(np.trace(gram)) / T
    w = np.full(T, 1.0 / T)
    if config.c == 0.0 or scale == 0.0:
        return CagradResult(g0.copy(), w, [])
    A = gram / scale  # objective is scale-equivariant; solve on a unit scale
    b = A.mean(axis=1)  # g_t . g0 (scaled)
    sqrt_phi = config.c * math.sqrt(max(b.mean(), 0.0))

    def objective(w):
        return float(w @ b + sqrt_phi * math.sqrt(max(w @ A @ w, 0.0)))

    def gradient(w):
        norm = math.sqrt(max(w @ A @ w, 1e-20))
        return b + sqrt_phi * (A @ w) / norm

    f = objective(w)
    history = [f]
    lr = config.inner_lr
    for _ in range(config.inner_iters):
        step = lr
        while True:
            cand = project_to_simplex(w - step * gradient(w))
            fc = objective(cand)
            if fc <= f or step < 1e-12:
                break
            step *= 0.5
        if fc <= f:
            w, f = cand, fc
        history.append(f)
    gw = w @ G
    gw_norm = float(np.linalg.norm(gw))
    if not np.all(np.isfinite(w)) or not math.isfinite(gw_norm) or gw_norm == 0.0:
        return CagradResult(g0.copy(), w, history, fallback=True)
    radius = config.c * float(np.linalg.norm(g0))
    d = g0 + (radius / gw_norm) * gw
    return CagradResult(d, w, history)


def cagrad_combine(grads: GradientSet, config: CagradConfig = CagradConfig()) -> np.ndarray:
    return cagrad_solve(grads, config).direction
