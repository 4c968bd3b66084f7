"""Task weights on the probability simplex, scalarized steps, and the
loss-based adaptive weightings (uncertainty, IMTL-L)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .batch import MixedBatch, evaluate

SIMPLEX_TOL = 1e-12


class WeightVector:
    """A point on the probability simplex over T tasks or domains."""

    __slots__ = ("p",)

    def __init__(self, p):
        p = np.array(p, dtype=np.float64).reshape(-1)
        if p.size == 0 or np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise ValueError(f"invalid simplex point {p}")
        if abs(p.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"weights sum to {p.sum()!r}, not 1")
        p.flags.writeable = False
        self.p = p

    @classmethod
    def uniform(cls, T: int) -> "WeightVector":
        return cls(np.full(T, 1.0 / T))

    @classmethod
    def vertex(cls, T: int, t: int) -> "WeightVector":
        p = np.zeros(T)
        p[t] = 1.0
        return cls(p)

    def __len__(self):
        return self.p.size

    def __iter__(self):
        return iter(self.p.tolist())

    def __getitem__(self, i):
        return self.p[i]

    def __array__(self, dtype=None, copy=None):
        return self.p if dtype is None else self.p.astype(dtype)

    def __eq__(self, other):
        return isinstance(other, WeightVector) and np.array_equal(self.p, other.p)

    def __hash__(self):
        return hash(self.p.tobytes())

    def __repr__(self):
        return f"WeightVector({np.array2string(self.p, precision=4, separator=', ')})"

    def tolist(self) -> list[float]:
        return self.p.tolist()


def simplex_project(raw) -> WeightVector:
    """Normalize a non-negative vector to sum to one."""
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if np.any(raw < 0):
        raise ValueError("weights must be non-negative")
    total = raw.sum()
    if not total > 0:
        raise ValueError("cannot normalize an all-zero weight vector")
    p = raw / total
    # absorb the last rounding error so the sum check holds to 1e-12
    drift = p.sum() - 1.0
    if drift:
        k = int(np.argmax(p))
        p[k] -= drift
    return WeightVector(np.clip(p, 0.0, 1.0))


def scalarized_loss(per_task_losses, p) -> float:
    losses = np.asarray(per_task_losses, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if losses.shape != p.shape:
        raise ValueError("loss and weight vectors differ in length")
    if np.any(np.isnan(losses)):
        raise ValueError("NaN in per-task losses")
    return float(np.dot(p, losses))


def scalarized_gradient(model, batch, p, mode: str = "reweigh"):
    """Weighted-sum gradient for one batch; returns ``(grad, evaluation)``.

    ``reweigh`` combines per-source losses with the weights ``p``;
    ``resample`` takes the plain mean loss of a mixed batch whose rows were
    already drawn with probabilities ``p``.
    """
    ev = evaluate(model, batch)
    if mode == "reweigh":
        if isinstance(batch, MixedBatch):
            raise ValueError("reweigh mode needs per-source sub-batches")
        coeffs = np.asarray(p, dtype=np.float64)
        if coeffs.shape != (batch.T,):
            raise ValueError("weight vector length does not match the number of sources")
    elif mode == "resample":
        if not isinstance(batch, MixedBatch):
            raise ValueError("resample mode needs a mixed batch with source ids")
        coeffs = ev.row_share
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ev.combined_gradient(coeffs), ev


def scalarized_step(model, batch, p, optimizer, mode: str = "reweigh", lr=None):
    """One optimizer step on the scalarized loss.

    Returns ``(model, per_task_losses)``; losses of sources absent from a
    mixed batch are NaN.
    """
    grad, ev = scalarized_gradient(model, batch, p, mode)
    optimizer.step(model, grad, lr)
    return model, ev.losses


# ----------------------------------------------------------- adaptive losses


@dataclass
class AdaptiveLossState:
    method: str  # "uncertainty" or "imtl-l"
    s: np.ndarray
    s_learning_rate: float = 0.025
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.method not in ("uncertainty", "imtl-l"):
            raise ValueError(f"unknown adaptive method {self.method!r}")
        self.s = np.array(self.s, dtype=np.float64)

    @classmethod
    def zeros(cls, method, T, s_learning_rate=0.025):
        return cls(method, np.zeros(T), s_learning_rate)

    def loss(self, per_task_losses):
        fn = uncertainty_loss if self.method == "uncertainty" else imtl_l_loss
        return fn(per_task_losses, self)

    def loss_scales(self) -> np.ndarray:
        """Multipliers applied to each task loss (and hence gradient)."""
        return np.exp(-self.s) if self.method == "uncertainty" else np.exp(self.s)

    def implied_weights(self) -> WeightVector:
        """Loss multipliers normalized onto the simplex, for logging."""
        return simplex_project(self.loss_scales())

    def update(self, grad_s):
        grad_s = np.asarray(grad_s, dtype=np.float64)
        if not np.all(np.isfinite(grad_s)):
            raise FloatingPointError("non-finite gradient for adaptive loss scales")
        self.s -= self.s_learning_rate * grad_s
        self.history.append(self.implied_weights().tolist())


def uncertainty_loss(per_task_losses, state: AdaptiveLossState):
    """Homoscedastic-uncertainty weighting, ``sum exp(-s) L + s / 2``.

    Returns ``(total, d total / d s)``.
    """
    if state.method != "uncertainty":
        raise ValueError("state is not an uncertainty state")
    L = np.asarray(per_task_losses, dtype=np.float64)
    w = np.exp(-state.s)
    return float(np.sum(w * L + 0.5 * state.s)), -w * L + 0.5


def imtl_l_loss(per_task_losses, state: AdaptiveLossState):
    """IMTL-L, ``sum exp(s) L - s``; at the optimum every scaled loss is 1."""
    if state.method != "imtl-l":
        raise ValueError("state is not an IMTL-L state")
    L = np.asarray(per_task_losses, dtype=np.float64)
    w = np.exp(state.s)
    return float(np.sum(w * L - state.s)), w * L - 1.0


def stationary_scale(method: str, loss: float, bracket=(-50.0, 50.0)) -> float:
    """Root of the 1-D stationarity condition d total / d s = 0 for fixed L."""
    from scipy.optimize import brentq

    if method == "uncertainty":
        fn = lambda s: -math.exp(-s) * loss + 0.5  # noqa: E731
    elif method == "imtl-l":
        fn = lambda s: math.exp(s) * loss - 1.0  # noqa: E731
    else:
        raise ValueError(method)
    return brentq(fn, *bracket, xtol=1e-14, rtol=1e-14)
