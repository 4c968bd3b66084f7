"""Dense multi-head network with exact backpropagation.

All parameters live in one flat float64 vector.  The canonical order is
layer-major with each layer's weight matrix (row-major, ``out x in``)
followed by its bias: trunk layers, then shared head layers, then each
task head in head order.  Gradients returned by :func:`backward` use the
same layout, so they can be fed straight to :class:`Optimizer` or to the
gradient combiners in :mod:`scalweight.grad_mto`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

LOSS_KINDS = ("cross_entropy", "l1", "bce")
METRIC_OF_LOSS = {
    "cross_entropy": "top1_accuracy",
    "l1": "l1_metric",
    "bce": "mean_binary_accuracy",
}
# True when larger values are better.
HIGHER_IS_BETTER = {
    "top1_accuracy": True,
    "mean_binary_accuracy": True,
    "l1_metric": False,
}


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""

    def __init__(self, message, task=None, step=None):
        super().__init__(message)
        self.task = task
        self.step = step


class TapeError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    """Output head description: loss kind plus output dimension."""

    name: str
    loss: str
    out_dim: int

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if self.out_dim < 1:
            raise ValueError("out_dim must be positive")
        if self.loss == "cross_entropy" and self.out_dim < 2:
            raise ValueError(f"task {self.name!r}: cross-entropy needs at least 2 logits")

    @property
    def metric(self) -> str:
        return METRIC_OF_LOSS[self.loss]


@dataclass(frozen=True)
class Capacity:
    """Architecture knobs: trunk depth, width multiplier and head sharing.

    ``head_depth`` counts the hidden (ReLU) layers of a head; the final linear
    output layer is always task-specific.  The first ``shared_head_layers``
    hidden head layers are shared across heads.
    """

    trunk_depth: int = 2
    base_width: int = 32
    width_multiplier: float = 1.0
    head_depth: int = 1
    shared_head_layers: int = 0

    def __post_init__(self):
        if self.trunk_depth < 0 or self.head_depth < 0:
            raise ValueError("depths must be non-negative")
        if self.width_multiplier <= 0 or self.base_width < 1:
            raise ValueError("width must be positive")
        if not 0 <= self.shared_head_layers <= self.head_depth:
            raise ValueError("shared_head_layers must lie in [0, head_depth]")

    @property
    def width(self) -> int:
        return max(1, int(round(self.base_width * self.width_multiplier)))


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    tasks: tuple[TaskSpec, ...]
    capacity: Capacity = field(default_factory=Capacity)
    # Keys used to seed each head's initialization.  Sub-models built for a
    # single task keep the original key so their init matches the joint model.
    head_keys: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.head_keys is None:
            object.__setattr__(self, "head_keys", tuple(range(len(self.tasks))))
        if len(self.head_keys) != len(self.tasks):
            raise ValueError("head_keys must have one entry per task")
        if self.input_dim < 1 or not self.tasks:
            raise ValueError("need a positive input dim and at least one task")

    def select(self, heads) -> "ModelSpec":
        heads = list(heads)
        return replace(
            self,
            tasks=tuple(self.tasks[h] for h in heads),
            head_keys=tuple(self.head_keys[h] for h in heads),
        )


@dataclass(frozen=True)
class _LayerSlot:
    group: str  # "trunk", "shared", or "head"
    head: int  # -1 for trunk/shared
    index: int
    n_in: int
    n_out: int
    offset: int
    relu: bool

    @property
    def w_size(self):
        return self.n_in * self.n_out

    @property
    def size(self):
        return self.w_size + self.n_out


def _layout(spec: ModelSpec) -> tuple[list[_LayerSlot], int]:
    cap = spec.capacity
    width = cap.width
    slots = []
    offset = 0
    dim = spec.input_dim

    def add(group, head, index, n_in, n_out, relu):
        nonlocal offset
        slot = _LayerSlot(group, head, index, n_in, n_out, offset, relu)
        slots.append(slot)
        offset += slot.size

    for i in range(cap.trunk_depth):
        add("trunk", -1, i, dim, width, True)
        dim = width
    for i in range(cap.shared_head_layers):
        add("shared", -1, i, dim, width, True)
        dim = width
    branch_dim = dim
    for h, task in enumerate(spec.tasks):
        d = branch_dim
        for i in range(cap.head_depth - cap.shared_head_layers):
            add("head", h, i, d, width, True)
            d = width
        add("head", h, cap.head_depth - cap.shared_head_layers, d, task.out_dim, False)
    return slots, offset


def param_count(spec: ModelSpec) -> int:
    return _layout(spec)[1]


class Model:
    """Multi-head MLP.  ``theta`` is the flat parameter vector."""

    def __init__(self, spec: ModelSpec, theta: np.ndarray | None = None, seed: int = 0):
        self.spec = spec
        self.slots, n = _layout(spec)
        self.version = 0
        if theta is None:
            theta = _init_params(spec, self.slots, n, seed)
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (n,):
            raise ValueError(f"expected {n} parameters, got shape {theta.shape}")
        self.theta = theta
        self._bind()

    def _bind(self):
        self.weights = []
        self.biases = []
        for s in self.slots:
            self.weights.append(self.theta[s.offset : s.offset + s.w_size].reshape(s.n_out, s.n_in))
            self.biases.append(self.theta[s.offset + s.w_size : s.offset + s.size])
        self._shared = [k for k, s in enumerate(self.slots) if s.group != "head"]
        self._heads = [
            [k for k, s in enumerate(self.slots) if s.group == "head" and s.head == h]
            for h in range(len(self.spec.tasks))
        ]

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def n_heads(self) -> int:
        return len(self.spec.tasks)

    def set_params(self, theta: np.ndarray):
        if theta.shape != self.theta.shape:
            raise ValueError("parameter vector has the wrong length")
        self.theta[...] = theta
        self.touch()

    def touch(self):
        """Mark parameters as changed so outstanding tapes become stale."""
        self.version += 1

    def copy(self) -> "Model":
        return Model(self.spec, self.theta.copy())

    def head_slice(self, head: int) -> slice:
        idx = self._heads[head]
        start = self.slots[idx[0]].offset
        end = self.slots[idx[-1]].offset + self.slots[idx[-1]].size
        return slice(start, end)

    def shared_slice(self) -> slice:
        if not self._shared:
            return slice(0, 0)
        last = self.slots[self._shared[-1]]
        return slice(0, last.offset + last.size)


def _init_params(spec, slots, n, seed):
    theta = np.zeros(n)
    group_id = {"trunk": 0, "shared": 1}
    for s in slots:
        key = (group_id[s.group], s.index) if s.group != "head" else (2 + spec.head_keys[s.head], s.index)
        rng = np.random.default_rng([seed, *key])
        bound = math.sqrt(6.0 / s.n_in)
        theta[s.offset : s.offset + s.w_size] = rng.uniform(-bound, bound, size=s.w_size)
    return theta


@dataclass
class Tape:
    model: Model
    version: int
    heads: tuple[int, ...]
    # Inputs to every layer evaluated, keyed by slot index.
    inputs: dict
    pre: dict  # pre-activations of ReLU layers

    def check(self, model=None):
        if self.model.version != self.version:
            raise TapeError("stale tape: parameters changed since forward")
        if model is not None and model is not self.model:
            raise TapeError("tape belongs to a different model")


def _dense(model, k, x, tape):
    tape.inputs[k] = x
    z = x @ model.weights[k].T + model.biases[k]
    if model.slots[k].relu:
        tape.pre[k] = z
        return np.maximum(z, 0.0)
    return z


def forward_heads(model: Model, x, heads=None):
    """Run the trunk once and the requested heads on it.

    Returns ``({head: outputs}, tape)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ValueError(f"expected inputs of shape (n, {model.spec.input_dim}), got {x.shape}")
    heads = tuple(range(model.n_heads)) if heads is None else tuple(heads)
    for h in heads:
        if not 0 <= h < model.n_heads:
            raise IndexError(f"unknown task id {h}")
    tape = Tape(model, model.version, heads, {}, {})
    a = x
    for k in model._shared:
        a = _dense(model, k, a, tape)
    outs = {}
    for h in heads:
        b = a
        for k in model._heads[h]:
            b = _dense(model, k, b, tape)
        outs[h] = b
    return outs, tape


def forward(model: Model, x, task_id: int = 0):
    outs, tape = forward_heads(model, x, (task_id,))
    return outs[task_id], tape


def _back_through(model, k, delta, tape, grad):
    s = model.slots[k]
    if s.relu:
        delta = delta * (tape.pre[k] > 0)
    x = tape.inputs[k]
    grad[s.offset : s.offset + s.w_size] += (delta.T @ x).ravel()
    grad[s.offset + s.w_size : s.offset + s.size] += delta.sum(axis=0)
    return delta @ model.weights[k]


def backward(tape: Tape, loss_grad) -> np.ndarray:
    """Gradient of the scalar batch loss w.r.t. every parameter (flat).

    ``loss_grad`` is dL/d(outputs): an array when the tape holds one head,
    otherwise a mapping head -> array.  Heads missing from the mapping
    contribute nothing.
    """
    tape.check()
    model = tape.model
    if not isinstance(loss_grad, dict):
        if len(tape.heads) != 1:
            raise TapeError("tape holds several heads; pass a {head: grad} mapping")
        loss_grad = {tape.heads[0]: loss_grad}
    grad = np.zeros(model.n_params)
    upstream = None
    for h in sorted(loss_grad):
        if h not in tape.heads:
            raise TapeError(f"head {h} was not evaluated in this tape")
        delta = np.asarray(loss_grad[h], dtype=np.float64)
        last = model._heads[h][-1]
        expected = (tape.inputs[last].shape[0], model.slots[last].n_out)
        if delta.shape != expected:
            raise ValueError(f"loss gradient for head {h} has shape {delta.shape}, expected {expected}")
        for k in reversed(model._heads[h]):
            delta = _back_through(model, k, delta, tape, grad)
        upstream = delta if upstream is None else upstream + delta
    if upstream is not None:
        for k in reversed(model._shared):
            upstream = _back_through(model, k, upstream, tape, grad)
    return grad


# ---------------------------------------------------------------- losses


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad(kind: str, outputs, targets, weights=None):
    """Mean batch loss and its gradient w.r.t. ``outputs``.

    ``weights`` optionally rescales each row's contribution (used for mixed
    resampled batches); the loss is then ``sum_i w_i * loss_i / n``.
    """
    n = outputs.shape[0]
    if kind == "cross_entropy":
        targets = np.asarray(targets, dtype=np.int64)
        logp = _log_softmax(outputs)
        rows = np.arange(n)
        per_row = -logp[rows, targets]
        d = np.exp(logp)
        d[rows, targets] -= 1.0
    elif kind == "l1":
        diff = outputs - np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
        per_row = np.abs(diff).mean(axis=1)
        d = np.sign(diff) / outputs.shape[1]
    elif kind == "bce":
        y = np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
        # log(1 + exp(z)) - y z, computed stably
        per_row = (np.logaddexp(0.0, outputs) - y * outputs).mean(axis=1)
        sig = 0.5 * (1.0 + np.tanh(0.5 * outputs))
        d = (sig - y) / outputs.shape[1]
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        per_row = per_row * weights
        d = d * weights[:, None]
    return per_row.sum() / n, d / n


def metric(kind: str, outputs, targets) -> float:
    """Task metric for a loss kind (accuracy, mean binary accuracy or L1)."""
    if kind == "cross_entropy":
        return float(np.mean(outputs.argmax(axis=1) == np.asarray(targets)))
    if kind == "l1":
        return float(np.mean(np.abs(outputs - np.asarray(targets).reshape(outputs.shape))))
    if kind == "bce":
        y = np.asarray(targets).reshape(outputs.shape)
        return float(np.mean((outputs > 0) == (y > 0.5)))
    raise ValueError(f"unknown loss kind {kind!r}")


# ------------------------------------------------------------ optimizers


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    learning_rate: float = 1e-2
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_epochs: int = 0
    schedule: str = "constant"
    total_epochs: int = 10

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("warmup_epochs must lie in [0, total_epochs]")
        object.__setattr__(self, "betas", tuple(self.betas))


def lr_at(config: OptimizerConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warm-up followed by a constant or cosine-decayed rate."""
    if step < 0:
        raise ValueError("step must be non-negative")
    base = config.learning_rate
    warmup = config.warmup_epochs * steps_per_epoch
    if step < warmup:
        return base * (step + 1) / warmup
    if config.schedule == "constant":
        return base
    span = config.total_epochs * steps_per_epoch - warmup
    if span <= 0:
        return 0.0
    t = min(1.0, (step - warmup) / span)
    return 0.5 * base * (1.0 + math.cos(math.pi * t))


class Optimizer:
    """SGD with momentum (L2 decay) or AdamW (decoupled decay)."""

    def __init__(self, config: OptimizerConfig, n_params: int):
        self.config = config
        self.n_params = n_params
        self.t = 0
        if config.kind == "sgd":
            self.state = {"velocity": np.zeros(n_params)}
        else:
            self.state = {"m": np.zeros(n_params), "v": np.zeros(n_params)}

    def step(self, model: Model, grad, lr: float | None = None):
        cfg = self.config
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != (self.n_params,) or model.n_params != self.n_params:
            raise ValueError("gradient length does not match parameter count")
        if not np.all(np.isfinite(grad)):
            raise DivergenceError("non-finite gradient; step rejected")
        lr = cfg.learning_rate if lr is None else lr
        theta = model.theta
        self.t += 1
        if cfg.kind == "sgd":
            if cfg.weight_decay:
                grad = grad + cfg.weight_decay * theta
            vel = self.state["velocity"]
            vel *= cfg.momentum
            vel += grad
            theta -= lr * vel
        else:
            b1, b2 = cfg.betas
            m, v = self.state["m"], self.state["v"]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            m_hat = m / (1.0 - b1**self.t)
            v_hat = v / (1.0 - b2**self.t)
            if cfg.weight_decay:
                theta -= lr * cfg.weight_decay * theta
            theta -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        model.touch()
        return model

    def state_vector(self) -> np.ndarray:
        return np.concatenate([self.state[k] for k in sorted(self.state)])

    def load_state_vector(self, vec, t):
        offset = 0
        for k in sorted(self.state):
            n = self.state[k].size
            self.state[k][...] = vec[offset : offset + n]
            offset += n
        if offset != len(vec):
            raise ValueError("optimizer state vector has the wrong length")
        self.t = int(t)

    def copy(self) -> "Optimizer":
        other = Optimizer(self.config, self.n_params)
        other.load_state_vector(self.state_vector(), self.t)
        return other


def optimizer_step(model, grad, config, step_index, optimizer=None, steps_per_epoch=1):
    """Functional wrapper: one update at the scheduled learning rate."""
    optimizer = optimizer or Optimizer(config, model.n_params)
    return optimizer.step(model, grad, lr_at(config, step_index, steps_per_epoch))
