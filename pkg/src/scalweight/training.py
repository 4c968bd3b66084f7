"""Training loop shared by single runs, sweeps and PBT members."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .batch import draw_task_batch, evaluate, mixed_batch
from .datasets import MultiSourceDataset, ResamplingSampler, SourceStreams
from .grad_mto import (
    CagradConfig,
    GradientSet,
    cagrad_combine,
    graddrop_combine,
    pcgrad_combine,
    per_task_gradients,
)
from .nn_core import HIGHER_IS_BETTER, Capacity, Model, ModelSpec, Optimizer, OptimizerConfig, forward, loss_and_grad, lr_at, metric
from .weighting import AdaptiveLossState, WeightVector

SCALARIZATION = "scalarization"
LOSS_BASED = ("uncertainty", "imtl-l")
GRADIENT_BASED = ("pcgrad", "graddrop", "cagrad")
METHODS = (SCALARIZATION, *LOSS_BASED, *GRADIENT_BASED)


@dataclass(frozen=True)
class TrainConfig:
    method: str = SCALARIZATION
    mode: str = "reweigh"  # or "resample" (scalarization only)
    epochs: int = 10
    batch_size: int = 32
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    cagrad: CagradConfig = field(default_factory=CagradConfig)
    s_learning_rate: float = 0.025
    profile_stride: int = 0  # 0 disables the conflict profiler

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.mode not in ("reweigh", "resample"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "resample" and self.method != SCALARIZATION:
            raise ValueError("resample mode applies to scalarization only")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass(frozen=True)
class WeightSchedule:
    """Piecewise-constant task weights over epoch intervals ``[start, end)``."""

    entries: tuple  # ((start, end, WeightVector), ...)

    def __post_init__(self):
        entries = tuple((int(a), int(b), w if isinstance(w, WeightVector) else WeightVector(w)) for a, b, w in self.entries)
        if not entries:
            raise ValueError("empty schedule")
        if entries[0][0] != 0:
            raise ValueError("schedule must start at epoch 0")
        for (a0, b0, _), (a1, _, _) in zip(entries, entries[1:]):
            if b0 != a1:
                raise ValueError("schedule intervals must be contiguous")
        if any(b <= a for a, b, _ in entries):
            raise ValueError("schedule intervals must be non-empty")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def constant(cls, weights, epochs: int) -> "WeightSchedule":
        return cls(((0, epochs, weights),))

    @property
    def end(self) -> int:
        return self.entries[-1][1]

    def at(self, epoch: int) -> WeightVector:
        for a, b, w in self.entries:
            if a <= epoch < b:
                return w
        return self.entries[-1][2]

    def stretched(self, epochs: int) -> "WeightSchedule":
        """Rescale boundaries proportionally to a new total length."""
        if epochs == self.end:
            return self
        scale = epochs / self.end
        bounds = [0] + [int(round(b * scale)) for _, b, _ in self.entries]
        bounds[-1] = epochs
        out = []
        for (a, b), (_, _, w) in zip(zip(bounds, bounds[1:]), self.entries):
            if b > a:
                out.append((a, b, w))
        # collapsed intervals hand their span to the next surviving one
        fixed = []
        start = 0
        for _, b, w in out:
            fixed.append((start, b, w))
            start = b
        return WeightSchedule(tuple(fixed))

    def to_json(self):
        return [{"start": a, "end": b, "weights": w.tolist()} for a, b, w in self.entries]

    @classmethod
    def from_json(cls, data) -> "WeightSchedule":
        return cls(tuple((d["start"], d["end"], WeightVector(d["weights"])) for d in data))


def build_model_spec(dataset: MultiSourceDataset, capacity: Capacity) -> ModelSpec:
    return ModelSpec(
        input_dim=dataset.feature_dim,
        tasks=dataset.tasks,
        capacity=capacity,
        head_keys=None if dataset.mode == "multi-domain" else tuple(dataset.source_keys),
    )


def source_metrics(model: Model, dataset: MultiSourceDataset) -> list[dict]:
    """Metric and loss of every source on all of its rows."""
    rows = []
    for t in range(dataset.T):
        task = dataset.task_of(t)
        out, _ = forward(model, dataset.inputs[t], dataset.head_of(t))
        loss, _ = loss_and_grad(task.loss, out, dataset.labels[t])
        rows.append(
            {
                "task": dataset.source_names[t],
                "metric_name": task.metric,
                "value": metric(task.loss, out, dataset.labels[t]),
                "loss": float(loss),
            }
        )
    return rows


def oriented(metric_name: str, value: float) -> float:
    """Value with larger == better."""
    return value if HIGHER_IS_BETTER[metric_name] else -value


def mean_oriented_metric(rows) -> float:
    return float(np.mean([oriented(r["metric_name"], r["value"]) for r in rows]))


class Trainer:
    """Stateful training run; epochs can be run in several chunks."""

    def __init__(
        self,
        model: Model,
        dataset: MultiSourceDataset,
        config: TrainConfig,
        weights=None,
        seed: int = 0,
        eval_sets: dict | None = None,
        profiler=None,
        total_epochs: int | None = None,
    ):
        self.model = model
        self.dataset = dataset
        self.config = config
        if weights is None:
            weights = WeightVector.uniform(dataset.T)
        if not isinstance(weights, WeightSchedule):
            weights = WeightSchedule.constant(weights, total_epochs or config.epochs)
        self.schedule = weights
        self.total_epochs = total_epochs or config.epochs
        opt_cfg = config.optimizer
        if opt_cfg.total_epochs != self.total_epochs:
            from dataclasses import replace

            opt_cfg = replace(opt_cfg, total_epochs=self.total_epochs, warmup_epochs=min(opt_cfg.warmup_epochs, self.total_epochs))
        self.opt_config = opt_cfg
        self.optimizer = Optimizer(opt_cfg, model.n_params)
        self.steps_per_epoch = dataset.steps_per_epoch(config.batch_size)
        self.eval_sets = eval_sets or {}
        self.profiler = profiler
        self.adaptive = AdaptiveLossState.zeros(config.method, dataset.T, config.s_learning_rate) if config.method in LOSS_BASED else None
        self.reseed(seed)
        self.step_count = 0
        self.epoch = 0
        self.history: list[dict] = []
        self.weight_log: list[tuple] = []
        self.backward_passes: list[int] = []
        self.stored_gradient_values = 0
        self.step_times: list[float] = []

    def reseed(self, seed):
        self.seed = seed
        self.streams = SourceStreams(self.dataset, seed)
        self.sampler = None
        self.method_rng = np.random.default_rng([seed, 2])

    # -- one step ---------------------------------------------------------

    def train_step(self):
        cfg = self.config
        p = self.schedule.at(self.epoch)
        lr = lr_at(self.opt_config, self.step_count, self.steps_per_epoch)
        t0 = time.perf_counter()
        T = self.dataset.T
        grads = None
        if cfg.mode == "resample":
            if self.sampler is None or not np.array_equal(self.sampler.weights, p.p):
                state = self.sampler.rng.bit_generator.state if self.sampler else None
                self.sampler = ResamplingSampler(self.dataset, p, cfg.batch_size, self.seed)
                if state is not None:
                    self.sampler.rng.bit_generator.state = state
            inputs, labels, src = self.sampler.next_batch()
            ev = evaluate(self.model, mixed_batch(self.dataset, inputs, labels, src))
            direction = ev.combined_gradient(ev.row_share)
            passes = int(np.count_nonzero(ev.row_share)) if not ev.shared else 1
            logged = p
        else:
            ev = evaluate(self.model, draw_task_batch(self.dataset, self.streams, cfg.batch_size))
            if cfg.method == SCALARIZATION:
                direction = ev.combined_gradient(p.p)
                active = int(np.count_nonzero(p.p))
                passes = 1 if ev.shared else active
                logged = p
            elif cfg.method in LOSS_BASED:
                scales = self.adaptive.loss_scales()
                direction = ev.combined_gradient(scales)
                _, grad_s = self.adaptive.loss(ev.losses)
                logged = self.adaptive.implied_weights()
                self.adaptive.update(grad_s)
                passes = 1 if ev.shared else T
            else:
                grads = per_task_gradients(self.model, None, ev)
                passes = T
                if cfg.method == "cagrad":
                    scaled = GradientSet(grads.grads * (T * p.p)[:, None])
                    direction = cagrad_combine(scaled, cfg.cagrad)
                else:
                    scaled = GradientSet(grads.grads * p.p[:, None])
                    if cfg.method == "pcgrad":
                        direction = pcgrad_combine(scaled, self.method_rng)
                    else:
                        direction = graddrop_combine(scaled, self.method_rng)
                logged = p
        if self.profiler is not None and T >= 2 and self.profiler.wants():
            if grads is None and cfg.mode != "resample":
                grads = GradientSet(np.stack([ev.task_gradient(t) for t in range(T)]))
            self.profiler.observe(grads)
        elif self.profiler is not None:
            self.profiler.observe(None)
        self.optimizer.step(self.model, direction, lr)
        self.step_times.append(time.perf_counter() - t0)
        self.backward_passes.append(passes)
        self.stored_gradient_values = max(
            self.stored_gradient_values, (T if cfg.method in GRADIENT_BASED else 1) * self.model.n_params
        )
        self.weight_log.append((self.step_count, self.epoch, tuple(logged.tolist())))
        self.step_count += 1
        return ev.losses

    # -- epochs -----------------------------------------------------------

    def run_epoch(self):
        losses = []
        for _ in range(self.steps_per_epoch):
            losses.append(self.train_step())
        if self.profiler is not None:
            self.profiler.end_epoch(self.epoch)
        self.epoch += 1
        self._record_metrics(np.nanmean(np.array(losses), axis=0))

    def run(self, epochs: int | None = None):
        n = self.total_epochs - self.epoch if epochs is None else epochs
        for _ in range(n):
            self.run_epoch()
        return self

    def _record_metrics(self, train_losses):
        epoch = self.epoch
        for split, ds in {"train": self.dataset, **self.eval_sets}.items():
            for r in source_metrics(self.model, ds):
                self.history.append({"epoch": epoch, "task": r["task"], "split": split, "metric_name": r["metric_name"], "value": r["value"]})
                self.history.append({"epoch": epoch, "task": r["task"], "split": split, "metric_name": "loss", "value": r["loss"]})

    def final_metrics(self, split: str) -> list[dict]:
        last = max(r["epoch"] for r in self.history)
        return [r for r in self.history if r["epoch"] == last and r["split"] == split and r["metric_name"] != "loss"]

    # -- state ------------------------------------------------------------

    def get_state(self) -> dict:
        return {
            "params": self.model.theta.copy(),
            "optimizer": self.optimizer.state_vector(),
            "optimizer_t": self.optimizer.t,
            "step": self.step_count,
            "epoch": self.epoch,
            "rng": {"streams": self.streams.get_state(), "method": self.method_rng.bit_generator.state},
            "adaptive_s": None if self.adaptive is None else self.adaptive.s.tolist(),
        }

    def set_state(self, state: dict):
        self.model.set_params(np.asarray(state["params"], dtype=np.float64))
        self.optimizer.load_state_vector(np.asarray(state["optimizer"], dtype=np.float64), state["optimizer_t"])
        self.step_count = int(state["step"])
        self.epoch = int(state["epoch"])
        rng = state.get("rng")
        if rng:
            self.streams.set_state(rng["streams"])
            self.method_rng.bit_generator.state = rng["method"]
        if self.adaptive is not None and state.get("adaptive_s") is not None:
            self.adaptive.s = np.asarray(state["adaptive_s"], dtype=np.float64)


def train_run(
    dataset: MultiSourceDataset,
    capacity: Capacity,
    config: TrainConfig,
    weights=None,
    seed: int = 0,
    eval_sets: dict | None = None,
    profiler=None,
) -> Trainer:
    """Initialize a model from ``seed`` and train it for ``config.epochs``."""
    model = Model(build_model_spec(dataset, capacity), seed=seed)
    trainer = Trainer(model, dataset, config, weights, seed, eval_sets, profiler)
    return trainer.run()
