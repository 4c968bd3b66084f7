"""SD baselines, weight sweeps, delta / trade-off reports and cost accounting.

Every report is a pure function of :class:`RunManifest` objects, so tables
can be regenerated from a run directory without retraining.
"""
from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write
from .conflict_profiler import ConflictProfiler
from .datasets import MultiSourceDataset, gen_multitask
from .nn_core import HIGHER_IS_BETTER, Capacity, OptimizerConfig, param_count
from .training import (
    GRADIENT_BASED,
    LOSS_BASED,
    METHODS,
    SCALARIZATION,
    TrainConfig,
    WeightSchedule,
    build_model_spec,
    oriented,
    train_run,
)
from .weighting import WeightVector

METRIC_FIELDS = ("run_id", "epoch", "task", "split", "metric_name", "value")


@dataclass
class Splits:
    train: MultiSourceDataset
    val: MultiSourceDataset
    test: MultiSourceDataset

    def select_sources(self, sources) -> "Splits":
        return Splits(*(d.select_sources(sources) for d in (self.train, self.val, self.test)))


def make_splits(dataset: MultiSourceDataset, val_fraction=0.2, test_fraction=0.2, seed=0) -> Splits:
    rest, test = dataset.split(test_fraction, seed)
    train, val = rest.split(val_fraction / (1 - test_fraction), seed + 1)
    return Splits(train, val, test)


def capacity_key(c: Capacity) -> str:
    return f"d{c.trunk_depth}-w{c.width_multiplier:g}-h{c.head_depth}-s{c.shared_head_layers}"


@dataclass
class RunManifest:
    run_id: str
    dataset: dict
    capacity: dict
    method: str
    weights: list | None
    schedule: list | None
    optimizer: dict
    train: dict
    seed: int
    param_count: int
    metrics: list = field(default_factory=list)
    wall_clock: float = 0.0
    memory: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)
    conflicts: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data) -> "RunManifest":
        return cls(**data)

    def save(self, run_dir):
        run_dir = Path(run_dir)
        atomic_write(run_dir / "manifest.json", json.dumps(self.to_json(), indent=2, sort_keys=True))
        atomic_write(run_dir / "metrics.csv", metrics_csv([self]))

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        return cls.from_json(json.loads((Path(run_dir) / "manifest.json").read_text(encoding="utf-8")))

    def final(self, split: str) -> dict:
        """task -> (metric_name, value) at the last epoch."""
        last = max(r["epoch"] for r in self.metrics)
        return {
            r["task"]: (r["metric_name"], r["value"])
            for r in self.metrics
            if r["epoch"] == last and r["split"] == split and r["metric_name"] != "loss"
        }

    def mean_oriented(self, split: str) -> float:
        return float(np.mean([oriented(m, v) for m, v in self.final(split).values()]))


def metrics_csv(manifests) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for m in manifests:
        for r in m.metrics:
            w.writerow([m.run_id, r["epoch"], r["task"], r["split"], r["metric_name"], repr(float(r["value"]))])
    return buf.getvalue()


def run_experiment(
    splits: Splits,
    capacity: Capacity,
    config: TrainConfig,
    weights=None,
    seed: int = 0,
    run_id: str = "run",
    dataset_info: dict | None = None,
    profile: bool = False,
    return_trainer: bool = False,
):
    """Train one model and describe it as a :class:`RunManifest`."""
    profiler = ConflictProfiler(stride=max(1, config.profile_stride)) if (profile or config.profile_stride) else None
    t0 = time.perf_counter()
    trainer = train_run(
        splits.train, capacity, config, weights, seed, eval_sets={"val": splits.val, "test": splits.test}, profiler=profiler
    )
    elapsed = time.perf_counter() - t0
    T = splits.train.T
    sched = trainer.schedule
    constant = len(sched.entries) == 1
    manifest = RunManifest(
        run_id=run_id,
        dataset=dict(dataset_info or {}, mode=splits.train.mode, sources=list(splits.train.source_names)),
        capacity=asdict(capacity),
        method=config.method,
        weights=sched.entries[0][2].tolist() if constant else None,
        schedule=None if constant else sched.to_json(),
        optimizer=_jsonable(asdict(trainer.opt_config)),
        train={"epochs": config.epochs, "batch_size": config.batch_size, "mode": config.mode, "steps_per_epoch": trainer.steps_per_epoch},
        seed=seed,
        param_count=trainer.model.n_params,
        metrics=trainer.history,
        wall_clock=elapsed,
        memory={
            "stored_gradient_values": trainer.stored_gradient_values,
            "backward_passes_per_step": max(trainer.backward_passes) if trainer.backward_passes else 0,
            "mean_step_seconds": float(np.mean(trainer.step_times)) if trainer.step_times else 0.0,
        },
        notes={},
    )
    if config.method in GRADIENT_BASED:
        manifest.notes["gradient_masking"] = "post-accumulation"
    if config.method == "cagrad":
        manifest.notes["cagrad"] = asdict(config.cagrad)
    if config.method in LOSS_BASED:
        manifest.notes["implied_weights_final"] = trainer.adaptive.implied_weights().tolist()
    if profiler is not None and T >= 2:
        manifest.notes["profile_stride"] = profiler.stride
        manifest.conflicts = [
            {"epoch": r.epoch, "fraction": r.fraction, "steps": r.steps, "pair_fractions": r.pair_fractions().tolist()}
            for r in profiler.records
        ]
    if return_trainer:
        return manifest, trainer
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_jsonable(v) for v in obj]
    return obj


def _cell(args):
    splits, capacity, config, weights, seed, run_id, info = args
    return run_experiment(splits, capacity, config, weights, seed, run_id, info)


def _map(fn, jobs, items):
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# ------------------------------------------------------------ SD baselines


def run_sd_baselines(splits: Splits, capacities, config: TrainConfig, seeds=(0, 1, 2), jobs=1, dataset_info=None) -> list[RunManifest]:
    """One single-source model per (task, capacity, seed).

    Sub-datasets keep the reference epoch length, so SD runs take exactly as
    many steps per epoch as joint runs.
    """
    cells = []
    for cap in capacities:
        for t in range(splits.train.T):
            sub = splits.select_sources([t])
            for seed in seeds:
                run_id = f"sd-{capacity_key(cap)}-{splits.train.source_names[t]}-seed{seed}"
                info = dict(dataset_info or {}, sd_source=splits.train.source_names[t])
                cells.append((sub, cap, config, None, seed, run_id, info))
    return _map(_cell, jobs, cells)


def sd_table(manifests, split: str = "test") -> dict:
    """(capacity key, task) -> (metric_name, mean, std) over seeds."""
    groups: dict = {}
    for m in manifests:
        for task, (name, value) in m.final(split).items():
            groups.setdefault((capacity_key(Capacity(**m.capacity)), task), (name, []))[1].append(value)
    return {k: (name, float(np.mean(v)), float(np.std(v))) for k, (name, v) in groups.items()}


# ----------------------------------------------------------------- sweeps


@dataclass
class SweepResult:
    capacity: dict
    grid: list  # weight lists
    tasks: list
    metric_names: list
    test_mean: np.ndarray  # (grid, task)
    test_std: np.ndarray
    val_score: np.ndarray  # seed-averaged oriented mean over tasks, per grid point
    test_score: np.ndarray
    best_index: int
    param_count: int
    seeds: list

    @property
    def best_weights(self) -> list:
        return self.grid[self.best_index]

    def to_rows(self):
        for g, p in enumerate(self.grid):
            row = {"p": json.dumps(p), "val_score": self.val_score[g], "test_score": self.test_score[g], "best": g == self.best_index}
            for k, task in enumerate(self.tasks):
                row[f"{task}_mean"] = self.test_mean[g, k]
                row[f"{task}_std"] = self.test_std[g, k]
            yield row


def weight_grid_2(n_points: int) -> list[WeightVector]:
    """Evenly spaced (p1, 1 - p1) grid including both vertices."""
    out = []
    for p1 in np.linspace(0.0, 1.0, n_points):
        p1 = float(round(p1, 12))
        out.append(WeightVector([p1, 1.0 - p1]))
    return out


def sweep_runs(splits, capacity, grid, seeds, config, jobs=1, dataset_info=None) -> list[RunManifest]:
    cells = []
    for g, p in enumerate(grid):
        p = p if isinstance(p, WeightVector) else WeightVector(p)
        for seed in seeds:
            run_id = f"sweep-{capacity_key(capacity)}-g{g:03d}-seed{seed}"
            cells.append((splits, capacity, config, p, seed, run_id, dataset_info))
    return _map(_cell, jobs, cells)


def summarize_sweep(manifests) -> SweepResult:
    """Seed-averaged grid metrics; ``p*`` maximizes the validation score.

    Ties go to the earlier grid point.
    """
    manifests = list(manifests)
    grid: list = []
    by_point: dict = {}
    for m in manifests:
        key = tuple(m.weights)
        if key not in by_point:
            grid.append(list(key))
            by_point[key] = []
        by_point[key].append(m)
    first = manifests[0]
    tasks = list(first.final("test"))
    metric_names = [first.final("test")[t][0] for t in tasks]
    G, K = len(grid), len(tasks)
    test_mean, test_std = np.zeros((G, K)), np.zeros((G, K))
    val_score, test_score = np.zeros(G), np.zeros(G)
    for g, p in enumerate(grid):
        runs = by_point[tuple(p)]
        vals = np.array([[r.final("test")[t][1] for t in tasks] for r in runs])
        test_mean[g], test_std[g] = vals.mean(axis=0), vals.std(axis=0)
        val_score[g] = np.mean([r.mean_oriented("val") for r in runs])
        test_score[g] = np.mean([r.mean_oriented("test") for r in runs])
    return SweepResult(
        capacity=first.capacity,
        grid=grid,
        tasks=tasks,
        metric_names=metric_names,
        test_mean=test_mean,
        test_std=test_std,
        val_score=val_score,
        test_score=test_score,
        best_index=int(np.argmax(val_score)),
        param_count=first.param_count,
        seeds=sorted({m.seed for m in manifests}),
    )


def sweep_weights(splits, capacity, grid, seeds=(0, 1, 2), config=None, jobs=1, include_vertices=False, dataset_info=None):
    """Train every (grid point, seed) cell; returns ``(SweepResult, manifests)``."""
    config = config or TrainConfig()
    grid = [p if isinstance(p, WeightVector) else WeightVector(p) for p in grid]
    if include_vertices:
        for t in range(splits.train.T):
            v = WeightVector.vertex(splits.train.T, t)
            if v not in grid:
                grid.append(v)
    manifests = sweep_runs(splits, capacity, grid, seeds, config, jobs, dataset_info)
    return summarize_sweep(manifests), manifests


# ---------------------------------------------------------------- reports


def metric_delta(metric_name: str, joint: float, sd: float) -> float:
    """Positive when joint training beats the SD baseline."""
    return joint - sd if HIGHER_IS_BETTER[metric_name] else sd - joint


def delta_report(sweep: SweepResult, sd: dict) -> dict:
    """task -> delta at ``p*`` against the SD baseline of the same capacity."""
    ck = capacity_key(Capacity(**sweep.capacity))
    out = {}
    for k, task in enumerate(sweep.tasks):
        name, sd_mean, _ = sd[(ck, task)]
        out[task] = metric_delta(name, float(sweep.test_mean[sweep.best_index, k]), sd_mean)
    return out


def dominates(metric_names, joint, sd) -> bool:
    """Strict improvement on every task (ties do not count)."""
    return all(metric_delta(n, j, s) > 0 for n, j, s in zip(metric_names, joint, sd))


def tradeoff_table(sweeps, sd: dict) -> list[dict]:
    rows = []
    for sweep in sweeps:
        ck = capacity_key(Capacity(**sweep.capacity))
        sd_vals = [sd[(ck, t)][1] for t in sweep.tasks]
        for g, p in enumerate(sweep.grid):
            row = {"capacity": ck, "p": p, "param_count": sweep.param_count}
            for k, t in enumerate(sweep.tasks):
                row[f"metric_{t}"] = float(sweep.test_mean[g, k])
            row["dominates_sd"] = dominates(sweep.metric_names, sweep.test_mean[g], sd_vals)
            rows.append(row)
    return rows


def sd_param_total(dataset: MultiSourceDataset, capacity: Capacity) -> int:
    """Parameters of one SD model per source."""
    return sum(param_count(build_model_spec(dataset.select_sources([t]), capacity)) for t in range(dataset.T))


def rows_to_csv(rows, path=None) -> str:
    rows = list(rows)
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (json.dumps(v) if isinstance(v, list) else v) for k, v in r.items()})
    text = buf.getvalue()
    if path is not None:
        atomic_write(path, text)
    return text


# ------------------------------------------------------------ cost model


@dataclass(frozen=True)
class CostEstimate:
    method: str
    stored_gradient_values: int
    backward_passes: int
    bytes: int


def estimate_cost(method: str, T: int, param_count: int, batch: int | None = None) -> CostEstimate:
    """Gradient storage and backward passes per step.

    Scalarization and loss-based methods keep one gradient and need one
    backward pass; gradient-based methods keep and compute one per task.
    """
    if method not in METHODS and method != "pbt":
        raise ValueError(f"unknown method {method!r}")
    k = T if method in GRADIENT_BASED else 1
    return CostEstimate(method, k * param_count, k, 8 * k * param_count)


@dataclass(frozen=True)
class Benchmark:
    splits: Splits
    capacity: Capacity
    config: TrainConfig


def asymmetric_benchmark(seed: int = 0, n_train: int = 600, n_eval: int = 2000, epochs: int = 20, scale_ratio: float = 2.2, learning_rate: float = 1e-3, schedule: str = "constant") -> Benchmark:
    """Two L1 regression tasks whose targets differ in scale by ``scale_ratio``.

    L1 gradients do not grow with target scale, so within a short training
    budget the larger-scale task needs more of the weight. With the shipped
    settings the seed-averaged best fixed weight on the first task is about
    0.26 (0.3 on an 11-point grid) and beats uniform weights by about 0.037
    in mean L1. Train, validation and test rows are independent draws of one
    distribution.
    """
    def draw(n, k):
        return gen_multitask(seed, 2, n, feature_dim=8, task_correlation=0.3, noise=0.1, scales=(1.0, scale_ratio), sample_seed=3 * seed + k)

    splits = Splits(draw(n_train, 11), draw(n_eval, 12), draw(n_eval, 13))
    capacity = Capacity(trunk_depth=1, base_width=16, head_depth=0)
    opt = OptimizerConfig(kind="adamw", learning_rate=learning_rate, schedule=schedule, total_epochs=epochs)
    return Benchmark(splits, capacity, TrainConfig(epochs=epochs, batch_size=32, optimizer=opt))


def default_train_config(**overrides) -> TrainConfig:
    opt = overrides.pop("optimizer", None) or OptimizerConfig(kind="adamw", learning_rate=1e-2, total_epochs=overrides.get("epochs", 10))
    return TrainConfig(optimizer=opt, **overrides)


__all__ = [
    "RunManifest",
    "Splits",
    "SweepResult",
    "CostEstimate",
    "make_splits",
    "Benchmark",
    "asymmetric_benchmark",
    "run_experiment",
    "run_sd_baselines",
    "sd_table",
    "sweep_weights",
    "summarize_sweep",
    "delta_report",
    "tradeoff_table",
    "estimate_cost",
    "weight_grid_2",
    "WeightSchedule",
    "SCALARIZATION",
]
