"""Population-based training over scalarization weights.

Generations are synchronous: every ``E_ready`` epochs all live members stop,
are ranked on a holdout split, the bottom ``ceil(Q N)`` copy the checkpoint
and weights of a random member of the top ``ceil(Q N)`` (exploit), and the
copied weights are perturbed (explore).  Workers only exchange state
through the checkpoint store, so sequential and threaded execution give the
same result for a given seed.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, CheckpointStore, atomic_write, restore_trainer, trainer_checkpoint
from .nn_core import Capacity, Model
from .training import (
    TrainConfig,
    Trainer,
    WeightSchedule,
    build_model_spec,
    mean_oriented_metric,
    source_metrics,
)
from .weighting import WeightVector, simplex_project

log = logging.getLogger(__name__)

INIT, EXPLOIT, EXPLORE = "init", "exploit-copy", "explore-perturb"


class PbtError(RuntimeError):
    pass


@dataclass(frozen=True)
class PbtConfig:
    N: int = 8
    E_ready: int = 2
    Q: float = 0.25
    E_total: int = 20
    perturb_factors: tuple = (0.8, 1.25)
    resample_probability: float = 0.25
    resample_range: tuple = (0.1, 1.0)
    holdout_fraction: float = 0.3
    seed: int = 0
    # Members share the initialization and per-phase batch-order seeds, so
    # holdout score gaps reflect the weights rather than sampling luck.
    shared_seeds: bool = True

    def __post_init__(self):
        object.__setattr__(self, "perturb_factors", tuple(self.perturb_factors))
        object.__setattr__(self, "resample_range", tuple(self.resample_range))
        lo, hi = self.perturb_factors
        if not 0 < self.Q <= 0.5:
            raise ValueError("Q must lie in (0, 0.5]")
        if self.N < 2 or 2 * self.n_replace > self.N:
            raise ValueError(f"population of {self.N} cannot hold disjoint top/bottom sets of {self.n_replace}")
        if not 1 <= self.E_ready <= self.E_total:
            raise ValueError("need 1 <= E_ready <= E_total")
        if not 0 < lo < 1 < hi:
            raise ValueError("perturb_factors must satisfy low < 1 < high")
        if not 0 <= self.resample_probability <= 1:
            raise ValueError("resample_probability must lie in [0, 1]")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in (0, 1)")

    @property
    def n_replace(self) -> int:
        return math.ceil(self.Q * self.N)

    @property
    def sync_epochs(self) -> list[int]:
        """Epochs at which a generation ends and exploit/explore runs."""
        return list(range(self.E_ready, self.E_total, self.E_ready))

    @property
    def n_syncs(self) -> int:
        """Synchronization barriers, counting the final ranking at E_total."""
        return len(self.sync_epochs) + 1

    @property
    def max_configurations(self) -> float:
        return self.N * (1 + self.Q * self.E_total / self.E_ready)


@dataclass
class HistoryEntry:
    epoch: int
    weights: tuple
    event: str
    source: int | None = None
    copied_weights: tuple | None = None

    def to_json(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class PopulationMember:
    member_id: int
    weights: WeightVector
    history: list = field(default_factory=list)
    score: float | None = None
    task_scores: list = field(default_factory=list)
    alive: bool = True
    error: str | None = None

    def to_json(self):
        return {
            "member_id": self.member_id,
            "weights": self.weights.tolist(),
            "score": self.score,
            "task_scores": self.task_scores,
            "alive": self.alive,
            "error": self.error,
            "history": [h.to_json() for h in self.history],
        }


# ------------------------------------------------------------ exploit/explore


def rank(population) -> list:
    """Live members best-first; ties go to the lower member id."""
    live = [m for m in population if m.alive and m.score is not None]
    return sorted(live, key=lambda m: (-m.score, m.member_id))


def exploit(population, Q: float, rng) -> list[tuple[int, int]]:
    """(loser, winner) pairs; winners are drawn with replacement from the top set."""
    ranked = rank(population)
    k = math.ceil(Q * len(ranked))
    if k == 0 or 2 * k > len(ranked):
        return []
    top, bottom = ranked[:k], ranked[-k:]
    pairs = []
    for loser in sorted(bottom, key=lambda m: m.member_id):
        winner = top[int(rng.integers(k))]
        pairs.append((loser.member_id, winner.member_id))
    return pairs


def perturb_weights(weights, factors, resampled=None) -> WeightVector:
    """Apply drawn multiplicative factors (or resampled values) and re-project.

    ``resampled`` holds a replacement value per coordinate or NaN to keep
    the multiplicative perturbation.
    """
    p = np.asarray(weights, dtype=np.float64) * np.asarray(factors, dtype=np.float64)
    if resampled is not None:
        r = np.asarray(resampled, dtype=np.float64)
        p = np.where(np.isnan(r), p, r)
    return simplex_project(p)


def explore(weights, rng, config: PbtConfig) -> WeightVector:
    T = len(weights)
    factors = np.empty(T)
    resampled = np.full(T, np.nan)
    for t in range(T):
        if rng.random() < config.resample_probability:
            resampled[t] = rng.uniform(*config.resample_range)
            factors[t] = 1.0
        else:
            factors[t] = config.perturb_factors[int(rng.integers(2))]
    return perturb_weights(weights, factors, resampled)


# ---------------------------------------------------------------- backtrack


class BrokenChainError(PbtError):
    pass


def backtrack_policy(best_id: int, histories: dict, E_total: int) -> WeightSchedule:
    """Weights actually in force for the best member's model, epoch by epoch.

    Walks the exploit-copy chain backwards: after an exploit at epoch ``e``
    from member ``A``, everything before ``e`` is ``A``'s policy.
    """
    segments = []
    current, end = best_id, E_total
    while end > 0:
        if current not in histories:
            raise BrokenChainError(f"history of member {current} is missing (needed before epoch {end})")
        earlier = [h for h in histories[current] if h.epoch < end]
        if not earlier:
            raise BrokenChainError(f"member {current} has no history entry before epoch {end}")
        h = earlier[-1]
        segments.append((h.epoch, end, WeightVector(h.weights)))
        end = h.epoch
        if h.event == EXPLOIT:
            if h.source is None:
                raise BrokenChainError(f"exploit of member {current} at epoch {h.epoch} names no source")
            current = h.source
        elif h.event == INIT:
            if h.epoch != 0:
                raise BrokenChainError(f"member {current} starts at epoch {h.epoch}, not 0")
    return WeightSchedule(tuple(reversed(segments)))


# --------------------------------------------------------------- population


@dataclass
class PbtResult:
    best: PopulationMember
    members: list
    schedule: WeightSchedule
    syncs: int  # barriers, including the final ranking
    explored_events: int
    distinct_configurations: int
    failures: list
    store: CheckpointStore
    generations: list = field(default_factory=list)
    exploit_rounds: int = 0

    def histories(self) -> dict:
        return {m.member_id: m.history for m in self.members}

    def to_json(self, config: PbtConfig | None = None) -> dict:
        out = {
            "best_member": self.best.member_id,
            "best_score": self.best.score,
            "syncs": self.syncs,
            "exploit_rounds": self.exploit_rounds,
            "explored_configurations": self.explored_events,
            "distinct_configurations": self.distinct_configurations,
            "failures": self.failures,
            "schedule": self.schedule.to_json(),
            "members": [m.to_json() for m in self.members],
            "generations": self.generations,
        }
        if config is not None:
            out["config"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in config.__dict__.items()}
            out["max_configurations"] = config.max_configurations
        return out

    def save(self, path, config=None):
        atomic_write(path, json.dumps(self.to_json(config), indent=2, sort_keys=True))


def _member_seed(seed, member_id, phase) -> int:
    return int(np.random.SeedSequence([seed, member_id, phase + 1]).generate_state(1)[0])


def run_pbt(
    config: PbtConfig,
    dataset,
    capacity: Capacity,
    train_config: TrainConfig,
    jobs: int = 1,
    store: CheckpointStore | None = None,
    fail_hook=None,
) -> PbtResult:
    """Search task weights with a synchronous PBT population.

    ``fail_hook(member_id, phase)`` is a test seam: raising from it marks the
    member dead.
    """
    train_ds, holdout_ds = dataset.split(config.holdout_fraction, config.seed)
    spec = build_model_spec(train_ds, capacity)
    store = store or CheckpointStore()
    rng = np.random.default_rng([config.seed, 5])
    members = []
    for i in range(config.N):
        w = simplex_project(rng.dirichlet(np.ones(dataset.T)))
        members.append(PopulationMember(i, w, [HistoryEntry(0, tuple(w.tolist()), INIT)]))

    bounds = [0, *config.sync_epochs, config.E_total]

    def train_phase(member: PopulationMember, phase: int, start: int, stop: int):
        if fail_hook is not None:
            fail_hook(member.member_id, phase)
        seed_id = 0 if config.shared_seeds else member.member_id
        model = Model(spec, seed=_member_seed(config.seed, seed_id, -1))
        trainer = Trainer(
            model,
            train_ds,
            train_config,
            weights=WeightSchedule.constant(member.weights, config.E_total),
            seed=_member_seed(config.seed, seed_id, phase),
            total_epochs=config.E_total,
        )
        if phase > 0:
            restore_trainer(trainer, Checkpoint.from_bytes(store.get(member.member_id)), restore_rng=False)
        if trainer.epoch != start:
            raise PbtError(f"member {member.member_id} resumed at epoch {trainer.epoch}, expected {start}")
        trainer.history = []
        for _ in range(stop - start):
            trainer.run_epoch()
        rows = source_metrics(trainer.model, holdout_ds)
        score = mean_oriented_metric(rows)
        ckpt = trainer_checkpoint(
            trainer, member_id=member.member_id, weights=member.weights.tolist(), scores=[r["value"] for r in rows], score=score
        )
        return ckpt.to_bytes(), score, rows

    failures = []
    generations = []
    explored = 0
    syncs = rounds = 0
    for phase, (start, stop) in enumerate(zip(bounds, bounds[1:])):
        live = [m for m in members if m.alive]

        def job(m, phase=phase, start=start, stop=stop):
            try:
                return train_phase(m, phase, start, stop)
            except Exception as exc:  # worker failure marks the member dead
                return exc

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(job, live))
        else:
            results = [job(m) for m in live]
        for m, res in zip(live, results):
            if isinstance(res, Exception):
                m.alive = False
                m.error = f"{type(res).__name__}: {res}"
                failures.append({"member_id": m.member_id, "phase": phase, "error": m.error})
                log.warning("PBT member %d failed in phase %d: %s", m.member_id, phase, m.error)
                continue
            blob, m.score, rows = res
            m.task_scores = [r["value"] for r in rows]
            store.put(m.member_id, blob)
        gen = {"epoch": stop, "scores": {m.member_id: m.score for m in members if m.alive}}
        syncs += 1
        if stop < config.E_total:
            rounds += 1
            pairs = exploit(members, config.Q, rng)
            snapshot = {m.member_id: m.weights for m in members}
            by_id = {m.member_id: m for m in members}
            for loser_id, winner_id in pairs:
                loser = by_id[loser_id]
                store.put(loser_id, _retag(store.get(winner_id), loser_id))
                copied = snapshot[winner_id]
                loser.weights = explore(copied, rng, config)
                loser.score = by_id[winner_id].score
                loser.history.append(HistoryEntry(stop, tuple(loser.weights.tolist()), EXPLOIT, winner_id, tuple(copied.tolist())))
                explored += 1
            gen["exploit"] = pairs
        generations.append(gen)

    ranked = rank(members)
    if not ranked:
        raise PbtError(f"every PBT member failed: {failures}")
    best = ranked[0]
    histories = {m.member_id: m.history for m in members}
    schedule = backtrack_policy(best.member_id, histories, config.E_total)
    distinct = len({h.weights for m in members for h in m.history})
    return PbtResult(best, members, schedule, syncs, config.N + explored, distinct, failures, store, generations, rounds)


def _retag(blob: bytes, member_id: int) -> bytes:
    """Copy of a checkpoint owned by another member; blobs are untouched."""
    ckpt = Checkpoint.from_bytes(blob)
    ckpt.metadata["member_id"] = member_id
    ckpt.metadata["copied_from"] = Checkpoint.from_bytes(blob).metadata.get("member_id")
    return ckpt.to_bytes()


def retrain_with_policy(
    schedule: WeightSchedule,
    dataset,
    capacity: Capacity,
    train_config: TrainConfig,
    seed: int = 0,
    epochs: int | None = None,
    eval_sets: dict | None = None,
    final_weights_only: bool = False,
) -> Trainer:
    """Scalarized training on the full dataset following ``schedule``.

    The schedule is stretched proportionally when ``epochs`` differs from its
    length.  ``final_weights_only`` keeps just the last weights for the whole
    run instead.
    """
    epochs = epochs or train_config.epochs
    if final_weights_only:
        schedule = WeightSchedule.constant(schedule.entries[-1][2], epochs)
    else:
        schedule = schedule.stretched(epochs)
    model = Model(build_model_spec(dataset, capacity), seed=seed)
    trainer = Trainer(model, dataset, train_config, weights=schedule, seed=seed, eval_sets=eval_sets, total_epochs=epochs)
    return trainer.run()
