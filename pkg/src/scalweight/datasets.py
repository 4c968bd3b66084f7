"""Multi-source datasets, synthetic generators, CSV I/O and resampling.

Two layouts are supported:

* multi-domain: ``T`` sources with their own inputs, one shared label space
  and a single output head;
* multi-task: one shared input set, every row labelled for each of ``T``
  tasks, one head per task.

Epochs are counted against a reference source: ``steps_per_epoch`` is
``ceil(n_ref / batch_size)`` regardless of the task weights.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write
from .nn_core import TaskSpec

MULTI_DOMAIN = "multi-domain"
MULTI_TASK = "multi-task"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MultiSourceDataset:
    mode: str
    source_names: tuple[str, ...]
    inputs: tuple[np.ndarray, ...]  # per source; the same array for every task in multi-task mode
    labels: tuple[np.ndarray, ...]  # per source
    tasks: tuple[TaskSpec, ...]  # one entry (multi-domain) or one per source (multi-task)
    reference_source: int = 0
    # Keys identifying each source independently of its position; used to
    # derive per-source RNG streams so sub-datasets sample identically.
    source_keys: tuple[int, ...] | None = None
    reference_count: int | None = None

    def __post_init__(self):
        T = len(self.source_names)
        if self.mode not in (MULTI_DOMAIN, MULTI_TASK):
            raise DatasetError(f"unknown mode {self.mode!r}")
        if T < 1 or len(self.inputs) != T or len(self.labels) != T:
            raise DatasetError("need matching inputs/labels for every source")
        object.__setattr__(self, "inputs", tuple(np.asarray(x, dtype=np.float64) for x in self.inputs))
        object.__setattr__(self, "labels", tuple(np.asarray(y) for y in self.labels))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "source_names", tuple(self.source_names))
        if self.source_keys is None:
            object.__setattr__(self, "source_keys", tuple(range(T)))
        dims = {x.shape[1] for x in self.inputs}
        if len(dims) != 1:
            raise DatasetError("feature dims differ across sources")
        for name, x, y in zip(self.source_names, self.inputs, self.labels):
            if x.shape[0] == 0:
                raise DatasetError(f"source {name!r} is empty")
            if y.shape[0] != x.shape[0]:
                raise DatasetError(f"source {name!r}: {x.shape[0]} inputs but {y.shape[0]} labels")
        if self.mode == MULTI_DOMAIN and len(self.tasks) != 1:
            raise DatasetError("multi-domain datasets have exactly one shared task")
        if self.mode == MULTI_TASK:
            if len(self.tasks) != T:
                raise DatasetError("multi-task datasets need one task spec per source")
            if any(not np.array_equal(x, self.inputs[0]) for x in self.inputs[1:]):
                raise DatasetError("multi-task sources must share one input set")
        if not 0 <= self.reference_source < T:
            raise DatasetError("reference_source out of range")
        if self.reference_count is None:
            object.__setattr__(self, "reference_count", int(self.inputs[self.reference_source].shape[0]))

    @property
    def T(self) -> int:
        return len(self.source_names)

    @property
    def feature_dim(self) -> int:
        return self.inputs[0].shape[1]

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(x.shape[0] for x in self.inputs)

    def head_of(self, source: int) -> int:
        return 0 if self.mode == MULTI_DOMAIN else source

    def task_of(self, source: int) -> TaskSpec:
        return self.tasks[self.head_of(source)]

    def steps_per_epoch(self, batch_size: int) -> int:
        return math.ceil(self.reference_count / batch_size)

    def select_sources(self, sources) -> "MultiSourceDataset":
        """Sub-dataset keeping the given sources (keys and epoch length preserved)."""
        sources = list(sources)
        tasks = self.tasks if self.mode == MULTI_DOMAIN else tuple(self.tasks[s] for s in sources)
        return MultiSourceDataset(
            mode=self.mode,
            source_names=tuple(self.source_names[s] for s in sources),
            inputs=tuple(self.inputs[s] for s in sources),
            labels=tuple(self.labels[s] for s in sources),
            tasks=tasks,
            reference_source=0,
            source_keys=tuple(self.source_keys[s] for s in sources),
            reference_count=self.reference_count,
        )

    def take(self, rows_per_source, keep_reference_count=False) -> "MultiSourceDataset":
        """Row subset per source (multi-task sources must use identical rows)."""
        inputs = tuple(x[r] for x, r in zip(self.inputs, rows_per_source))
        if self.mode == MULTI_TASK:
            inputs = (inputs[0],) * self.T
        return replace(
            self,
            inputs=inputs,
            labels=tuple(y[r] for y, r in zip(self.labels, rows_per_source)),
            reference_count=self.reference_count if keep_reference_count else None,
        )

    def split(self, fraction: float, seed: int) -> tuple["MultiSourceDataset", "MultiSourceDataset"]:
        """Random per-source split; the first part holds ``1 - fraction`` of rows."""
        if not 0 < fraction < 1:
            raise DatasetError("split fraction must lie in (0, 1)")
        rng = np.random.default_rng([seed, 7919])
        if self.mode == MULTI_TASK:
            perm = rng.permutation(self.counts[0])
            n_second = max(1, int(round(fraction * len(perm))))
            first, second = [perm[n_second:]] * self.T, [perm[:n_second]] * self.T
        else:
            first, second = [], []
            for n in self.counts:
                perm = rng.permutation(n)
                n_second = max(1, int(round(fraction * n)))
                first.append(perm[n_second:])
                second.append(perm[:n_second])
        return self.take(first), self.take(second)

    def equals(self, other: "MultiSourceDataset") -> bool:
        return (
            self.mode == other.mode
            and self.source_names == other.source_names
            and self.tasks == other.tasks
            and all(np.array_equal(a, b) for a, b in zip(self.inputs, other.inputs))
            and all(np.array_equal(a, b) for a, b in zip(self.labels, other.labels))
        )


# ------------------------------------------------------------ generators


def gen_multidomain(
    seed: int,
    T: int,
    n_per_source,
    class_count: int = 4,
    domain_shift: float = 0.0,
    class_skew: float = 0.0,
    feature_dim: int = 8,
    class_sep: float = 3.0,
    noise: float = 1.0,
    sample_seed: int | None = None,
    reference_source: int = 0,
    label_noise=0.0,
) -> MultiSourceDataset:
    """Gaussian-mixture classes shared across domains.

    Every domain translates each class prototype by its own random offset of
    norm ``domain_shift`` and skews its class frequencies geometrically by
    ``class_skew`` (the most frequent class rotates with the domain index).
    ``seed`` fixes the distribution; ``sample_seed`` (default ``seed``) fixes
    the drawn rows, so independent splits of one distribution can be made.
    ``noise`` (scalar or per source) is the feature noise scale and
    ``label_noise`` (scalar or per source) the probability that a row's
    label is replaced by a uniformly drawn class.
    """
    n_per_source = list(n_per_source) if np.ndim(n_per_source) else [int(n_per_source)] * T
    if T < 2 or len(n_per_source) != T or min(n_per_source) <= 0:
        raise DatasetError("need T >= 2 and a positive sample count per source")
    if domain_shift < 0 or not 0 <= class_skew < 1 or class_count < 2:
        raise DatasetError("invalid domain_shift / class_skew / class_count")
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(class_count, feature_dim))
    protos *= class_sep / np.linalg.norm(protos, axis=1, keepdims=True)
    offsets = rng.normal(size=(T, class_count, feature_dim))
    offsets *= domain_shift / np.linalg.norm(offsets, axis=2, keepdims=True)
    srng = rng if sample_seed is None else np.random.default_rng([sample_seed, 1])
    flip = np.broadcast_to(np.asarray(label_noise, dtype=np.float64), (T,))
    if np.any(flip < 0) or np.any(flip > 1):
        raise DatasetError("label_noise must lie in [0, 1]")
    sigma = np.broadcast_to(np.asarray(noise, dtype=np.float64), (T,))
    if np.any(sigma < 0):
        raise DatasetError("noise must be non-negative")
    inputs, labels = [], []
    for t, n in enumerate(n_per_source):
        freq = (1.0 - class_skew) ** ((np.arange(class_count) - t) % class_count)
        y = srng.choice(class_count, size=n, p=freq / freq.sum())
        x = protos[y] + offsets[t, y] + sigma[t] * srng.normal(size=(n, feature_dim))
        if flip[t] > 0:
            hit = srng.random(n) < flip[t]
            y = np.where(hit, srng.integers(class_count, size=n), y)
        inputs.append(x)
        labels.append(y.astype(np.int64))
    return MultiSourceDataset(
        mode=MULTI_DOMAIN,
        source_names=tuple(f"domain{t}" for t in range(T)),
        inputs=tuple(inputs),
        labels=tuple(labels),
        tasks=(TaskSpec("label", "cross_entropy", class_count),),
        reference_source=reference_source,
    )


def correlated_unit_vectors(gram, dim: int, rng) -> np.ndarray:
    """Rows are unit vectors in R^dim whose Gram matrix equals ``gram``."""
    gram = np.asarray(gram, dtype=np.float64)
    T = gram.shape[0]
    evals, evecs = np.linalg.eigh(gram)
    if evals.min() < -1e-10:
        raise DatasetError(f"task correlation matrix is not PSD (min eigenvalue {evals.min():.3g})")
    if dim < T:
        raise DatasetError("feature_dim must be at least T")
    coords = evecs * np.sqrt(np.clip(evals, 0.0, None))  # T x T, coords @ coords.T == gram
    basis, _ = np.linalg.qr(rng.normal(size=(dim, T)))
    return coords @ basis.T


def correlation_matrix(T: int, task_correlation) -> np.ndarray:
    if np.ndim(task_correlation) == 0:
        rho = float(task_correlation)
        if not -1 <= rho <= 1:
            raise DatasetError("task_correlation must lie in [-1, 1]")
        return (1 - rho) * np.eye(T) + rho * np.ones((T, T))
    gram = np.asarray(task_correlation, dtype=np.float64)
    if gram.shape != (T, T) or not np.allclose(gram, gram.T) or not np.allclose(np.diag(gram), 1):
        raise DatasetError("correlation matrix must be symmetric with unit diagonal")
    return gram


def gen_multitask(
    seed: int,
    T: int,
    n: int,
    feature_dim: int = 8,
    task_correlation=0.0,
    noise: float = 0.1,
    target: str = "regression",
    scales=None,
    sample_seed: int | None = None,
) -> MultiSourceDataset:
    """Shared inputs, per-task linear (or logistic) targets.

    The generating vectors are unit vectors whose pairwise cosines equal
    ``task_correlation`` (a scalar or a full T x T matrix).  ``sample_seed``
    (default ``seed``) fixes the drawn rows independently of the generators.
    """
    if T < 2 or n <= 0:
        raise DatasetError("need T >= 2 and n > 0")
    rng = np.random.default_rng(seed)
    gram = correlation_matrix(T, task_correlation)
    W = correlated_unit_vectors(gram, feature_dim, rng)
    if sample_seed is not None:
        rng = np.random.default_rng([sample_seed, 1])
    X = rng.normal(size=(n, feature_dim))
    scales = np.ones(T) if scales is None else np.asarray(scales, dtype=np.float64)
    labels = []
    for t in range(T):
        signal = scales[t] * (X @ W[t]) + noise * rng.normal(size=n)
        if target == "regression":
            labels.append(signal[:, None])
        elif target == "binary":
            labels.append((signal > 0).astype(np.float64)[:, None])
        else:
            raise DatasetError(f"unknown target kind {target!r}")
    loss = "l1" if target == "regression" else "bce"
    ds = MultiSourceDataset(
        mode=MULTI_TASK,
        source_names=tuple(f"task{t}" for t in range(T)),
        inputs=(X,) * T,
        labels=tuple(labels),
        tasks=tuple(TaskSpec(f"task{t}", loss, 1) for t in range(T)),
    )
    object.__setattr__(ds, "generators", W)
    return ds


# ---------------------------------------------------------------- targets


@dataclass(frozen=True)
class TargetStats:
    mean: tuple
    std: tuple


def standardize_targets(dataset: MultiSourceDataset, stats: TargetStats | None = None):
    """Zero-mean / unit-variance regression targets (population std).

    Statistics are computed on ``dataset`` unless ``stats`` is given, in which
    case they are applied unchanged (use this for evaluation splits).
    """
    heads = sorted({dataset.head_of(s) for s in range(dataset.T)})
    for h in heads:
        if dataset.tasks[h].loss != "l1":
            raise DatasetError(f"task {dataset.tasks[h].name!r} is not a regression task")
    if stats is None:
        means, stds = [], []
        for h in heads:
            y = np.concatenate([dataset.labels[s] for s in range(dataset.T) if dataset.head_of(s) == h])
            mu, sd = y.mean(axis=0), y.std(axis=0)
            if np.any(sd == 0):
                raise DatasetError(f"task {dataset.tasks[h].name!r} has zero target variance")
            means.append(mu)
            stds.append(sd)
        stats = TargetStats(tuple(means), tuple(stds))
    labels = tuple(
        (dataset.labels[s] - stats.mean[dataset.head_of(s)]) / stats.std[dataset.head_of(s)]
        for s in range(dataset.T)
    )
    return replace(dataset, labels=labels), stats


# ---------------------------------------------------------------- sampling


def validate_weights(p, T) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (T,) or np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError(f"weights {p} are not a point of the {T}-simplex")
    return p


class ResamplingSampler:
    """Mixed batches: each row picks source t with probability p_t, then a
    uniform row of that source (with replacement)."""

    def __init__(self, dataset: MultiSourceDataset, weights, batch_size: int, seed: int = 0):
        self.dataset = dataset
        self.weights = validate_weights(weights, dataset.T)
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 104729])

    def next_batch(self):
        """Returns ``(inputs, labels, source_ids)``.

        ``labels`` is a list indexed by source holding the labels of the rows
        with that source id, in row order.
        """
        ds = self.dataset
        src = self.rng.choice(ds.T, size=self.batch_size, p=self.weights)
        rows = np.empty(self.batch_size, dtype=np.int64)
        for t in range(ds.T):
            mask = src == t
            rows[mask] = self.rng.integers(ds.counts[t], size=int(mask.sum()))
        inputs = np.empty((self.batch_size, ds.feature_dim))
        labels = []
        for t in range(ds.T):
            mask = src == t
            inputs[mask] = ds.inputs[t][rows[mask]]
            labels.append(ds.labels[t][rows[mask]])
        return inputs, labels, src


def next_batch(sampler: ResamplingSampler):
    return sampler.next_batch()


class SourceStreams:
    """Independent uniform-with-replacement row streams per source.

    Multi-domain sources each own a stream keyed by their source key, so a
    sub-dataset sees exactly the rows the joint run would.  Multi-task
    sources share one stream (one input batch labelled for every task).
    """

    def __init__(self, dataset: MultiSourceDataset, seed: int):
        self.dataset = dataset
        if dataset.mode == MULTI_TASK:
            self._rngs = [np.random.default_rng([seed, 15485863])]
        else:
            self._rngs = [np.random.default_rng([seed, 31, k]) for k in dataset.source_keys]

    def rows(self, batch_size: int) -> list[np.ndarray]:
        ds = self.dataset
        if ds.mode == MULTI_TASK:
            r = self._rngs[0].integers(ds.counts[0], size=batch_size)
            return [r] * ds.T
        return [rng.integers(n, size=batch_size) for rng, n in zip(self._rngs, ds.counts)]

    def get_state(self):
        return [rng.bit_generator.state for rng in self._rngs]

    def set_state(self, states):
        for rng, st in zip(self._rngs, states):
            rng.bit_generator.state = st


# --------------------------------------------------------------------- CSV


@dataclass(frozen=True)
class CsvSchema:
    """Declares how a CSV maps onto a :class:`MultiSourceDataset`.

    ``tasks`` maps task name -> loss kind.  Label columns are ``task:<name>``
    or ``task:<name>:<attribute>`` for grouped attributes / multi-output
    regression.  Remaining columns other than the source column are features.
    """

    mode: str
    sources: tuple[str, ...]
    tasks: dict = field(default_factory=dict)
    source_column: str = "source"
    class_count: int | None = None
    reference_source: int = 0


def load_csv(path, schema: CsvSchema) -> MultiSourceDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file (header row required)") from None
        rows = list(reader)
    if schema.source_column not in header:
        raise DatasetError(f"{path}: missing source column {schema.source_column!r}")
    src_col = header.index(schema.source_column)
    label_cols: dict[str, list[int]] = {}
    feat_cols = []
    for i, name in enumerate(header):
        if i == src_col:
            continue
        if name.startswith("task:"):
            task = name.split(":")[1]
            label_cols.setdefault(task, []).append(i)
        else:
            feat_cols.append(i)
    if set(label_cols) != set(schema.tasks):
        raise DatasetError(f"{path}: label columns {sorted(label_cols)} do not match schema tasks {sorted(schema.tasks)}")
    if not feat_cols:
        raise DatasetError(f"{path}: no feature columns")

    bad = []
    parsed_src, parsed_x, parsed_y = [], [], {t: [] for t in label_cols}
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        if any(cell.strip() == "" for cell in row):
            bad.append(lineno)
            continue
        try:
            parsed_x.append([float(row[i]) for i in feat_cols])
            for t, cols in label_cols.items():
                parsed_y[t].append([float(row[i]) for i in cols])
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        parsed_src.append(row[src_col])
    if bad:
        raise DatasetError(f"{path}: rows with missing values: {bad}")
    unknown = sorted(set(parsed_src) - set(schema.sources))
    if unknown:
        raise DatasetError(f"{path}: sources {unknown} not declared in schema")

    X = np.asarray(parsed_x, dtype=np.float64).reshape(len(parsed_x), len(feat_cols))
    src = np.asarray(parsed_src, dtype=object)

    def task_spec(name, n_cols, values):
        kind = schema.tasks[name]
        if kind == "cross_entropy":
            if n_cols != 1:
                raise DatasetError(f"task {name!r}: classification takes one label column")
            classes = schema.class_count or int(values.max()) + 1
            return TaskSpec(name, kind, classes)
        return TaskSpec(name, kind, n_cols)

    def label_array(name, values):
        if schema.tasks[name] == "cross_entropy":
            if np.any(values != np.round(values)) or np.any(values < 0):
                raise DatasetError(f"task {name!r}: class labels must be non-negative integers")
            return values[:, 0].astype(np.int64)
        return values

    if schema.mode == MULTI_DOMAIN:
        if len(label_cols) != 1:
            raise DatasetError("multi-domain CSVs have exactly one task")
        (task,) = label_cols
        Y = np.asarray(parsed_y[task], dtype=np.float64)
        inputs, labels = [], []
        for name in schema.sources:
            mask = src == name
            if not mask.any():
                raise DatasetError(f"{path}: source {name!r} declared in schema but has no rows")
            inputs.append(X[mask])
            labels.append(label_array(task, Y[mask]))
        tasks = (task_spec(task, len(label_cols[task]), Y),)
        names = tuple(schema.sources)
    elif schema.mode == MULTI_TASK:
        for name in schema.sources:
            if not (src == name).any():
                raise DatasetError(f"{path}: source {name!r} declared in schema but has no rows")
        order = list(schema.tasks)
        inputs = [X] * len(order)
        labels, tasks = [], []
        for t in order:
            Y = np.asarray(parsed_y[t], dtype=np.float64)
            labels.append(label_array(t, Y))
            tasks.append(task_spec(t, len(label_cols[t]), Y))
        names = tuple(order)
    else:
        raise DatasetError(f"unknown mode {schema.mode!r}")
    return MultiSourceDataset(
        mode=schema.mode,
        source_names=names,
        inputs=tuple(inputs),
        labels=tuple(labels),
        tasks=tuple(tasks),
        reference_source=schema.reference_source,
    )


def schema_for(dataset: MultiSourceDataset) -> CsvSchema:
    if dataset.mode == MULTI_DOMAIN:
        task = dataset.tasks[0]
        return CsvSchema(
            MULTI_DOMAIN,
            dataset.source_names,
            {task.name: task.loss},
            class_count=task.out_dim if task.loss == "cross_entropy" else None,
            reference_source=dataset.reference_source,
        )
    return CsvSchema(
        MULTI_TASK, ("all",), {t.name: t.loss for t in dataset.tasks}, reference_source=dataset.reference_source
    )


def _label_columns(task: TaskSpec, values) -> tuple[list[str], np.ndarray]:
    values = np.asarray(values)
    if task.loss == "cross_entropy":
        return [f"task:{task.name}"], values.reshape(-1, 1)
    values = values.reshape(values.shape[0], -1)
    if values.shape[1] == 1:
        return [f"task:{task.name}"], values
    return [f"task:{task.name}:{i}" for i in range(values.shape[1])], values


def save_csv(dataset: MultiSourceDataset, path) -> CsvSchema:
    """Write ``dataset`` in the CSV layout read by :func:`load_csv`."""
    path = Path(path)
    feats = [f"x{i}" for i in range(dataset.feature_dim)]

    def fmt(v):
        return repr(float(v)) if not isinstance(v, (np.integer, int)) else str(int(v))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if dataset.mode == MULTI_DOMAIN:
        cols, _ = _label_columns(dataset.tasks[0], dataset.labels[0])
        w.writerow(["source", *feats, *cols])
        for name, x, y in zip(dataset.source_names, dataset.inputs, dataset.labels):
            _, yv = _label_columns(dataset.tasks[0], y)
            for xr, yr in zip(x, yv):
                w.writerow([name, *map(fmt, xr), *map(fmt, yr)])
    else:
        header, blocks = ["source", *feats], []
        for task, y in zip(dataset.tasks, dataset.labels):
            cols, yv = _label_columns(task, y)
            header += cols
            blocks.append(yv)
        w.writerow(header)
        for i, xr in enumerate(dataset.inputs[0]):
            w.writerow(["all", *map(fmt, xr), *(fmt(v) for b in blocks for v in b[i])])
    atomic_write(path, buf.getvalue())
    return schema_for(dataset)
