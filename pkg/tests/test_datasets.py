import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scalweight.datasets import (
    CsvSchema,
    DatasetError,
    MultiSourceDataset,
    ResamplingSampler,
    SourceStreams,
    gen_multidomain,
    gen_multitask,
    load_csv,
    save_csv,
    standardize_targets,
)
from scalweight.nn_core import TaskSpec


def nearest_centroid(x_train, y_train, x, k):
    C = np.stack([x_train[y_train == c].mean(axis=0) for c in range(k)])
    return np.argmin(((x[:, None, :] - C[None]) ** 2).sum(-1), axis=1)


def regression_ds(values):
    y = np.asarray(values, dtype=np.float64)[:, None]
    X = np.arange(len(values), dtype=np.float64)[:, None]
    return MultiSourceDataset(
        mode="multi-task",
        source_names=("a", "b"),
        inputs=(X, X),
        labels=(y, 2 * y + 1),
        tasks=(TaskSpec("a", "l1", 1), TaskSpec("b", "l1", 1)),
    )


# ------------------------------------------------------------- generators


def test_generators_deterministic():
    a = gen_multidomain(3, 3, [50, 60, 70], domain_shift=1.0, class_skew=0.3)
    b = gen_multidomain(3, 3, [50, 60, 70], domain_shift=1.0, class_skew=0.3)
    assert a.equals(b)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.inputs, b.inputs))
    c = gen_multitask(3, 3, 100, task_correlation=0.2)
    d = gen_multitask(3, 3, 100, task_correlation=0.2)
    assert c.equals(d)


def test_zero_shift_generalizes_across_domains():
    ds = gen_multidomain(0, 2, 4000, domain_shift=0.0, class_skew=0.0)
    x0, y0 = ds.inputs[0], ds.labels[0]
    pred_in = nearest_centroid(x0[:2000], y0[:2000], x0[2000:], 4)
    pred_out = nearest_centroid(x0[:2000], y0[:2000], ds.inputs[1][:2000], 4)
    acc_in = (pred_in == y0[2000:]).mean()
    acc_out = (pred_out == ds.labels[1][:2000]).mean()
    assert abs(acc_in - acc_out) < 0.02


def test_large_shift_breaks_zero_shot_transfer():
    # shift of 10 noise standard deviations; averaged over distributions
    # because a single draw can map a class onto itself by chance
    accs = []
    for seed in range(5):
        ds = gen_multidomain(seed, 2, 2000, class_count=4, domain_shift=10.0)
        pred = nearest_centroid(ds.inputs[0], ds.labels[0], ds.inputs[1], 4)
        accs.append((pred == ds.labels[1]).mean())
    assert np.mean(accs) <= 0.25 + 0.10


def test_class_skew_rotates_majority_class():
    ds = gen_multidomain(1, 3, 3000, class_count=4, class_skew=0.5)
    for t in range(3):
        assert np.bincount(ds.labels[t], minlength=4).argmax() == t


@pytest.mark.parametrize("kwargs", [dict(T=1, n_per_source=10), dict(T=2, n_per_source=[10, 0]), dict(T=2, n_per_source=10, domain_shift=-1.0), dict(T=2, n_per_source=10, class_skew=1.0)])
def test_multidomain_rejects_bad_parameters(kwargs):
    with pytest.raises(DatasetError):
        gen_multidomain(0, **kwargs)


def test_correlation_gram_matches():
    ds = gen_multitask(5, 3, 20, feature_dim=6, task_correlation=-0.5)
    W = ds.generators
    expected = np.array([[1, -0.5, -0.5], [-0.5, 1, -0.5], [-0.5, -0.5, 1]])
    assert np.max(np.abs(W @ W.T - expected)) < 1e-9


def test_zero_correlation_orthogonal():
    W = gen_multitask(2, 2, 10, task_correlation=0.0).generators
    assert abs(W[0] @ W[1]) < 1e-12


def test_unit_correlation_identical_targets():
    ds = gen_multitask(4, 3, 200, task_correlation=1.0, noise=0.0)
    assert np.allclose(ds.labels[0], ds.labels[1], atol=1e-12)
    assert np.allclose(ds.labels[0], ds.labels[2], atol=1e-12)


def test_infeasible_correlation_rejected():
    with pytest.raises(DatasetError, match="PSD"):
        gen_multitask(0, 4, 10, task_correlation=-0.5)


# -------------------------------------------------------------------- CSV


def test_csv_four_rows_two_sources(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("source,f1,f2,task:y\nA,0,1,0\nB,1,0,1\nA,2,2,1\nB,3,1,0\n")
    ds = load_csv(path, CsvSchema("multi-domain", ("A", "B"), {"y": "cross_entropy"}))
    assert ds.T == 2
    assert ds.counts == (2, 2)
    assert ds.feature_dim == 2
    np.testing.assert_array_equal(ds.labels[0], [0, 1])


def test_csv_missing_source_named(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("source,f1,task:y\nA,0,0\nA,1,1\n")
    with pytest.raises(DatasetError, match="'B'"):
        load_csv(path, CsvSchema("multi-domain", ("A", "B"), {"y": "cross_entropy"}))


def test_csv_missing_values_report_rows(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("source,f1,task:y\nA,0,0\nA,,1\nB,1,\n")
    with pytest.raises(DatasetError, match=r"\[3, 4\]"):
        load_csv(path, CsvSchema("multi-domain", ("A", "B"), {"y": "cross_entropy"}))


def test_csv_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "nope.csv", CsvSchema("multi-domain", ("A",), {"y": "cross_entropy"}))


@pytest.mark.parametrize(
    "make",
    [
        lambda: gen_multidomain(7, 3, [5, 8, 6], domain_shift=0.5),
        lambda: gen_multitask(7, 3, 9, task_correlation=0.3),
        lambda: gen_multitask(7, 2, 9, target="binary"),
    ],
)
def test_csv_round_trip(tmp_path, make):
    ds = make()
    schema = save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv", schema)
    assert back.equals(ds)


# ------------------------------------------------------------ standardize


def test_standardize_small_example():
    ds = regression_ds([1.0, 2.0, 3.0])
    out, stats = standardize_targets(ds)
    assert stats.mean[0][0] == pytest.approx(2.0, abs=1e-15)
    assert stats.std[0][0] == pytest.approx(np.sqrt(2.0 / 3.0), abs=1e-15)
    for y in out.labels:
        assert abs(y.mean()) < 1e-9
        assert abs(y.std() - 1.0) < 1e-9


def test_standardize_applies_stored_stats_unchanged():
    train, stats = standardize_targets(regression_ds([1.0, 2.0, 3.0]))
    test, same = standardize_targets(regression_ds([5.0]), stats)
    assert same is stats
    assert test.labels[0][0, 0] == pytest.approx((5.0 - 2.0) / np.sqrt(2.0 / 3.0))


def test_standardize_identity_on_standardized():
    once, _ = standardize_targets(gen_multitask(1, 2, 500))
    twice, _ = standardize_targets(once)
    for a, b in zip(once.labels, twice.labels):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_standardize_constant_target_rejected():
    with pytest.raises(DatasetError, match="zero target variance"):
        standardize_targets(regression_ds([4.0, 4.0, 4.0]))


def test_standardize_rejects_classification():
    with pytest.raises(DatasetError):
        standardize_targets(gen_multidomain(0, 2, 10))


# --------------------------------------------------------------- sampling


def test_sampler_vertex_uses_one_source():
    ds = gen_multidomain(0, 2, 30)
    s = ResamplingSampler(ds, (1.0, 0.0), 64, seed=1)
    for _ in range(5):
        x, labels, src = s.next_batch()
        assert np.all(src == 0)
        assert len(labels[1]) == 0
        assert x.shape == (64, ds.feature_dim)


def test_sampler_source_fraction():
    ds = gen_multidomain(0, 2, 30)
    s = ResamplingSampler(ds, (0.3, 0.7), 10_000, seed=2)
    _, _, src = s.next_batch()
    assert abs(np.mean(src == 0) - 0.3) <= 0.015


def test_sampler_rows_come_from_declared_source():
    ds = gen_multidomain(0, 3, [4, 5, 6], domain_shift=2.0)
    x, labels, src = ResamplingSampler(ds, (0.2, 0.3, 0.5), 200, seed=0).next_batch()
    for t in range(3):
        rows = {r.tobytes() for r in ds.inputs[t]}
        assert all(r.tobytes() in rows for r in x[src == t])
        assert len(labels[t]) == int(np.sum(src == t))


def test_sampler_deterministic():
    ds = gen_multidomain(0, 2, 30)
    a = ResamplingSampler(ds, (0.4, 0.6), 16, seed=9)
    b = ResamplingSampler(ds, (0.4, 0.6), 16, seed=9)
    for _ in range(4):
        xa, _, sa = a.next_batch()
        xb, _, sb = b.next_batch()
        assert np.array_equal(xa, xb) and np.array_equal(sa, sb)


@pytest.mark.parametrize("p", [(0.5, 0.6), (-0.1, 1.1), (1.0,)])
def test_sampler_rejects_invalid_weights(p):
    with pytest.raises(ValueError):
        ResamplingSampler(gen_multidomain(0, 2, 5), p, 4)


def test_source_streams_independent_of_other_sources():
    ds = gen_multidomain(0, 3, [10, 20, 30])
    joint = SourceStreams(ds, 5)
    solo = SourceStreams(ds.select_sources([1]), 5)
    for _ in range(3):
        assert np.array_equal(joint.rows(8)[1], solo.rows(8)[0])


@given(a=st.floats(0.0, 1.0), batch=st.integers(1, 100))
def test_steps_per_epoch_independent_of_weights(a, batch):
    ds = gen_multidomain(0, 2, [37, 90])
    # the epoch length only depends on the reference source and batch size
    steps = ds.steps_per_epoch(batch)
    assert steps == -(-37 // batch)
    sub = ds.select_sources([1])
    assert sub.steps_per_epoch(batch) == steps
    ResamplingSampler(ds, (a, 1.0 - a), batch)  # any valid p is accepted
