import csv
import json
from collections import Counter

import numpy as np
import pytest
import yaml

import oracles

from scalweight.cli import DEFAULTS, ConfigError, load_config, main
from scalweight.experiment import RunManifest, summarize_sweep

BASE = {
    "dataset": {"generator": "multidomain", "params": {"seed": 0, "T": 2, "n_per_source": 150, "class_count": 3, "domain_shift": 1.0}},
    "model": {"trunk_depth": 1, "base_width": 8, "head_depth": 0},
    "training": {"epochs": 3, "batch_size": 16, "seeds": [0]},
    "sweep": {"grid_points": 3},
    "pbt": {"N": 4, "E_ready": 1, "E_total": 3},
}


@pytest.fixture
def run(tmp_path, monkeypatch):
    monkeypatch.setenv("SCALWEIGHT_OUT", str(tmp_path / "out"))

    def go(command, doc=None, *extra, name="cfg.yaml"):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(BASE if doc is None else doc))
        return main([command, str(path), *extra])

    go.out = tmp_path / "out"
    go.tmp = tmp_path
    return go


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_writes_one_row_per_epoch_per_task(run):
    assert run("train") == 0
    rows = read_csv(run.out / "train" / "metrics.csv")
    assert list(rows[0]) == ["run_id", "epoch", "task", "split", "metric_name", "value"]
    counts = Counter((r["split"], r["metric_name"], r["epoch"], r["task"]) for r in rows)
    assert set(counts.values()) == {1}
    test_acc = [r for r in rows if r["split"] == "test" and r["metric_name"] == "top1_accuracy"]
    assert len(test_acc) == 3 * 2
    (run_dir,) = [p for p in (run.out / "train").iterdir() if p.is_dir()]
    assert (run_dir / "manifest.json").exists()


def test_train_pcgrad_records_T_backward_passes(run):
    assert run("train", None, "--set", "method.name=pcgrad") == 0
    (m,) = [RunManifest.load(p) for p in (run.out / "train").iterdir() if p.is_dir()]
    assert m.memory["backward_passes_per_step"] == 2


def test_train_is_deterministic(run):
    assert run("train", None, "--seed", "4") == 0
    first = (run.out / "train" / "metrics.csv").read_text()
    assert run("train", None, "--seed", "4") == 0
    assert (run.out / "train" / "metrics.csv").read_text() == first


def test_sweep_layout_and_summary(run):
    doc = dict(BASE, training=dict(BASE["training"], seeds=[0, 1]))
    assert run("sweep", doc) == 0
    sweep = run.out / "sweep"
    dirs = [p for p in sweep.iterdir() if p.is_dir()]
    assert len(dirs) == 6
    summary = json.loads((sweep / "summary.json").read_text())
    again = summarize_sweep([RunManifest.load(p) for p in dirs])
    assert summary["best_weights"] == again.best_weights
    assert len(read_csv(sweep / "summary.csv")) == 3


def test_sweep_include_vertices(run):
    doc = dict(BASE, sweep={"grid": [[0.5, 0.5]]})
    assert run("sweep", doc, "--include-vertices") == 0
    dirs = [p for p in (run.out / "sweep").iterdir() if p.is_dir()]
    weights = sorted(RunManifest.load(p).weights for p in dirs)
    assert weights == [[0.0, 1.0], [0.5, 0.5], [1.0, 0.0]]


def test_pbt_policy_replay_and_rank_split(run):
    assert run("pbt", None, "--rank-split", "0.3") == 0
    pbt = run.out / "pbt"
    policy = json.loads((pbt / "policy.json").read_text())
    assert policy[0]["start"] == 0 and policy[-1]["end"] == 3
    search = json.loads((pbt / "search.json").read_text())
    assert search["config"]["holdout_fraction"] == 0.3
    assert search["explored_configurations"] <= search["max_configurations"]
    assert run("pbt", None, "--replay", str(pbt / "policy.json")) == 0
    a = read_csv(pbt / "retrain" / "metrics.csv")
    b = read_csv(pbt / "replay" / "metrics.csv")
    assert [r["value"] for r in a] == [r["value"] for r in b]


def test_pbt_records_schedule_stretch(run):
    assert run("pbt", None, "--set", "pbt.retrain_epochs=6") == 0
    (m,) = [RunManifest.load(p) for p in (run.out / "pbt" / "retrain").iterdir() if p.is_dir()]
    assert m.notes["search_epochs"] == 3 and m.notes["schedule_stretched_to"] == 6
    assert m.schedule[-1]["end"] == 6


def test_profile_conflicts(run):
    assert run("profile", None, "--what", "conflicts") == 0
    rows = read_csv(run.out / "profile" / "conflicts-seed0.csv")
    assert len(rows) == 3
    assert all(0.0 <= float(r["fraction"]) <= 1.0 for r in rows)
    assert "conflict_0_1" in rows[0]


def test_profile_memory_six_methods(run):
    assert run("profile", None, "--what", "memory") == 0
    rows = read_csv(run.out / "profile" / "memory.csv")
    assert len(rows) == 6
    by = {r["method"]: r for r in rows}
    assert float(by["pcgrad"]["storage_ratio"]) == 2.0 and by["pcgrad"]["backward_passes"] == "2"
    assert float(by["scalarization"]["storage_ratio"]) == 1.0


def test_profile_variance_grid(run):
    doc = dict(BASE, profile={"grid": {"training.optimizer.learning_rate": [0.001, 0.01, 0.1], "model.base_width": [4, 8]}})
    doc["training"] = dict(BASE["training"], epochs=2)
    assert run("profile", doc, "--what", "variance") == 0
    cells = read_csv(run.out / "profile" / "variance-cells.csv")
    assert len(cells) == 6
    result = read_csv(run.out / "profile" / "variance.csv")
    assert sorted(r["axis"] for r in result) == ["model.base_width", "training.optimizer.learning_rate"]
    # recompute from the per-cell means: population variance across the
    # learning rates for each width, then the median over widths
    by_width = {}
    for c in cells:
        by_width.setdefault(c["model.base_width"], []).append(float(c["mean_fraction"]))
    expected = float(np.median([oracles.population_variance(v) for v in by_width.values()]))
    got = {r["axis"]: float(r["median_variance"]) for r in result}
    assert got["training.optimizer.learning_rate"] == pytest.approx(expected, abs=1e-12)


def test_report_and_export(run):
    assert run("sweep", dict(BASE, sweep={"grid_points": 3, "sd_baselines": True})) == 0
    assert run("report") == 0
    assert (run.out / "report" / "delta.csv").exists()
    assert len(read_csv(run.out / "report" / "tradeoff.csv")) == 3
    assert run("export") == 0
    rows = read_csv(run.out / "export" / "metrics.csv")
    assert len({r["run_id"] for r in rows}) == 3 + 2
    assert run("export", None, "--to", str(run.tmp / "elsewhere.csv")) == 1


def test_datagen_round_trip(run):
    assert run("datagen") == 0
    schema = json.loads((run.out / "data" / "schema.json").read_text())
    doc = dict(BASE)
    doc["dataset"] = {
        "generator": "csv",
        "csv": {"path": str(run.out / "data" / "train.csv"), "mode": schema["mode"], "sources": schema["sources"], "tasks": schema["tasks"], "class_count": 3},
    }
    doc["training"] = dict(BASE["training"], epochs=1)
    assert run("train", doc, name="csv.yaml") == 0


# ---------------------------------------------------------------- errors


def test_unknown_key_reports_dotted_path(run, capsys):
    doc = dict(BASE, model=dict(BASE["model"], depth=3))
    assert run("train", doc) == 1
    assert "model.depth: unknown key" in capsys.readouterr().err


@pytest.mark.parametrize("override", ["training.epochs=0", "method.name=mgda", "method.weights=[0.7,0.7]", "training.optimizer.learning_rate=-1"])
def test_invalid_values_exit_1(run, override):
    assert run("train", None, "--set", override) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_2(run, capsys):
    assert run("train", None, "--set", "training.optimizer.learning_rate=1e30", "--set", "training.optimizer.kind=sgd-momentum") == 2
    assert "diverged" in capsys.readouterr().err


def test_io_error_exits_3(run, tmp_path):
    doc = dict(BASE)
    doc["dataset"] = {"generator": "csv", "csv": {"path": str(tmp_path / "missing.csv"), "sources": ["a"], "tasks": {"y": "l1"}}}
    assert run("train", doc) == 3


def test_missing_config_is_a_config_error(tmp_path):
    assert main(["train", str(tmp_path / "nope.yaml")]) == 1


def test_defaults_round_trip(tmp_path):
    path = tmp_path / "d.json"
    path.write_text(json.dumps(DEFAULTS))
    assert load_config(path) == DEFAULTS
    with pytest.raises(ConfigError):
        load_config(path, ["training.seeds=[]"])
