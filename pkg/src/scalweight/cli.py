"""Command-line entry point.

``scalweight <command> CONFIG [options]``.  CONFIG is a YAML or JSON document
with the sections below; every key has a default, unknown keys are rejected
with their dotted path, and ``--set section.key=value`` overrides single
values (the value is parsed as YAML, so ``--set training.seeds=[0,1]``
works).

Exit codes: 0 success, 1 config error, 2 training divergence, 3 I/O error.
Everything is written under the output directory (``output.directory`` or
the ``SCALWEIGHT_OUT`` environment variable), atomically.
"""
from __future__ import annotations

import argparse
import copy
import itertools
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import CheckpointStore, atomic_write
from .conflict_profiler import affinity_row_medians, variance_analysis
from .datasets import (
    MULTI_DOMAIN,
    CsvSchema,
    DatasetError,
    gen_multidomain,
    gen_multitask,
    load_csv,
    save_csv,
    standardize_targets,
)
from .experiment import (
    RunManifest,
    Splits,
    asymmetric_benchmark,
    capacity_key,
    delta_report,
    estimate_cost,
    make_splits,
    metrics_csv,
    rows_to_csv,
    run_experiment,
    run_sd_baselines,
    sd_table,
    summarize_sweep,
    sweep_runs,
    tradeoff_table,
    weight_grid_2,
)
from .grad_mto import CagradConfig
from .nn_core import Capacity, DivergenceError, OptimizerConfig, param_count
from .pbt import PbtConfig, run_pbt, retrain_with_policy
from .training import METHODS, TrainConfig, WeightSchedule, build_model_spec
from .weighting import WeightVector

log = logging.getLogger("scalweight")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3

# Free-form mappings: their keys are checked by the code that consumes them.
_OPEN = {"dataset.params", "dataset.csv.tasks", "profile.grid"}

DEFAULTS = {
    "dataset": {
        # multidomain | multitask | asymmetric | csv
        "generator": "multidomain",
        "params": {},
        "csv": {
            "path": None,
            "mode": MULTI_DOMAIN,
            "sources": [],
            "tasks": {},
            "source_column": "source",
            "class_count": None,
            "reference_source": 0,
        },
        "val_fraction": 0.2,
        "test_fraction": 0.2,
        "split_seed": 0,
        "standardize": False,
    },
    "model": {"trunk_depth": 2, "base_width": 32, "width_multiplier": 1.0, "head_depth": 1, "shared_head_layers": 0},
    "training": {
        "epochs": 10,
        "batch_size": 32,
        "mode": "reweigh",
        "seeds": [0],
        "profile_stride": 0,
        "optimizer": {
            "kind": "adamw",
            "learning_rate": 1e-2,
            "momentum": 0.9,
            "betas": [0.9, 0.999],
            "eps": 1e-8,
            "weight_decay": 0.0,
            "warmup_epochs": 0,
            "schedule": "constant",
        },
    },
    "method": {
        "name": "scalarization",
        "weights": None,  # null means uniform
        "s_learning_rate": 0.025,
        "cagrad": {"c": 0.4, "inner_iters": 25, "inner_lr": 0.05},
    },
    "sweep": {"grid_points": 11, "grid": None, "include_vertices": False, "sd_baselines": False},
    "pbt": {
        "N": 8,
        "E_ready": 2,
        "Q": 0.25,
        "E_total": 20,
        "perturb_factors": [0.8, 1.25],
        "resample_probability": 0.25,
        "resample_range": [0.1, 1.0],
        "holdout_fraction": 0.3,
        "shared_seeds": True,
        "retrain_epochs": None,
        "final_weights_only": False,
        "save_checkpoints": False,
    },
    "profile": {"methods": list(METHODS), "batch_size": None, "grid": {}},
    "output": {"directory": "runs"},
}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


def _merge(defaults, given, path=""):
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(given).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in defaults:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(defaults[key], dict) and where not in _OPEN:
            out[key] = _merge(defaults[key], value if value is not None else {}, where)
        else:
            out[key] = value
    return out


def _apply_override(doc, assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"--set expects section.key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "1e-3" as a string
        try:
            value = float(value)
        except ValueError:
            pass
    node[keys[-1]] = value


def load_config(path, overrides=()) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: not valid {'JSON' if path.suffix == '.json' else 'YAML'}: {exc}") from exc
    doc = doc or {}
    for o in overrides:
        _apply_override(doc, o)
    cfg = _merge(DEFAULTS, doc)
    validate_config(cfg)
    return cfg


def _check(cond, where, msg):
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def validate_config(cfg):
    d = cfg["dataset"]
    _check(d["generator"] in ("multidomain", "multitask", "asymmetric", "csv"), "dataset.generator", f"unknown generator {d['generator']!r}")
    if d["generator"] == "csv":
        _check(d["csv"]["path"], "dataset.csv.path", "required for the csv generator")
        _check(d["csv"]["sources"], "dataset.csv.sources", "must list the sources")
        _check(d["csv"]["tasks"], "dataset.csv.tasks", "must map task names to losses")
    for k in ("val_fraction", "test_fraction"):
        _check(isinstance(d[k], (int, float)) and 0 < d[k] < 1, f"dataset.{k}", "must lie in (0, 1)")
    _check(d["val_fraction"] + d["test_fraction"] < 1, "dataset", "val_fraction + test_fraction must be < 1")
    m = cfg["model"]
    for k in ("trunk_depth", "base_width", "head_depth", "shared_head_layers"):
        _check(isinstance(m[k], int) and m[k] >= 0, f"model.{k}", "must be a non-negative integer")
    _check(isinstance(m["width_multiplier"], (int, float)) and m["width_multiplier"] > 0, "model.width_multiplier", "must be positive")
    t = cfg["training"]
    _check(isinstance(t["epochs"], int) and t["epochs"] >= 1, "training.epochs", "must be a positive integer")
    _check(isinstance(t["batch_size"], int) and t["batch_size"] >= 1, "training.batch_size", "must be a positive integer")
    _check(t["mode"] in ("reweigh", "resample"), "training.mode", "must be reweigh or resample")
    _check(isinstance(t["seeds"], list) and t["seeds"] and all(isinstance(s, int) for s in t["seeds"]), "training.seeds", "must be a non-empty list of integers")
    o = t["optimizer"]
    _check(o["kind"] in ("adamw", "sgd", "sgd-momentum"), "training.optimizer.kind", "must be adamw or sgd-momentum")
    _check(o["schedule"] in ("constant", "cosine"), "training.optimizer.schedule", "must be constant or cosine")
    _check(isinstance(o["learning_rate"], (int, float)) and o["learning_rate"] > 0, "training.optimizer.learning_rate", "must be a positive number")
    _check(0 <= o["warmup_epochs"] <= t["epochs"], "training.optimizer.warmup_epochs", "must lie in [0, training.epochs]")
    _check(cfg["method"]["name"] in METHODS, "method.name", f"must be one of {', '.join(METHODS)}")
    _check(cfg["method"]["name"] == "scalarization" or t["mode"] == "reweigh", "training.mode", "resample applies to scalarization only")
    s = cfg["sweep"]
    _check(s["grid"] is not None or (isinstance(s["grid_points"], int) and s["grid_points"] >= 2), "sweep.grid_points", "must be an integer >= 2")
    for k in cfg["profile"]["methods"]:
        _check(k in METHODS, "profile.methods", f"unknown method {k!r}")


def output_root(cfg) -> Path:
    return Path(os.environ.get("SCALWEIGHT_OUT") or cfg["output"]["directory"])


def make_capacity(cfg) -> Capacity:
    return Capacity(**cfg["model"])


def make_train_config(cfg, method=None, epochs=None) -> TrainConfig:
    t, m = cfg["training"], cfg["method"]
    epochs = epochs or t["epochs"]
    opt = dict(t["optimizer"], betas=tuple(t["optimizer"]["betas"]), total_epochs=epochs)
    if opt["kind"] == "sgd-momentum":
        opt["kind"] = "sgd"
    return TrainConfig(
        method=method or m["name"],
        mode=t["mode"] if (method or m["name"]) == "scalarization" else "reweigh",
        epochs=epochs,
        batch_size=t["batch_size"],
        optimizer=OptimizerConfig(**opt),
        cagrad=CagradConfig(**m["cagrad"]),
        s_learning_rate=m["s_learning_rate"],
        profile_stride=t["profile_stride"],
    )


def make_splits_from_config(cfg) -> tuple[Splits, dict]:
    d = cfg["dataset"]
    gen, params = d["generator"], dict(d["params"])
    info = {"generator": gen, "params": params}
    try:
        if gen == "asymmetric":
            splits = asymmetric_benchmark(**params).splits
        elif gen == "csv":
            c = d["csv"]
            schema = CsvSchema(c["mode"], tuple(c["sources"]), dict(c["tasks"]), c["source_column"], c["class_count"], c["reference_source"])
            splits = make_splits(load_csv(c["path"], schema), d["val_fraction"], d["test_fraction"], d["split_seed"])
            info["csv"] = str(c["path"])
        else:
            fn = gen_multidomain if gen == "multidomain" else gen_multitask
            params.setdefault("seed", 0)
            params.setdefault("T", 2)
            params.setdefault("n" if gen == "multitask" else "n_per_source", 500)
            splits = make_splits(fn(**params), d["val_fraction"], d["test_fraction"], d["split_seed"])
    except TypeError as exc:
        raise ConfigError(f"dataset.params: {exc}") from exc
    except DatasetError as exc:
        raise ConfigError(f"dataset: {exc}") from exc
    if d["standardize"]:
        train, stats = standardize_targets(splits.train)
        splits = Splits(train, standardize_targets(splits.val, stats)[0], standardize_targets(splits.test, stats)[0])
        info["target_stats"] = {"mean": list(stats.mean), "std": list(stats.std)}
    return splits, info


def _weights(cfg, T):
    w = cfg["method"]["weights"]
    if w is None:
        return WeightVector.uniform(T)
    try:
        return WeightVector(w)
    except ValueError as exc:
        raise ConfigError(f"method.weights: {exc}") from exc


def _seeds(cfg, args) -> list[int]:
    return [args.seed] if getattr(args, "seed", None) is not None else list(cfg["training"]["seeds"])


def _save_runs(manifests, directory: Path):
    for m in manifests:
        m.save(directory / m.run_id)
    atomic_write(directory / "metrics.csv", metrics_csv(manifests))


def _write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------- commands


def cmd_train(cfg, args) -> int:
    splits, info = make_splits_from_config(cfg)
    tc = make_train_config(cfg)
    p = _weights(cfg, splits.train.T)
    cap = make_capacity(cfg)
    manifests = [
        run_experiment(splits, cap, tc, p, seed, f"train-{tc.method}-{capacity_key(cap)}-seed{seed}", info) for seed in _seeds(cfg, args)
    ]
    out = output_root(cfg) / "train"
    _save_runs(manifests, out)
    for m in manifests:
        print(f"{m.run_id}: test mean oriented metric {m.mean_oriented('test'):.6g}")
    return EXIT_OK


def cmd_sweep(cfg, args) -> int:
    splits, info = make_splits_from_config(cfg)
    s = cfg["sweep"]
    T = splits.train.T
    if s["grid"] is not None:
        grid = [WeightVector(p) for p in s["grid"]]
    elif T == 2:
        grid = weight_grid_2(s["grid_points"])
    else:
        raise ConfigError("sweep.grid: an explicit grid is required when T > 2")
    if args.include_vertices or s["include_vertices"]:
        for t in range(T):
            v = WeightVector.vertex(T, t)
            if v not in grid:
                grid.append(v)
    cap = make_capacity(cfg)
    tc = make_train_config(cfg, method="scalarization")
    manifests = sweep_runs(splits, cap, grid, _seeds(cfg, args), tc, args.jobs, info)
    out = output_root(cfg) / "sweep"
    _save_runs(manifests, out)
    result = summarize_sweep(manifests)
    rows_to_csv(result.to_rows(), out / "summary.csv")
    summary = {"best_weights": result.best_weights, "best_index": result.best_index, "capacity": result.capacity, "seeds": result.seeds}
    if s["sd_baselines"]:
        sd = run_sd_baselines(splits, [cap], tc, _seeds(cfg, args), args.jobs, info)
        _save_runs(sd, out / "sd")
        summary["sd"] = {f"{k[0]}/{k[1]}": v for k, v in sd_table(sd).items()}
    _write_json(out / "summary.json", summary)
    print(f"p* = {result.best_weights} over {len(grid)} grid points x {len(result.seeds)} seeds")
    return EXIT_OK


def _pbt_config(cfg, args, seed) -> PbtConfig:
    p = dict(cfg["pbt"])
    for k in ("retrain_epochs", "final_weights_only", "save_checkpoints"):
        p.pop(k)
    if args.rank_split is not None:
        p["holdout_fraction"] = args.rank_split
    try:
        return PbtConfig(seed=seed, **p)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"pbt: {exc}") from exc


def cmd_pbt(cfg, args) -> int:
    splits, info = make_splits_from_config(cfg)
    seed = _seeds(cfg, args)[0]
    out = output_root(cfg) / "pbt"
    pc = _pbt_config(cfg, args, seed)
    if args.replay:
        schedule = WeightSchedule.from_json(json.loads(Path(args.replay).read_text(encoding="utf-8")))
    else:
        store = CheckpointStore(out / "checkpoints" if cfg["pbt"]["save_checkpoints"] else None)
        search_tc = make_train_config(cfg, method="scalarization", epochs=pc.E_total)
        result = run_pbt(pc, splits.train, make_capacity(cfg), search_tc, jobs=args.jobs, store=store)
        result.save(out / "search.json", pc)
        schedule = result.schedule
        _write_json(out / "policy.json", schedule.to_json())
        if result.failures:
            log.warning("%d PBT member(s) failed; see search.json", len(result.failures))
        print(f"best member {result.best.member_id}, {result.explored_events} explored configurations (bound {pc.max_configurations:g})")
    epochs = cfg["pbt"]["retrain_epochs"] or cfg["training"]["epochs"]
    tc = make_train_config(cfg, method="scalarization", epochs=epochs)
    trainer = retrain_with_policy(
        schedule,
        splits.train,
        make_capacity(cfg),
        tc,
        seed=seed,
        epochs=epochs,
        eval_sets={"val": splits.val, "test": splits.test},
        final_weights_only=cfg["pbt"]["final_weights_only"],
    )
    notes = {"search_epochs": schedule.end, "final_weights_only": cfg["pbt"]["final_weights_only"]}
    if schedule.end != epochs:
        notes["schedule_stretched_to"] = epochs
    if args.replay:
        notes["replayed_policy"] = str(args.replay)
    manifest = RunManifest(
        run_id=f"pbt-retrain-seed{seed}",
        dataset=dict(info, mode=splits.train.mode, sources=list(splits.train.source_names)),
        capacity=asdict(make_capacity(cfg)),
        method="pbt",
        weights=None,
        schedule=trainer.schedule.to_json(),
        optimizer=json.loads(json.dumps(asdict(trainer.opt_config))),
        train={"epochs": epochs, "batch_size": tc.batch_size, "mode": tc.mode, "steps_per_epoch": trainer.steps_per_epoch},
        seed=seed,
        param_count=trainer.model.n_params,
        metrics=trainer.history,
        notes=notes,
    )
    _save_runs([manifest], out / ("replay" if args.replay else "retrain"))
    print(f"retrained: test mean oriented metric {manifest.mean_oriented('test'):.6g}")
    return EXIT_OK


def _profile_conflicts(cfg, args, out: Path):
    splits, info = make_splits_from_config(cfg)
    tc = make_train_config(cfg)
    cap = make_capacity(cfg)
    stride = max(1, cfg["training"]["profile_stride"])
    for seed in _seeds(cfg, args):
        m = run_experiment(splits, cap, replace(tc, profile_stride=stride), _weights(cfg, splits.train.T), seed, f"profile-{tc.method}-seed{seed}", info)
        _write_conflicts(m, out / f"conflicts-seed{seed}.csv")
        aff = _affinity_from_manifest(m)
        rows = [{"task": t, **{f"median_with_{u}": float(aff[i, j]) for j, u in enumerate(m.dataset["sources"])}, "row_median": float(r)}
                for i, (t, r) in enumerate(zip(m.dataset["sources"], affinity_row_medians(aff)))]
        rows_to_csv(rows, out / f"affinity-seed{seed}.csv")
        m.save(out / m.run_id)
        print(f"{m.run_id}: mean conflict fraction {np.mean([c['fraction'] for c in m.conflicts]):.4f}")


def _write_conflicts(manifest, path):
    T = len(manifest.dataset["sources"])
    pairs = [(i, j) for i in range(T) for j in range(i + 1, T)]
    rows = []
    for c in manifest.conflicts:
        pf = np.asarray(c["pair_fractions"])
        rows.append({"epoch": c["epoch"], "fraction": c["fraction"], **{f"conflict_{i}_{j}": float(pf[i, j]) for i, j in pairs}})
    rows_to_csv(rows, path)


def _affinity_from_manifest(manifest):
    return np.median(np.stack([np.asarray(c["pair_fractions"]) for c in manifest.conflicts]), axis=0)


def _profile_memory(cfg, args, out: Path):
    splits, _ = make_splits_from_config(cfg)
    P = param_count(build_model_spec(splits.train, make_capacity(cfg)))
    T = splits.train.T
    base = estimate_cost("scalarization", T, P)
    rows = []
    for method in cfg["profile"]["methods"]:
        c = estimate_cost(method, T, P, cfg["profile"]["batch_size"] or cfg["training"]["batch_size"])
        rows.append(
            {
                "method": method,
                "T": T,
                "param_count": P,
                "stored_gradient_values": c.stored_gradient_values,
                "backward_passes": c.backward_passes,
                "bytes": c.bytes,
                "storage_ratio": c.stored_gradient_values / base.stored_gradient_values,
            }
        )
    rows_to_csv(rows, out / "memory.csv")
    for r in rows:
        print(f"{r['method']:>14}: {r['bytes']} bytes, {r['backward_passes']} backward pass(es)")


def _set_path(cfg, dotted, value):
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"profile.grid: {dotted} is not a config path")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"profile.grid: {dotted} is not a config path")
    node[keys[-1]] = value


def _profile_variance(cfg, args, out: Path):
    grid = cfg["profile"]["grid"]
    if not grid:
        raise ConfigError("profile.grid: variance analysis needs at least one axis")
    axes = list(grid)
    cells = {}
    rows = []
    for combo in itertools.product(*(grid[a] for a in axes)):
        c = copy.deepcopy(cfg)
        for a, v in zip(axes, combo):
            _set_path(c, a, v)
        validate_config(c)
        splits, info = make_splits_from_config(c)
        tc = make_train_config(c)
        fractions = []
        for seed in _seeds(c, args):
            m = run_experiment(splits, make_capacity(c), tc, _weights(c, splits.train.T), seed, "variance", info, profile=True)
            fractions.append([r["fraction"] for r in m.conflicts])
        series = np.mean(np.asarray(fractions), axis=0)
        key = tuple(json.dumps(v) for v in combo)
        cells[key] = series
        rows.append({**{a: json.dumps(v) for a, v in zip(axes, combo)}, "mean_fraction": float(series.mean())})
    rows_to_csv(rows, out / "variance-cells.csv")
    result = [{"axis": a, "median_variance": variance_analysis(cells, axes, a)} for a in axes]
    rows_to_csv(result, out / "variance.csv")
    for r in result:
        print(f"{r['axis']}: median variance {r['median_variance']:.6g}")


def cmd_profile(cfg, args) -> int:
    out = output_root(cfg) / "profile"
    {"conflicts": _profile_conflicts, "memory": _profile_memory, "variance": _profile_variance}[args.what](cfg, args, out)
    return EXIT_OK


def _manifests_under(root: Path) -> list[RunManifest]:
    return [RunManifest.load(p.parent) for p in sorted(root.rglob("manifest.json"))]


def cmd_report(cfg, args) -> int:
    """Regenerate summary tables from saved run directories (no training)."""
    root = output_root(cfg)
    sweep_dir = root / "sweep"
    if not root.exists():
        raise FileNotFoundError(f"no output directory {root}")
    written = []
    sweep = [m for m in _manifests_under(sweep_dir) if not m.run_id.startswith("sd-")] if sweep_dir.exists() else []
    if sweep:
        result = summarize_sweep(sweep)
        rows_to_csv(result.to_rows(), root / "report" / "sweep_curve.csv")
        _write_json(root / "report" / "sweep_best.json", {"best_weights": result.best_weights, "best_index": result.best_index})
        written.append("sweep_curve.csv")
        print(f"sweep p* = {result.best_weights}")
        sd = [m for m in _manifests_under(sweep_dir / "sd")] if (sweep_dir / "sd").exists() else []
        if sd:
            table = sd_table(sd)
            deltas = delta_report(result, table)
            rows_to_csv([{"task": t, "p_star": json.dumps(result.best_weights), "delta": d} for t, d in deltas.items()], root / "report" / "delta.csv")
            rows_to_csv(tradeoff_table([result], table), root / "report" / "tradeoff.csv")
            written += ["delta.csv", "tradeoff.csv"]
    runs = _manifests_under(root / "train") if (root / "train").exists() else []
    if runs:
        rows = [
            {"run_id": m.run_id, "method": m.method, "seed": m.seed, "test_score": m.mean_oriented("test"), "wall_clock": m.wall_clock, **m.memory}
            for m in runs
        ]
        rows_to_csv(rows, root / "report" / "runs.csv")
        written.append("runs.csv")
    if not written:
        print("nothing to report", file=sys.stderr)
    return EXIT_OK


def cmd_datagen(cfg, args) -> int:
    splits, info = make_splits_from_config(cfg)
    out = output_root(cfg) / "data"
    for name in ("train", "val", "test"):
        schema = save_csv(getattr(splits, name), out / f"{name}.csv")
    _write_json(
        out / "schema.json",
        {
            "mode": schema.mode,
            "sources": list(schema.sources),
            "tasks": dict(schema.tasks),
            "source_column": schema.source_column,
            "class_count": schema.class_count,
            "reference_source": schema.reference_source,
            "generator": info,
        },
    )
    print(f"wrote {', '.join(f'{n} ({sum(getattr(splits, n).counts)} rows)' for n in ('train', 'val', 'test'))} to {out}")
    return EXIT_OK


def cmd_export(cfg, args) -> int:
    """Concatenate every run's metrics into one CSV with the standard columns."""
    root = output_root(cfg)
    manifests = _manifests_under(root) if root.exists() else []
    if not manifests:
        raise FileNotFoundError(f"no runs under {root}")
    target = Path(args.to) if args.to else root / "export" / "metrics.csv"
    if args.to and root.resolve() not in target.resolve().parents:
        raise ConfigError("--to must point inside the output directory")
    atomic_write(target, metrics_csv(manifests))
    print(f"exported {len(manifests)} run(s) to {target}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "pbt": cmd_pbt,
    "profile": cmd_profile,
    "report": cmd_report,
    "datagen": cmd_datagen,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalweight", description="Scalarization weights for multi-task and multi-domain training.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="YAML or JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--seed", type=int, default=None, help="replace training.seeds with this single seed")
        p.add_argument("--jobs", type=int, default=1)
        return p

    add("train", "train one configured method")
    sp = add("sweep", "grid sweep over scalarization weights")
    sp.add_argument("--include-vertices", action="store_true", help="add the single-source vertices e_t to the grid")
    pp = add("pbt", "PBT search over weights, then retraining with the found policy")
    pp.add_argument("--rank-split", type=float, default=None, help="holdout fraction used to rank members")
    pp.add_argument("--replay", default=None, help="retrain from a saved policy.json instead of searching")
    pr = add("profile", "gradient-conflict, memory or variance profiles")
    pr.add_argument("--what", choices=("conflicts", "memory", "variance"), default="conflicts")
    add("report", "rebuild summary tables from saved runs")
    add("datagen", "write the configured dataset splits as CSV")
    ex = add("export", "collect every run's metrics into one CSV")
    ex.add_argument("--to", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
