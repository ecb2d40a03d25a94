"""Named experiment suites on the synthetic benchmark.

Each suite expands into independent runs (one trained model each), executes
them, and writes per-run results, a long-form results table and an
aggregate comparison table (medians over seeds) as plot-ready text.

Suites:

* ``fig1a``: test MSE across shift levels for LSTM, shiftLSTM-T, mixLSTM-2.
* ``fig1b``: LSTM test MSE across training-set sizes at a fixed shift level.
* ``fig2``: shiftLSTM-K sweep on a binary task (test AUROC).
* ``fig3``: mixLSTM-2 against LSTM over subsampled training sets (test AUROC).
* ``fig4``: smoothness strength sweep for mixLSTM-2; mixing-coefficient trajectories.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .datapipe import subsample
from .errors import ContractError
from .evaluation import evaluate, evaluate_regression
from .models import ModelSpec, mixing_table, save_model
from .numerics import Rng
from .synthgen import generate_task, labelize
from .training import TrainConfig, mean_adjacent_similarity, train

# Training protocol shared by the synthetic suites: Adam at 1e-3, batches of
# 100, at most 30 epochs, early stopping after 5 epochs without improvement.
# Inputs are standardized with train statistics.
SYNTH_TRAIN = {"lr": 0.001, "batch_size": 100, "max_epochs": 30, "patience": 5}

_COMMON = {"seeds": 3, "T": 30, "d": 3, "l": 10, "hidden": 32, "n_val": 1000, "n_test": 1000,
           "standardize": True, "train": SYNTH_TRAIN, "save_models": False}

SUITES = {
    "fig1a": dict(_COMMON, task="regression", deltas=[0.0, 0.1, 0.2, 0.3, 0.4], n_train=[1000],
                  models=["lstm", "shift-30", "mix-2"], alphas=[0.0], x="delta"),
    "fig1b": dict(_COMMON, task="regression", deltas=[0.3], n_train=[1000, 5000, 20000],
                  models=["lstm"], alphas=[0.0], x="n_train"),
    "fig2": dict(_COMMON, task="classification", deltas=[0.3], n_train=[1000],
                 models=["shift-1", "shift-2", "shift-3", "shift-5", "shift-10", "shift-30"], alphas=[0.0], x="K"),
    "fig3": dict(_COMMON, task="classification", deltas=[0.3], n_train=[250, 500, 1000],
                 models=["lstm", "mix-2"], alphas=[0.0], x="n_train", subsample_from=1000),
    "fig4": dict(_COMMON, task="classification", deltas=[0.3], n_train=[1000], seeds=1,
                 models=["mix-2"], alphas=[0.0, 0.1, 10.0], x="alpha"),
}

_KIND_ALIASES = {"shift": "shift_lstm", "mix": "mix_lstm"}


def parse_model_label(label: str):
    """``"lstm"``, ``"lstm2"`` (two layers), ``"shift-30"``, ``"mix-2"``, ... ->
    ``(kind, K, num_layers)``."""
    name, _, k = label.partition("-")
    if name == "lstm2":
        return "lstm", None, 2
    kind = _KIND_ALIASES.get(name, name)
    if kind in ("shift_lstm", "mix_lstm"):
        if not k.isdigit():
            raise ContractError(f"model label {label!r} needs a cell count, e.g. {name}-2")
        return kind, int(k), 1
    if k:
        raise ContractError(f"model label {label!r} takes no cell count")
    return kind, None, 1


def suite_params(name: str, overrides: dict | None = None) -> dict:
    if name not in SUITES:
        raise ContractError(f"unknown suite {name!r}; available: {', '.join(sorted(SUITES))}")
    params = copy.deepcopy(SUITES[name])
    for key, value in (overrides or {}).items():
        if key not in params:
            raise ContractError(f"suite {name} has no parameter {key!r}; known: {', '.join(sorted(params))}")
        if key == "train":
            params["train"] = dict(params["train"], **value)
        else:
            params[key] = value
    return params


def plan_runs(params: dict, seed: int) -> list:
    """Expand a suite into run descriptions, in a fixed order."""
    runs = []
    for delta in params["deltas"]:
        for n in params["n_train"]:
            for label in params["models"]:
                parse_model_label(label)
                for alpha in params["alphas"]:
                    for s in range(params["seeds"]):
                        rid = f"delta{float(delta):.2f}_n{n}_{label}_a{alpha:g}_s{s}"
                        runs.append({"id": rid, "delta": float(delta), "n_train": int(n), "model": label,
                                     "alpha": float(alpha), "seed_index": s,
                                     "model_seed": Rng(seed).child_seed(f"model-{s}")})
    return runs


def _task_splits(params: dict, seed: int, delta: float, n_train: int, s: int) -> dict:
    n_gen = params.get("subsample_from") or n_train
    task = generate_task(delta, s, n_gen, params["n_val"], params["n_test"], seed,
                         params["T"], params["d"], params["l"], params["standardize"])
    splits = labelize(task.splits) if params["task"] == "classification" else task.splits
    if n_train < n_gen:
        splits = dict(splits, train=subsample(splits["train"], n_train, Rng(seed).child(f"subsample-{s}-{n_train}")))
    return splits


def execute_run(run: dict, params: dict, splits: dict, out_dir: Path | None = None) -> tuple:
    """Train and test one model; returns ``(result, timing)``."""
    kind, K, layers = parse_model_label(run["model"])
    train_ds = splits["train"]
    spec = ModelSpec(kind, train_ds.d, params["hidden"], train_ds.T, K=K, num_layers=layers,
                     task=params["task"], seed=run["model_seed"])
    cfg = TrainConfig(seed=run["model_seed"], alpha=run["alpha"], **params["train"])
    t0 = time.perf_counter()
    state, hist = train(spec, train_ds, splits["val"], cfg)
    elapsed = time.perf_counter() - t0
    result = dict(run, kind=kind, K=K, best_epoch=hist.best_epoch, epochs_run=len(hist.epochs),
                  val_metric=hist.best_val, stop_reason=hist.stop_reason)
    if params["task"] == "regression":
        result["test_mse"] = evaluate_regression(state, splits["test"], B=0)["mse"]
    else:
        result["test_auroc"] = evaluate(state, splits["test"], B=0).auroc
    if kind == "mix_lstm":
        lam = mixing_table(state)
        result["lambda"] = lam.tolist()
        result["mean_adjacent_similarity"] = mean_adjacent_similarity(lam)
    if out_dir is not None:
        rdir = out_dir / "runs" / run["id"]
        rdir.mkdir(parents=True, exist_ok=True)
        _write_json(rdir / "result.json", result)
        _write_json(rdir / "history.json", hist.to_dict())
        if params.get("save_models"):
            save_model(state, rdir / "model.json")
    return result, {"id": run["id"], "train_seconds": elapsed, "epoch_seconds": hist.wall_times}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _metric_name(params: dict) -> str:
    return "test_mse" if params["task"] == "regression" else "test_auroc"


def _x_value(result: dict, axis: str):
    return result["K"] if axis == "K" else result[axis]


def aggregate(results: list, params: dict) -> list:
    """Median (and min / max) of the test metric over seeds, per (x, model)."""
    metric = _metric_name(params)
    axis = params["x"]
    groups = {}
    for r in results:
        key = (_x_value(r, axis), r["model"] if axis != "K" else r["kind"])
        groups.setdefault(key, []).append(r[metric])
    rows = []
    for (x, model), vals in groups.items():
        rows.append({axis: x, "model": model, "median": float(np.median(vals)), "min": float(np.min(vals)),
                     "max": float(np.max(vals)), "n": len(vals)})
    return rows


def _csv(rows: list, columns: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def wide_table(rows: list, axis: str) -> str:
    """Plot-ready text: one line per x value, one median column per model."""
    models = list(dict.fromkeys(r["model"] for r in rows))
    xs = list(dict.fromkeys(r[axis] for r in rows))
    lookup = {(r[axis], r["model"]): r["median"] for r in rows}
    lines = ["\t".join([axis] + models)]
    for x in xs:
        lines.append("\t".join([str(x)] + [repr(lookup[(x, m)]) if (x, m) in lookup else "" for m in models]))
    return "\n".join(lines) + "\n"


def run_suite(name: str, out_dir=None, seed: int = 0, jobs: int = 1, overrides: dict | None = None) -> dict:
    """Run every job of a suite. Returns ``{"params", "results", "table", "timing", "paths"}``.

    With ``out_dir`` the per-run files, ``results.csv``, ``table.csv`` and
    ``<name>.tsv`` are written there (plus ``lambda_alpha*.csv`` for fig4).
    Wall-clock times go to ``timing.json`` only, so reruns reproduce every
    other file bit for bit.
    """
    params = suite_params(name, overrides)
    runs = plan_runs(params, seed)
    out = Path(out_dir) if out_dir is not None else None
    keys = list(dict.fromkeys((r["delta"], r["n_train"], r["seed_index"]) for r in runs))
    data = {k: _task_splits(params, seed, *k) for k in keys}

    def job(run):
        return execute_run(run, params, data[(run["delta"], run["n_train"], run["seed_index"])], out)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(job, runs))
    else:
        done = [job(r) for r in runs]
    results = [r for r, _ in done]
    timing = [t for _, t in done]
    table = aggregate(results, params)
    paths = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metric = _metric_name(params)
        cols = ["id", "delta", "n_train", "model", "alpha", "seed_index", "model_seed", "best_epoch",
                "epochs_run", "val_metric", metric]
        for fname, text in (("results.csv", _csv(results, cols)),
                            ("table.csv", _csv(table, [params["x"], "model", "median", "min", "max", "n"])),
                            (f"{name}.tsv", wide_table(table, params["x"]))):
            (out / fname).write_text(text, encoding="utf-8")
            paths.append(out / fname)
        if name == "fig4":
            paths += _write_trajectories(results, out)
        _write_json(out / "timing.json", timing)
        paths.append(out / "timing.json")
    return {"params": params, "results": results, "table": table, "timing": timing, "paths": paths}


def _write_trajectories(results: list, out: Path) -> list:
    paths = []
    summary = ["alpha\tseed_index\tmean_adjacent_similarity\ttest_auroc"]
    for r in results:
        lam = np.asarray(r["lambda"])
        lines = ["t\t" + "\t".join(f"lambda{k + 1}" for k in range(lam.shape[1]))]
        lines += [f"{t + 1}\t" + "\t".join(repr(float(v)) for v in row) for t, row in enumerate(lam)]
        p = out / f"lambda_alpha{r['alpha']:g}_s{r['seed_index']}.tsv"
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths.append(p)
        summary.append(f"{r['alpha']:g}\t{r['seed_index']}\t{r['mean_adjacent_similarity']!r}\t{r['test_auroc']!r}")
    p = out / "smoothness.tsv"
    p.write_text("\n".join(summary) + "\n", encoding="utf-8")
    return paths + [p]
