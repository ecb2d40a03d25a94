"""Multitask copy-memory benchmark with controllable temporal conditional shift.

Each target ``y_t`` (for ``t = l+1 .. T``) is a bilinear read-out of the
previous ``l`` input rows, ``w_l[t] @ X[t-l:t] @ w_d[t]``, where both weight
vectors drift by a random walk of amplitude ``delta`` and are projected back
onto the simplex at every step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datapipe import SequenceDataset, save_dataset
from .errors import ContractError
from .numerics import Rng

WEIGHT_FLOOR = 1e-6
DELTAS = (0.0, 0.1, 0.2, 0.3, 0.4)


def renormalize(w) -> np.ndarray:
    w = np.maximum(np.asarray(w, dtype=np.float64), WEIGHT_FLOOR)
    return w / w.sum()


def sample_weights(T: int, l: int, m: int, delta: float, rng: Rng) -> np.ndarray:
    """Random-walk weight vectors for steps l+1..T, shape ``(T - l, m)``."""
    if not (T > l >= 1 and m >= 1 and delta >= 0):
        raise ContractError(f"sample_weights needs T > l >= 1, m >= 1, delta >= 0 (got T={T}, l={l}, m={m}, delta={delta})")
    w = np.empty((T - l, m))
    w[0] = renormalize(rng.uniform(0.0, 1.0, size=m))
    for s in range(1, T - l):
        w[s] = renormalize(w[s - 1] + rng.uniform(-delta, delta, size=m))
    return w


@dataclass
class WeightSchedule:
    w_l: np.ndarray  # (T - l, l)
    w_d: np.ndarray  # (T - l, d)
    delta: float
    T: int
    l: int
    d: int

    def to_dict(self) -> dict:
        return {"T": self.T, "l": self.l, "d": self.d, "delta": self.delta,
                "w_l": self.w_l.tolist(), "w_d": self.w_d.tolist()}


def sample_schedule(T: int, d: int, l: int, delta: float, rng: Rng) -> WeightSchedule:
    return WeightSchedule(
        w_l=sample_weights(T, l, l, delta, rng.child("w_l")),
        w_d=sample_weights(T, l, d, delta, rng.child("w_d")),
        delta=float(delta), T=T, l=l, d=d,
    )


def targets(X: np.ndarray, ws: WeightSchedule) -> np.ndarray:
    """Targets ``(N, T - l)`` for inputs ``X`` of shape ``(N, T, d)``."""
    l = ws.l
    windows = np.stack([X[:, t - l:t, :] for t in range(l, ws.T)], axis=1)  # (N, T-l, l, d)
    return np.einsum("nsld,sl,sd->ns", windows, ws.w_l, ws.w_d)


def sample_inputs(n: int, T: int, d: int, rng: Rng, p_nonzero: float = 0.1) -> np.ndarray:
    z = rng.random((n, T, d)) < p_nonzero
    x = rng.uniform(0.0, 100.0, size=(n, T, d))
    return np.where(z, x, 0.0)


def sample_example(T: int, d: int, l: int, ws: WeightSchedule, rng: Rng, p_nonzero: float = 0.1):
    """One ``(x, y)`` pair; ``x`` is ``(T, d)``, ``y`` covers steps l+1..T."""
    if (ws.T, ws.d, ws.l) != (T, d, l):
        raise ContractError(f"weight schedule built for (T, d, l)={(ws.T, ws.d, ws.l)}, asked for {(T, d, l)}")
    x = sample_inputs(1, T, d, rng, p_nonzero)
    return x[0], targets(x, ws)[0]


def make_dataset(n: int, ws: WeightSchedule, rng: Rng, metadata: dict | None = None, id_prefix: str = "") -> SequenceDataset:
    X = sample_inputs(n, ws.T, ws.d, rng)
    y = targets(X, ws) if n else np.zeros((0, ws.T - ws.l))
    meta = {"target_offset": ws.l, **(metadata or {})}
    return SequenceDataset(X, y, [f"{id_prefix}{i}" for i in range(n)], "regression", {}, meta)


@dataclass
class BenchmarkTask:
    delta: float
    schedule_id: int
    schedule: WeightSchedule
    splits: dict  # name -> SequenceDataset
    seed: int

    @property
    def name(self) -> str:
        return f"delta{self.delta:.2f}_s{self.schedule_id}"


def standardize_features(splits: dict) -> dict:
    """Scale every split's inputs by the train split's per-feature mean and
    standard deviation (floored at 1e-8). Targets keep their natural scale;
    the statistics are recorded in each split's metadata."""
    train = splits["train"]
    if len(train) == 0:
        raise ContractError("standardization needs a nonempty train split")
    mean = train.X.mean(axis=(0, 1))
    scale = np.maximum(train.X.std(axis=(0, 1)), 1e-8)
    out = {}
    for name, ds in splits.items():
        meta = dict(ds.metadata, feature_mean=mean.tolist(), feature_scale=scale.tolist())
        out[name] = SequenceDataset((ds.X - mean) / scale, ds.y, list(ds.ids), ds.task, ds.schema, meta, ds.mask)
    return out


def generate_task(delta: float, schedule_id: int, n_train: int, n_val: int, n_test: int, seed: int,
                  T: int = 30, d: int = 3, l: int = 10, standardize: bool = False) -> BenchmarkTask:
    """One task: a weight schedule and train/val/test splits sharing it.

    Streams are keyed by (seed, delta, schedule id), so a task is the same
    whether generated alone or as part of a sweep. With ``standardize`` the
    inputs (not the targets) are rescaled by train-split feature statistics.
    """
    if min(n_train, n_val, n_test) < 0:
        raise ContractError("split sizes must be nonnegative")
    root = Rng(seed).child(f"delta={float(delta)!r}").child(f"schedule={schedule_id}")
    ws = sample_schedule(T, d, l, delta, root.child("weights"))
    splits = {}
    for name, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        meta = {"seed": seed, "delta": float(delta), "schedule_id": schedule_id, "split": name,
                "sizes": {"train": n_train, "val": n_val, "test": n_test}, "T": T, "d": d, "l": l}
        splits[name] = make_dataset(n, ws, root.child(name), meta, id_prefix=f"{name}-")
    if standardize:
        splits = standardize_features(splits)
    return BenchmarkTask(float(delta), schedule_id, ws, splits, seed)


def generate_benchmark(deltas=DELTAS, schedules_per_delta: int = 5, n_train: int = 1000, n_val: int = 1000,
                       n_test: int = 1000, rng: Rng | int = 0, T: int = 30, d: int = 3, l: int = 10,
                       standardize: bool = False) -> list:
    seed = rng.seed if isinstance(rng, Rng) else int(rng)
    if schedules_per_delta < 1:
        raise ContractError("schedules_per_delta must be positive")
    return [generate_task(delta, s, n_train, n_val, n_test, seed, T, d, l, standardize)
            for delta in deltas for s in range(schedules_per_delta)]


def labelize(splits: dict) -> dict:
    """Binary variant: label 1 iff the final target exceeds the train median."""
    train = splits.get("train")
    if train is None or len(train) == 0:
        raise ContractError("labelize needs a nonempty train split")
    threshold = float(np.median(train.y[:, -1]))
    out = {}
    for name, ds in splits.items():
        labels = (ds.y[:, -1] > threshold).astype(np.int64) if len(ds) else np.zeros(0, dtype=np.int64)
        meta = dict(ds.metadata, threshold=threshold,
                    label_balance=float(labels.mean()) if len(labels) else None)
        meta.pop("target_offset", None)
        out[name] = SequenceDataset(ds.X, labels, list(ds.ids), "classification", ds.schema, meta)
    return out


def write_task(task: BenchmarkTask, out_dir, classify: bool = False) -> list:
    """Write ``<task>/{train,val,test}.jsonl`` plus a ``meta.json`` sidecar."""
    tdir = Path(out_dir) / task.name
    tdir.mkdir(parents=True, exist_ok=True)
    splits = labelize(task.splits) if classify else task.splits
    paths = []
    for name, ds in splits.items():
        p = tdir / f"{name}.jsonl"
        save_dataset(ds, p)
        paths.append(p)
    sidecar = {
        "seed": task.seed, "delta": task.delta, "schedule_id": task.schedule_id,
        "sizes": {k: len(v) for k, v in splits.items()},
        "task": "classification" if classify else "regression",
        "threshold": splits["train"].metadata.get("threshold") if classify else None,
        "schedule": task.schedule.to_dict(),
    }
    (tdir / "meta.json").write_text(json.dumps(sidecar, indent=1) + "\n", encoding="utf-8")
    return paths
