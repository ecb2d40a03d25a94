"""Dataset container, JSON-Lines file format, hourly-grid preprocessing of
pre-extracted records, and split management.

File layout (UTF-8, one JSON document per line)::

    {"format_version": 1, "schema": {...}, "T": 30, "d": 3, "task": "regression", "metadata": {...}}
    {"id": "0", "x": [[...], ...], "y": [...]}
    {"id": "1", "x": [[...], ...], "y": 1, "mask": [[0, 1, ...], ...]}

Regression targets cover steps ``target_offset + 1 .. T`` (the offset is
kept in the header metadata); classification targets are a single 0/1 label.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataFormatError
from .numerics import Rng

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class SequenceDataset:
    X: np.ndarray
    y: np.ndarray
    ids: list
    task: str = "regression"
    schema: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 3:
            raise ContractError(f"X must be (N, T, d), got shape {self.X.shape}")
        if self.task == "classification":
            self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        else:
            self.y = np.asarray(self.y, dtype=np.float64)
            if self.y.ndim != 2:
                self.y = self.y.reshape(len(self.X), -1) if len(self.X) else self.y.reshape(0, 0)
        if len(self.ids) != len(self.X) or len(self.y) != len(self.X):
            raise ContractError("ids, X and y disagree on the number of examples")
        if not self.schema:
            self.schema = {"features": [{"name": f"x{i}", "type": "continuous"} for i in range(self.d)]}

    def __len__(self):
        return len(self.X)

    @property
    def T(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[2]

    @property
    def target_offset(self) -> int:
        return int(self.metadata.get("target_offset", 0))

    def subset(self, idx) -> "SequenceDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SequenceDataset(
            self.X[idx], self.y[idx], [self.ids[i] for i in idx], self.task, self.schema,
            dict(self.metadata), None if self.mask is None else self.mask[idx],
        )

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "schema": self.schema,
            "T": self.T,
            "d": self.d,
            "task": self.task,
            "metadata": self.metadata,
        }


def _empty(T: int, d: int, task: str, schema, metadata) -> SequenceDataset:
    y = np.zeros(0, dtype=np.int64) if task == "classification" else np.zeros((0, max(T - int(metadata.get("target_offset", 0)), 0)))
    return SequenceDataset(np.zeros((0, T, d)), y, [], task, schema, metadata)


def dumps_dataset(ds: SequenceDataset) -> str:
    lines = [json.dumps(ds.header())]
    for n in range(len(ds)):
        rec = {"id": ds.ids[n], "x": ds.X[n].tolist()}
        rec["y"] = int(ds.y[n]) if ds.task == "classification" else ds.y[n].tolist()
        if ds.mask is not None:
            rec["mask"] = ds.mask[n].astype(int).tolist()
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def save_dataset(ds: SequenceDataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds), encoding="utf-8")


def loads_dataset(text: str, source: str = "<string>") -> SequenceDataset:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DataFormatError(f"{source}: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{source}:1: malformed header ({e.msg})") from e
    for key in ("format_version", "T", "d", "task"):
        if key not in header:
            raise DataFormatError(f"{source}:1: header lacks {key!r}")
    if header["format_version"] != FORMAT_VERSION:
        raise DataFormatError(f"{source}: unsupported format version {header['format_version']}")
    T, d, task = int(header["T"]), int(header["d"]), header["task"]
    meta = header.get("metadata", {})
    schema = header.get("schema", {})
    ids, xs, ys, masks = [], [], [], []
    n_targets = T - int(meta.get("target_offset", 0))
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{source}:{lineno}: malformed line ({e.msg})") from e
        rid = rec.get("id", f"<line {lineno}>")
        x = np.asarray(rec.get("x"), dtype=np.float64)
        if x.shape != (T, d):
            raise DataFormatError(f"{source}:{lineno}: example {rid!r} has x of shape {x.shape}, expected T={T} rows of d={d}")
        if not np.all(np.isfinite(x)):
            raise DataFormatError(f"{source}:{lineno}: example {rid!r} has non-finite inputs")
        y = rec.get("y")
        if task == "classification":
            if y not in (0, 1):
                raise DataFormatError(f"{source}:{lineno}: example {rid!r} label must be 0 or 1")
        elif len(y) != n_targets:
            raise DataFormatError(f"{source}:{lineno}: example {rid!r} has {len(y)} targets, expected {n_targets}")
        if "mask" in rec:
            m = np.asarray(rec["mask"], dtype=np.int64)
            if m.shape != (T, d):
                raise DataFormatError(f"{source}:{lineno}: example {rid!r} mask shape {m.shape} != {(T, d)}")
            masks.append(m)
        ids.append(str(rid))
        xs.append(x)
        ys.append(y)
    if masks and len(masks) != len(xs):
        raise DataFormatError(f"{source}: mask present on some examples only")
    if not xs:
        return _empty(T, d, task, schema, meta)
    return SequenceDataset(np.stack(xs), np.asarray(ys), ids, task, schema, meta,
                           np.stack(masks) if masks else None)


def load_dataset(path) -> SequenceDataset:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"{path}: no such file")
    return loads_dataset(path.read_text(encoding="utf-8"), str(path))


def datasets_equal(a: SequenceDataset, b: SequenceDataset) -> bool:
    return (
        a.header() == b.header()
        and a.ids == b.ids
        and np.array_equal(a.X, b.X)
        and np.array_equal(a.y, b.y)
        and ((a.mask is None and b.mask is None) or (a.mask is not None and b.mask is not None and np.array_equal(a.mask, b.mask)))
    )


# -- splits --------------------------------------------------------------------


def split(ds: SequenceDataset, fractions=None, ids=None, rng: Rng | None = None) -> dict:
    """Partition into train/val/test by shuffled fractions or explicit id lists."""
    if ids is not None:
        parts = {k: list(v) for k, v in ids.items()}
        seen = set()
        for name, members in parts.items():
            overlap = seen.intersection(members)
            if overlap:
                raise ContractError(f"id {sorted(overlap)[0]!r} assigned to more than one split")
            seen.update(members)
        pos = {rid: i for i, rid in enumerate(ds.ids)}
        missing = seen.difference(pos)
        if missing:
            raise ContractError(f"unknown id {sorted(missing)[0]!r} in split lists")
        out = {k: ds.subset([pos[r] for r in v]) for k, v in parts.items()}
    else:
        fractions = fractions or (0.8, 0.1, 0.1)
        if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
            raise ContractError(f"split fractions must be three nonnegative numbers summing to 1, got {fractions}")
        order = (rng or Rng(0)).child("split").permutation(len(ds))
        n_train = int(round(fractions[0] * len(ds)))
        n_val = int(round(fractions[1] * len(ds)))
        cuts = {"train": order[:n_train], "val": order[n_train:n_train + n_val], "test": order[n_train + n_val:]}
        out = {k: ds.subset(np.sort(v)) for k, v in cuts.items()}
    for name, part in out.items():
        part.metadata = dict(part.metadata, split=name, split_ids=list(part.ids))
    return out


def subsample(ds: SequenceDataset, n: int, rng: Rng) -> SequenceDataset:
    """Random subset of ``n`` examples (without replacement), order preserved."""
    if not 0 <= n <= len(ds):
        raise ContractError(f"cannot subsample {n} of {len(ds)} examples")
    idx = np.sort(rng.child(f"subsample{n}").choice(len(ds), size=n, replace=False))
    out = ds.subset(idx)
    out.metadata = dict(out.metadata, subsample=n)
    return out


# -- preprocessing of raw records ---------------------------------------------


@dataclass
class FeatureSpec:
    name: str
    type: str = "continuous"  # or "categorical"
    default: object = None
    vocab: list = field(default_factory=list)


@dataclass
class Schema:
    features: list

    def index(self) -> dict:
        return {f.name: i for i, f in enumerate(self.features)}

    def to_dict(self) -> dict:
        return {"features": [dict(name=f.name, type=f.type, default=f.default, vocab=list(f.vocab)) for f in self.features]}

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls([FeatureSpec(**f) for f in d["features"]])

    def encoded_names(self) -> list:
        names = []
        for f in self.features:
            names += [f"{f.name}={v}" for v in f.vocab] if f.type == "categorical" else [f.name]
        return names + [f"mask:{f.name}" for f in self.features]


@dataclass
class RawSequenceRecord:
    id: str
    observations: list  # (step 1..T, feature name, value)
    label: int | None = None


def impute_carry_forward(record: RawSequenceRecord, schema: Schema, T: int, fallback: dict | None = None):
    """Hourly grid by carry-forward; returns ``(values, mask)``, both ``(T, F)``.

    ``mask`` is 1 wherever no observation fell on that step, i.e. the value
    was carried forward or defaulted. Several observations on one step keep
    the last one listed.
    """
    idx = schema.index()
    F = len(schema.features)
    observed = [[None] * F for _ in range(T)]
    for step, name, value in record.observations:
        if name not in idx:
            raise ContractError(f"record {record.id!r}: unknown feature {name!r}")
        if not 1 <= step <= T:
            raise ContractError(f"record {record.id!r}: step {step} outside 1..{T}")
        observed[step - 1][idx[name]] = value
    values = np.empty((T, F), dtype=object)
    mask = np.ones((T, F), dtype=np.int64)
    for j, feat in enumerate(schema.features):
        current = feat.default
        if current is None and fallback is not None:
            current = fallback.get(feat.name)
        for t in range(T):
            if observed[t][j] is not None:
                current = observed[t][j]
                mask[t, j] = 0
            values[t, j] = current
    return values, mask


def compute_train_stats(grids: list, schema: Schema) -> dict:
    """Per-feature mean and population std of continuous values over training grids."""
    stats = {}
    for j, feat in enumerate(schema.features):
        if feat.type != "continuous":
            continue
        vals = np.array([v for g in grids for v in g[:, j] if v is not None], dtype=np.float64)
        if vals.size == 0:
            stats[feat.name] = {"mean": 0.0, "scale": 1.0}
        else:
            stats[feat.name] = {"mean": float(vals.mean()), "scale": float(max(vals.std(), 1e-8))}
    return stats


def observed_means(records: list, schema: Schema) -> dict:
    """Mean of directly observed continuous values, used for missing defaults."""
    sums, counts = {}, {}
    kinds = {f.name: f.type for f in schema.features}
    for rec in records:
        for _, name, value in rec.observations:
            if kinds.get(name) == "continuous":
                sums[name] = sums.get(name, 0.0) + float(value)
                counts[name] = counts.get(name, 0) + 1
    return {k: sums[k] / counts[k] for k in sums}


def encode(values: np.ndarray, mask: np.ndarray, schema: Schema, stats: dict) -> np.ndarray:
    """Standardize continuous columns, one-hot categorical ones, append masks."""
    T = values.shape[0]
    cols = []
    for j, feat in enumerate(schema.features):
        if feat.type == "continuous":
            if feat.name not in stats:
                raise ContractError(f"no training statistics for continuous feature {feat.name!r}")
            s = stats[feat.name]
            col = np.array([np.nan if v is None else float(v) for v in values[:, j]])
            col = (col - s["mean"]) / max(s["scale"], 1e-8)
            cols.append(np.nan_to_num(col, nan=0.0)[:, None])
        else:
            onehot = np.zeros((T, len(feat.vocab)))
            pos = {v: k for k, v in enumerate(feat.vocab)}
            for t in range(T):
                v = values[t, j]
                if v is None:
                    continue
                if v in pos:
                    onehot[t, pos[v]] = 1.0
                else:
                    log.warning("feature %s: unknown category %r encoded as all zeros", feat.name, v)
            cols.append(onehot)
    cols.append(mask.astype(np.float64))
    return np.concatenate(cols, axis=1)


def preprocess(records: list, schema: Schema, T: int, train_ids=None) -> SequenceDataset:
    """Impute, encode and stack labelled records into a classification dataset.

    Normalization statistics (and fallback defaults for features without a
    schema default) come from the records in ``train_ids`` only, defaulting
    to all records.
    """
    train_ids = set(train_ids) if train_ids is not None else {r.id for r in records}
    train_recs = [r for r in records if r.id in train_ids]
    fallback = observed_means(train_recs, schema)
    grids = {r.id: impute_carry_forward(r, schema, T, fallback) for r in records}
    stats = compute_train_stats([grids[r.id][0] for r in train_recs], schema)
    X = np.stack([encode(*grids[r.id], schema, stats) for r in records]) if records else np.zeros((0, T, len(schema.encoded_names())))
    y = [int(r.label) for r in records]
    meta = {"train_stats": stats, "encoded_features": schema.encoded_names(), "train_ids": sorted(train_ids)}
    return SequenceDataset(X, y, [r.id for r in records], "classification", schema.to_dict(), meta)


def load_raw_records(path) -> tuple:
    """Read pre-extracted records: header ``{"schema": ..., "T": ...}`` then one
    ``{"id", "label", "observations": [[step, name, value], ...]}`` per line."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    header = json.loads(lines[0])
    schema = Schema.from_dict(header["schema"])
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{path}:{lineno}: malformed line ({e.msg})") from e
        records.append(RawSequenceRecord(str(rec["id"]), [tuple(o) for o in rec["observations"]], rec.get("label")))
    return schema, int(header["T"]), records
