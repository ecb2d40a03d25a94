"""Input-gradient saliency and grouped, windowed permutation importance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .evaluation import aggregate_score, auroc
from .models import ModelState, backward, forward, forward_raw
from .numerics import Rng, softmax


@dataclass
class SaliencyMap:
    values: np.ndarray  # (T, d), signed
    n_examples: int
    target_class: int
    aggregate: str = "max"

    def to_csv(self, names=None) -> str:
        T, d = self.values.shape
        names = names or [f"x{i}" for i in range(d)]
        rows = ["t," + ",".join(names)]
        rows += [f"{t + 1}," + ",".join(repr(float(v)) for v in self.values[t]) for t in range(T)]
        return "\n".join(rows) + "\n"


def _score_grads(state: ModelState, X, target_class: int, aggregate: str, score: str):
    """dScore/dX per example, where Score aggregates per-step class scores."""
    out, cache = forward_raw(state, X, keep_cache=True)
    probs = softmax(out, axis=-1)
    c = target_class
    if score == "probability":
        per_step = probs[..., c]
        # d p_c / d logits = p_c * (e_c - p)
        dstep = -probs * per_step[..., None]
        dstep[..., c] += per_step
    elif score == "logit":
        per_step = out[..., c] - out[..., 1 - c]
        dstep = np.zeros_like(out)
        dstep[..., c], dstep[..., 1 - c] = 1.0, -1.0
    else:
        raise ContractError(f"unknown score {score!r}")
    if aggregate == "max":
        # subgradient at the earliest maximizing step
        t_star = np.argmax(per_step, axis=1)
        weight = np.zeros(per_step.shape)
        weight[np.arange(len(X)), t_star] = 1.0
    elif aggregate == "sum":
        weight = np.ones(per_step.shape)
    else:
        raise ContractError(f"unknown aggregation {aggregate!r}")
    _, dX = backward(state, cache, dstep * weight[..., None])
    return dX


def gradient_saliency(model: ModelState, dataset, target_class: int = 1, aggregate: str = "max",
                      score: str = "probability", batch_size: int = 500) -> SaliencyMap:
    """Sum over examples of the input gradient of the aggregated target-class score.

    The default score is the class probability at each step, aggregated by
    the max over time (so only the argmax step carries gradient).
    """
    if model.spec.task != "classification":
        raise ContractError("gradient saliency is defined for classification models only")
    if target_class not in (0, 1):
        raise ContractError("target_class must be 0 or 1")
    X = dataset.X if hasattr(dataset, "X") else np.asarray(dataset, dtype=np.float64)
    if len(X) == 0:
        raise ContractError("saliency needs at least one example")
    total = np.zeros(X.shape[1:])
    for start in range(0, len(X), batch_size):
        total += _score_grads(model, X[start:start + batch_size], target_class, aggregate, score).sum(axis=0)
    return SaliencyMap(total, len(X), target_class, aggregate)


@dataclass
class FeatureRank:
    index: int
    name: str
    importance: float
    direction: str  # "risk" | "protective" | "none"
    trend: str  # "increasing" | "decreasing" | "flat"
    category: str  # e.g. "risk, amplifying"


def rank_features(smap: SaliencyMap, names=None, window: int | None = None) -> list:
    """Order features by |sum over time| of their saliency column.

    Direction is the sign of that sum. Trend compares the mean over the last
    ``window`` steps with the mean over the first ``window`` (default: halves).
    A trend in the same direction as the overall effect is "amplifying",
    the opposite "diminishing". Ties keep feature order.
    """
    vals = np.asarray(smap.values, dtype=np.float64)
    T, d = vals.shape
    names = names or [f"x{i}" for i in range(d)]
    w = window or max(T // 2, 1)
    totals = vals.sum(axis=0)
    scale = np.abs(vals).max() if vals.size else 0.0
    ranks = []
    for i in range(d):
        s = totals[i]
        diff = vals[T - w:, i].mean() - vals[:w, i].mean()
        if abs(diff) <= 1e-12 * max(scale, 1e-300):
            diff = 0.0
        direction = "risk" if s > 0 else "protective" if s < 0 else "none"
        trend = "increasing" if diff > 0 else "decreasing" if diff < 0 else "flat"
        if direction == "none" or trend == "flat":
            category = direction if direction != "none" else "none"
            category += ", steady" if direction != "none" else ""
        else:
            amplifying = (s > 0) == (diff > 0)
            category = f"{direction}, {'amplifying' if amplifying else 'diminishing'}"
        ranks.append(FeatureRank(i, names[i], float(abs(s)), direction, trend, category))
    order = sorted(range(d), key=lambda i: -ranks[i].importance)
    return [ranks[i] for i in order]


def correlation_groups(dataset, threshold: float = 0.95) -> list:
    """Partition features into groups linked by |Pearson r| >= threshold,
    closed transitively. Constant features correlate with nothing."""
    if not 0 < threshold <= 1:
        raise ContractError("correlation threshold must lie in (0, 1]")
    X = dataset.X if hasattr(dataset, "X") else np.asarray(dataset, dtype=np.float64)
    obs = X.reshape(-1, X.shape[-1])
    d = obs.shape[1]
    centered = obs - obs.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    live = norms > 0
    r = np.zeros((d, d))
    if live.any():
        c = centered[:, live] / norms[live]
        r[np.ix_(live, live)] = c.T @ c
    parent = list(range(d))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(d):
        for j in range(i + 1, d):
            if live[i] and live[j] and abs(r[i, j]) >= threshold - 1e-12:
                parent[find(j)] = find(i)
    groups = {}
    for i in range(d):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def time_windows(T: int, window: int) -> list:
    """1-indexed inclusive (start, end) blocks tiling 1..T; the last may be short."""
    if window < 1:
        raise ContractError("window must be positive")
    return [(s, min(s + window - 1, T)) for s in range(1, T + 1, window)]


@dataclass
class ImportanceTable:
    delta: np.ndarray  # (groups, windows): baseline AUROC - permuted AUROC
    groups: list
    windows: list
    baseline: float
    window: int
    repeats: int = 1
    names: list = field(default_factory=list)

    def to_csv(self) -> str:
        head = "group," + ",".join(f"t{a}-{b}" for a, b in self.windows)
        rows = [head]
        for g, members in enumerate(self.groups):
            label = "+".join(self.names[i] if self.names else f"x{i}" for i in members)
            rows.append(label + "," + ",".join(repr(float(v)) for v in self.delta[g]))
        return "\n".join(rows) + "\n"


def _class1_auroc(model, X, y) -> float:
    return auroc(aggregate_score(forward(model, X)[..., 1]), y)


def permutation_importance(model: ModelState, dataset, window: int = 12, groups=None, rng: Rng | None = None,
                           repeats: int = 1, permutation_fn=None, names=None) -> ImportanceTable:
    """AUROC drop when one feature group is shuffled across examples inside one time window.

    Within a (group, window) cell a single permutation of examples moves the
    whole block, every feature of the group and every step of the window,
    together. ``permutation_fn(n, rng)`` overrides how permutations are drawn.
    """
    if model.spec.task != "classification":
        raise ContractError("permutation importance needs a classification model")
    X, y = dataset.X, dataset.y
    N, T, d = X.shape
    groups = groups if groups is not None else [[i] for i in range(d)]
    wins = time_windows(T, window)
    rng = rng or Rng(0)
    draw = permutation_fn or (lambda n, g: g.permutation(n))
    baseline = _class1_auroc(model, X, y)
    table = np.zeros((len(groups), len(wins)))
    for gi, members in enumerate(groups):
        cols = np.asarray(members, dtype=np.int64)
        for wi, (a, b) in enumerate(wins):
            drops = []
            for rep in range(repeats):
                perm = np.asarray(draw(N, rng.child(f"g{gi}-w{wi}-r{rep}")))
                Xp = X.copy()
                block = Xp[:, a - 1:b][:, :, cols]
                Xp[:, a - 1:b, cols] = block[perm]
                drops.append(baseline - _class1_auroc(model, Xp, y))
            table[gi, wi] = float(np.mean(drops))
    return ImportanceTable(table, [list(map(int, g)) for g in groups], wins, baseline, window, repeats,
                           list(names) if names else [])
