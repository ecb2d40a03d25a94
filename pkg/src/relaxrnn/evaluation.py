"""Max-over-time scoring, AUROC / AUPR with curves, and percentile bootstrap
confidence intervals."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError
from .numerics import Rng

log = logging.getLogger(__name__)


def aggregate_score(per_step) -> float | np.ndarray:
    """Max over the last axis: a threshold on the max fires exactly when at
    least one step's score exceeds it."""
    a = np.asarray(per_step, dtype=np.float64)
    if a.size == 0 or a.shape[-1] == 0:
        raise ContractError("cannot aggregate an empty score sequence")
    return a.max(axis=-1)


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ContractError(f"{s.size} scores for {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise ContractError("labels must be 0/1")
    return s, y.astype(np.int64)


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate: P(score_pos > score_neg) with ties counted 1/2."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUROC undefined: only one class present")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(scores, labels):
    """(thresholds, fpr, tpr) sweeping every distinct score, starting at (0, 0)."""
    s, y = _check_binary(scores, labels)
    thr, tp, fp = _threshold_counts(s, y)
    P, N = y.sum(), len(y) - y.sum()
    fpr = np.concatenate([[0.0], fp / N if N else np.zeros_like(fp, dtype=float)])
    tpr = np.concatenate([[0.0], tp / P if P else np.zeros_like(tp, dtype=float)])
    return np.concatenate([[np.inf], thr]), fpr, tpr


def _threshold_counts(s, y):
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last_of_group].astype(np.float64)
    fp = (last_of_group + 1) - tp
    return s[last_of_group], tp, fp


def pr_curve(scores, labels):
    """(thresholds, recall, precision) over descending distinct thresholds."""
    s, y = _check_binary(scores, labels)
    thr, tp, fp = _threshold_counts(s, y)
    P = y.sum()
    if P == 0:
        raise ContractError("precision-recall undefined: no positive examples")
    return thr, tp / P, tp / (tp + fp)


def aupr(scores, labels) -> float:
    """Average precision: sum of recall increments times precision."""
    _, recall, precision = pr_curve(scores, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


METRICS = {"auroc": auroc, "aupr": aupr}


def bootstrap_ci(scores, labels, metric: str = "auroc", B: int = 1000, level: float = 0.95,
                 rng: Rng | None = None) -> tuple:
    """Percentile interval of ``metric`` over ``B`` resamples of the examples.

    Resamples that contain a single class are skipped.
    """
    if B < 1 or not 0 < level < 1:
        raise ContractError("bootstrap needs B >= 1 and 0 < level < 1")
    s, y = _check_binary(scores, labels)
    fn = METRICS[metric] if isinstance(metric, str) else metric
    gen = (rng or Rng(0)).child(f"bootstrap-{metric if isinstance(metric, str) else 'custom'}")
    vals = []
    n = len(s)
    for _ in range(B):
        idx = gen.integers(0, n, size=n)
        try:
            vals.append(fn(s[idx], y[idx]))
        except ContractError:
            continue
    if not vals:
        raise ContractError("every bootstrap resample was degenerate")
    if len(vals) < B:
        log.info("bootstrap: skipped %d single-class resamples of %d", B - len(vals), B)
    tail = (1.0 - level) / 2.0
    lo, hi = np.percentile(vals, [100 * tail, 100 * (1 - tail)])
    return float(lo), float(hi)


def bootstrap_mean_ci(values, B: int = 1000, level: float = 0.95, rng: Rng | None = None) -> tuple:
    """Percentile interval for the mean of per-example values (e.g. squared errors)."""
    v = np.asarray(values, dtype=np.float64)
    gen = (rng or Rng(0)).child("bootstrap-mean")
    means = np.array([v[gen.integers(0, len(v), size=len(v))].mean() for _ in range(B)])
    tail = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100 * tail, 100 * (1 - tail)])
    return float(lo), float(hi)


@dataclass
class EvalReport:
    auroc: float
    aupr: float
    auroc_ci: list | None
    aupr_ci: list | None
    B: int
    n_test: int
    seed: int
    roc: dict = field(default_factory=dict)  # threshold / fpr / tpr lists
    pr: dict = field(default_factory=dict)  # threshold / recall / precision lists
    level: float = 0.95

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def to_json(self) -> str:
        d = self.to_dict()
        d["roc"] = dict(d["roc"], threshold=[_finite_or_str(t) for t in d["roc"].get("threshold", [])])
        return json.dumps(d, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["roc"]["threshold"] = [float(t) for t in d["roc"].get("threshold", [])]
        return cls.from_dict(d)


def _finite_or_str(t):
    return t if np.isfinite(t) else "inf"


def score_report(scores, labels, B: int = 1000, seed: int = 0, level: float = 0.95) -> EvalReport:
    s, y = _check_binary(scores, labels)
    rng = Rng(seed)
    thr, fpr, tpr = roc_curve(s, y)
    pthr, rec, prec = pr_curve(s, y)
    return EvalReport(
        auroc=auroc(s, y), aupr=aupr(s, y),
        auroc_ci=list(bootstrap_ci(s, y, "auroc", B, level, rng)) if B else None,
        aupr_ci=list(bootstrap_ci(s, y, "aupr", B, level, rng)) if B else None,
        B=B, n_test=len(s), seed=seed,
        roc={"threshold": thr.tolist(), "fpr": fpr.tolist(), "tpr": tpr.tolist()},
        pr={"threshold": pthr.tolist(), "recall": rec.tolist(), "precision": prec.tolist()},
        level=level,
    )


def evaluate(model, test, B: int = 1000, rng: Rng | int = 0, level: float = 0.95) -> EvalReport:
    """Forward every test example, take the max class-1 probability over
    time, and report both areas with bootstrap intervals and curves."""
    from .models import forward

    if model.spec.task != "classification":
        raise ContractError("evaluate() needs a classification model; use evaluate_regression")
    probs = forward(model, test.X)[..., 1]
    seed = rng.seed if isinstance(rng, Rng) else int(rng)
    return score_report(aggregate_score(probs), test.y, B, seed, level)


def evaluate_regression(model, test, B: int = 1000, rng: Rng | int = 0, level: float = 0.95) -> dict:
    """Test MSE over the target steps, with a bootstrap interval over examples."""
    from .models import forward

    off = test.target_offset
    err = (forward(model, test.X)[:, off:] - test.y) ** 2
    per_example = err.mean(axis=1)
    seed = rng.seed if isinstance(rng, Rng) else int(rng)
    ci = list(bootstrap_mean_ci(per_example, B, level, Rng(seed))) if B else None
    return {"mse": float(err.mean()), "mse_ci": ci, "B": B, "n_test": len(test), "seed": seed, "level": level}


def curves_csv(report: EvalReport) -> tuple:
    """ROC and PR curves as ``threshold,x,y`` text tables."""
    roc = ["threshold,fpr,tpr"] + [f"{_finite_or_str(t)},{x!r},{y!r}" for t, x, y in
                                   zip(report.roc["threshold"], report.roc["fpr"], report.roc["tpr"])]
    pr = ["threshold,recall,precision"] + [f"{t!r},{x!r},{y!r}" for t, x, y in
                                           zip(report.pr["threshold"], report.pr["recall"], report.pr["precision"])]
    return "\n".join(roc) + "\n", "\n".join(pr) + "\n"
