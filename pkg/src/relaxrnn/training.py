"""Losses, the smoothness-regularized objective, mini-batch Adam with early
stopping, and random hyperparameter search."""

from __future__ import annotations

import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datapipe import SequenceDataset
from .errors import ContractError, NumericError, RelaxError
from .evaluation import aggregate_score, auroc
from .models import ModelSpec, ModelState, backward, forward, forward_raw, init_model, mixing_table
from .numerics import AdamState, Rng, adam_step, softmax, softmax_backward

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


# -- losses ----------------------------------------------------------------------


def mse_loss(pred, target, mask=None, return_grad: bool = False):
    """Mean squared error over the masked entries.

    ``mask`` broadcasts against ``pred``; a length-T boolean vector selects
    time steps for every example.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"prediction shape {pred.shape} != target shape {target.shape}")
    m = np.ones(pred.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    count = int(m.sum())
    if count == 0:
        raise ContractError("MSE over an empty mask")
    diff = np.where(m, pred - target, 0.0)
    loss = float(np.sum(diff**2) / count)
    if return_grad:
        return loss, 2.0 * diff / count
    return loss


def xent_target_replication(pred_probs, label, step_weights=None) -> float:
    """Mean over steps (and examples) of -log p_t(label), every step carrying
    the sequence label."""
    p = np.asarray(pred_probs, dtype=np.float64)
    if p.ndim == 2:
        p = p[None]
    labels = np.broadcast_to(np.asarray(label, dtype=np.int64), p.shape[:1])
    true_p = np.take_along_axis(p, labels[:, None, None], axis=2)[..., 0]
    nll = -np.log(np.maximum(true_p, PROB_FLOOR))
    w = _step_weights(step_weights, p.shape[1])
    return float(np.mean(nll @ w))


def _step_weights(step_weights, T):
    if step_weights is None:
        return np.full(T, 1.0 / T)
    w = np.asarray(step_weights, dtype=np.float64)
    if w.shape != (T,) or np.any(w < 0) or w.sum() <= 0:
        raise ContractError("step weights must be T nonnegative numbers with a positive sum")
    return w / w.sum()


def _xent_from_logits(logits, labels, step_weights=None):
    """Loss and its gradient w.r.t. the per-step two-way logits."""
    probs = softmax(logits, axis=-1)
    N, T, _ = logits.shape
    true_p = probs[np.arange(N), :, labels]  # (N, T)
    w = _step_weights(step_weights, T)
    loss = float(np.mean(-np.log(np.maximum(true_p, PROB_FLOOR)) @ w))
    onehot = np.zeros_like(probs)
    onehot[np.arange(N), :, labels] = 1.0
    scale = (w / N)[None, :, None] * (true_p > PROB_FLOOR)[..., None]
    return loss, (probs - onehot) * scale


def smoothness_penalty(lam, return_grad: bool = False):
    """Sum of cosine similarities between consecutive rows of ``lam``."""
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim != 2 or lam.shape[0] < 2:
        raise ContractError("smoothness penalty needs a T x K table with T >= 2")
    norms = np.linalg.norm(lam, axis=1)
    if np.any(norms == 0):
        raise ContractError("zero-norm row in mixing coefficients")
    a, b = lam[:-1], lam[1:]
    na, nb = norms[:-1, None], norms[1:, None]
    s = np.sum(a * b, axis=1) / (na[:, 0] * nb[:, 0])
    total = float(s.sum())
    if not return_grad:
        return total
    g = np.zeros_like(lam)
    g[:-1] += b / (na * nb) - s[:, None] * a / na**2
    g[1:] += a / (na * nb) - s[:, None] * b / nb**2
    return total, g


def mean_adjacent_similarity(lam) -> float:
    return smoothness_penalty(lam) / (len(lam) - 1)


# -- objective ---------------------------------------------------------------------


def _targets_for(state: ModelState, ds: SequenceDataset):
    spec = state.spec
    if ds.task != spec.task:
        raise ContractError(f"dataset task {ds.task!r} does not match model task {spec.task!r}")
    if (ds.T, ds.d) != (spec.T, spec.input_dim):
        raise ContractError(f"dataset (T={ds.T}, d={ds.d}) does not match model (T={spec.T}, d={spec.input_dim})")
    if spec.task == "regression":
        off = ds.target_offset
        if ds.y.shape[1] != spec.T - off:
            raise ContractError(f"expected {spec.T - off} targets per example, got {ds.y.shape[1]}")
    return ds


def objective(state: ModelState, X, y, alpha: float = 0.0, target_offset: int = 0,
              step_weights=None, need_input_grad: bool = False):
    """Regularized loss ``L - alpha * sum_t s_t`` and its parameter gradients.

    ``y`` is ``(N, T - target_offset)`` for regression (only those steps are
    scored) or ``(N,)`` labels for classification.
    """
    spec = state.spec
    out, cache = forward_raw(state, X, keep_cache=True)
    if spec.task == "regression":
        pred = out[..., 0]
        mask = np.arange(spec.T) >= target_offset
        full = np.zeros_like(pred)
        full[:, target_offset:] = y
        loss, dpred = mse_loss(pred, full, mask, return_grad=True)
        d_out = dpred[..., None]
    else:
        loss, d_out = _xent_from_logits(out, np.asarray(y, dtype=np.int64), step_weights)
    grads, dX = backward(state, cache, d_out)
    if alpha and spec.kind == "mix_lstm":
        lam = softmax(state.params["logits"], axis=1)
        pen, dlam = smoothness_penalty(lam, return_grad=True)
        loss -= alpha * pen
        grads["logits"] = grads["logits"] - alpha * softmax_backward(lam, dlam, axis=1)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    return (loss, grads, dX) if need_input_grad else (loss, grads)


# -- training loop -------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 100
    max_epochs: int = 30
    patience: int = 5
    metric: str | None = None  # "val_mse" | "val_auroc"; inferred from the task when None
    alpha: float = 0.0
    seed: int = 0
    clip_norm: float | None = None
    step_weights: list | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ContractError("batch_size, max_epochs and patience must be positive")
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ContractError("alpha must be finite and nonnegative")
        if self.metric not in (None, "val_mse", "val_auroc"):
            raise ContractError(f"unknown selection metric {self.metric!r}")

    def resolved_metric(self, task: str) -> str:
        return self.metric or ("val_mse" if task == "regression" else "val_auroc")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)  # dicts: epoch, train_loss, val_metric
    wall_times: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float | None = None
    stop_reason: str = ""
    metric: str = ""
    lr: float = 1e-3
    patience: int = 5
    steps: int = 0

    def to_dict(self, include_times: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not include_times:
            d.pop("wall_times")
        return d


def validation_metric(state: ModelState, ds: SequenceDataset, metric: str) -> float:
    pred = forward(state, ds.X)
    if metric == "val_mse":
        return mse_loss(pred[:, ds.target_offset:], ds.y)
    return auroc(aggregate_score(pred[..., 1]), ds.y)


def _better(a, b, metric):
    if b is None:
        return True
    return a < b if metric == "val_mse" else a > b


def assert_simplex(state: ModelState, tol: float = 1e-12) -> None:
    lam = mixing_table(state)
    if np.any(np.abs(lam.sum(axis=1) - 1.0) > tol) or np.any(lam <= 0):
        raise NumericError("mixing coefficients left the simplex")


def train(spec: ModelSpec, train_ds: SequenceDataset, val_ds: SequenceDataset, cfg: TrainConfig | None = None,
          init_state: ModelState | None = None, evaluate_fn=None, callback=None):
    """Mini-batch Adam with early stopping on the validation metric.

    Returns the parameters of the best validation epoch (earliest on ties)
    and the history. ``evaluate_fn(state) -> float`` replaces the built-in
    validation metric; ``callback(state, step)`` runs after every optimizer
    step.
    """
    cfg = cfg or TrainConfig()
    metric = cfg.resolved_metric(spec.task)
    if len(train_ds) == 0 or (evaluate_fn is None and len(val_ds) == 0):
        raise ContractError("training and validation sets must be nonempty")
    state = init_state.copy() if init_state is not None else init_model(spec)
    _targets_for(state, train_ds)
    if evaluate_fn is None:
        _targets_for(state, val_ds)
    evaluate_fn = evaluate_fn or (lambda s: validation_metric(s, val_ds, metric))
    opt = AdamState(lr=cfg.lr)
    rng = Rng(cfg.seed).child("shuffle")
    hist = TrainHistory(metric=metric, lr=cfg.lr, patience=cfg.patience)
    best_params, since_best = None, 0
    N = len(train_ds)
    is_mix = spec.kind == "mix_lstm"
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.child(f"epoch{epoch}").permutation(N)
        total = 0.0
        for b, start in enumerate(range(0, N, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                loss, grads = objective(state, train_ds.X[idx], train_ds.y[idx], cfg.alpha,
                                        train_ds.target_offset, cfg.step_weights)
            except NumericError as e:
                raise NumericError(f"epoch {epoch}, batch {b + 1}: {e}") from e
            if cfg.clip_norm is not None:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > cfg.clip_norm:
                    grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
            adam_step(opt, state.params, grads)
            hist.steps += 1
            if is_mix:
                assert_simplex(state)
            if callback is not None:
                callback(state, hist.steps)
            total += loss * len(idx)
        val = float(evaluate_fn(state))
        if not np.isfinite(val):
            raise NumericError(f"epoch {epoch}: non-finite validation metric")
        hist.epochs.append({"epoch": epoch, "train_loss": total / N, "val_metric": val})
        hist.wall_times.append(time.perf_counter() - t0)
        if _better(val, hist.best_val, metric):
            hist.best_val, hist.best_epoch, since_best = val, epoch, 0
            best_params = {k: v.copy() for k, v in state.params.items()}
        else:
            since_best += 1
        log.debug("epoch %d train_loss=%.6g %s=%.6g", epoch, total / N, metric, val)
        if since_best >= cfg.patience:
            hist.stop_reason = f"no improvement for {cfg.patience} epochs"
            break
    else:
        hist.stop_reason = "max_epochs reached"
    state.params = best_params
    state.meta.update(epochs_run=len(hist.epochs), best_epoch=hist.best_epoch, best_val=hist.best_val,
                      metric=metric, train_seed=cfg.seed)
    return state, hist


# -- random search ---------------------------------------------------------------------

SYNTHETIC_HIDDEN = (100, 150, 300, 500, 700, 900, 1100)


def sample_configs(space: dict, trials: int, rng: Rng) -> list:
    """``trials`` draws, each picking one value per key uniformly."""
    if trials < 1 or not space:
        raise ContractError("random search needs trials >= 1 and a nonempty space")
    out = []
    for i in range(trials):
        g = rng.child(f"config{i}")
        out.append({k: v[int(g.integers(0, len(v)))] for k, v in sorted(space.items())})
    return out


def _apply(spec: ModelSpec, cfg: TrainConfig, overrides: dict, seed: int):
    spec_fields = {f.name for f in dataclasses.fields(ModelSpec)}
    cfg_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(overrides) - spec_fields - cfg_fields
    if unknown:
        raise ContractError(f"unknown hyperparameter(s): {', '.join(sorted(unknown))}")
    s = dataclasses.replace(spec, seed=seed, **{k: v for k, v in overrides.items() if k in spec_fields})
    c = dataclasses.replace(cfg, seed=seed, **{k: v for k, v in overrides.items() if k in cfg_fields})
    return s, c


def random_search(spec: ModelSpec, space: dict, trials: int, base_cfg: TrainConfig, train_ds, val_ds,
                  rng: Rng, configs: list | None = None, jobs: int = 1):
    """Train one model per sampled configuration and rank them on validation.

    Failed trials stay on the leaderboard with their error. Returns
    ``(champion_state, leaderboard)``; the champion is None if every trial failed.
    """
    configs = configs if configs is not None else sample_configs(space, trials, rng)

    def run(i):
        seed = rng.child_seed(f"trial{i}")
        entry = {"trial": i, "config": configs[i], "seed": seed}
        try:
            s, c = _apply(spec, base_cfg, configs[i], seed)
            state, hist = train(s, train_ds, val_ds, c)
        except RelaxError as e:
            return dict(entry, status="failed", error=f"{type(e).__name__}: {e}"), None
        return dict(entry, status="ok", val_metric=hist.best_val, best_epoch=hist.best_epoch,
                    metric=hist.metric, epochs_run=len(hist.epochs)), (state, hist)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, range(len(configs))))
    else:
        results = [run(i) for i in range(len(configs))]
    ok = [(e, r) for e, r in results if r is not None]
    failed = [e for e, r in results if r is None]
    if ok:
        metric = ok[0][0]["metric"]
        sign = 1.0 if metric == "val_mse" else -1.0
        ok.sort(key=lambda er: (sign * er[0]["val_metric"], er[0]["trial"]))
    board = [dict(e, rank=k + 1) for k, (e, _) in enumerate(ok)] + failed
    champion = ok[0][1][0] if ok else None
    return champion, board
