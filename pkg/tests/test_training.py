import math

import numpy as np
import pytest

from relaxrnn.errors import ContractError, NumericError
from relaxrnn.models import ModelSpec, forward, init_model, mixing_table
from relaxrnn.numerics import Rng, grad_check, softmax
from relaxrnn.synthgen import generate_task, labelize
from relaxrnn.training import (
    TrainConfig,
    mean_adjacent_similarity,
    mse_loss,
    objective,
    random_search,
    sample_configs,
    smoothness_penalty,
    train,
    xent_target_replication,
)


def small_splits(classify=False, n=60, seed=0):
    splits = generate_task(0.1, 0, n, 30, 30, seed=seed, T=8, l=3, standardize=True).splits
    return labelize(splits) if classify else splits


class TestLosses:
    def test_mse(self):
        assert mse_loss([1.0, 2.0], [1.0, 4.0]) == 2.0

    def test_mse_mask(self):
        pred, target = np.array([[1.0, 5.0, 3.0]]), np.array([[0.0, 0.0, 1.0]])
        assert mse_loss(pred, target, mask=[False, False, True]) == 4.0
        with pytest.raises(ContractError):
            mse_loss(pred, target, mask=[False] * 3)

    def test_xent_uniform(self):
        p = np.full((3, 2), 0.5)
        assert abs(xent_target_replication(p, 1) - math.log(2)) <= 1e-15

    def test_xent_step_weights(self):
        p = np.array([[0.5, 0.5], [0.0, 1.0]])
        assert abs(xent_target_replication(p, 1, step_weights=[1.0, 0.0]) - math.log(2)) <= 1e-15
        assert xent_target_replication(p, 1, step_weights=[0.0, 3.0]) == 0.0

    def test_xent_floor(self):
        assert math.isfinite(xent_target_replication(np.array([[1.0, 0.0]]), 1))


class TestSmoothness:
    def test_identical_rows(self):
        lam = np.tile([0.2, 0.8], (5, 1))
        assert abs(smoothness_penalty(lam) - 4.0) <= 1e-14
        assert abs(mean_adjacent_similarity(lam) - 1.0) <= 1e-15

    def test_orthogonal_rows(self):
        assert smoothness_penalty(np.array([[1.0, 0.0], [0.0, 1.0]])) == 0.0

    def test_gradient(self):
        lam = Rng(0).uniform(0.1, 1.0, size=(6, 3))

        def f(p):
            val, g = smoothness_penalty(p["lam"], return_grad=True)
            return val, {"lam": g}

        res = grad_check(f, {"lam": lam})
        assert res.max_rel_error <= 1e-7

    def test_errors(self):
        with pytest.raises(ContractError):
            smoothness_penalty(np.ones((1, 2)))
        with pytest.raises(ContractError):
            smoothness_penalty(np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestObjective:
    def test_alpha_subtracts_penalty(self):
        spec = ModelSpec("mix_lstm", 3, 4, 8, K=2, task="classification", seed=1)
        state = init_model(spec)
        tr = small_splits(True)["train"]
        base, _ = objective(state, tr.X, tr.y)
        reg, _ = objective(state, tr.X, tr.y, alpha=0.5)
        assert abs((base - reg) - 0.5 * smoothness_penalty(mixing_table(state))) <= 1e-12

    def test_regression_ignores_warmup_steps(self):
        spec = ModelSpec("lstm", 3, 4, 8, seed=0)
        state = init_model(spec)
        tr = small_splits()["train"]
        loss, _ = objective(state, tr.X, tr.y, target_offset=3)
        assert abs(loss - mse_loss(forward(state, tr.X)[:, 3:], tr.y)) <= 1e-12


class TestTrain:
    def test_loss_decreases_and_best_epoch_restored(self):
        splits = small_splits()
        spec = ModelSpec("lstm", 3, 6, 8, seed=0)
        state, hist = train(spec, splits["train"], splits["val"], TrainConfig(lr=0.01, max_epochs=8, patience=8))
        assert hist.epochs[-1]["train_loss"] < hist.epochs[0]["train_loss"]
        best = min(e["val_metric"] for e in hist.epochs)
        assert hist.best_val == best and hist.epochs[hist.best_epoch - 1]["val_metric"] == best
        assert abs(mse_loss(forward(state, splits["val"].X)[:, 3:], splits["val"].y) - best) <= 1e-12

    def test_early_stopping(self):
        splits = small_splits()
        calls = iter([5.0, 4.0, 4.5, 4.2, 4.1, 9.0])
        _, hist = train(ModelSpec("nn", 3, 2, 8), splits["train"], splits["val"],
                        TrainConfig(max_epochs=50, patience=3), evaluate_fn=lambda s: next(calls))
        assert len(hist.epochs) == 5 and hist.best_epoch == 2 and "3 epochs" in hist.stop_reason

    def test_auroc_selection_prefers_higher(self):
        splits = small_splits(True)
        calls = iter([0.6, 0.7, 0.65])
        _, hist = train(ModelSpec("nn", 3, 2, 8, task="classification"), splits["train"], splits["val"],
                        TrainConfig(max_epochs=3, patience=5), evaluate_fn=lambda s: next(calls))
        assert hist.best_epoch == 2 and hist.stop_reason == "max_epochs reached"

    def test_bit_identical_rerun(self):
        splits = small_splits(True)
        spec = ModelSpec("mix_lstm", 3, 4, 8, K=2, task="classification", seed=4)
        cfg = TrainConfig(lr=0.01, max_epochs=3, seed=7, alpha=0.1)
        a, ha = train(spec, splits["train"], splits["val"], cfg)
        b, hb = train(spec, splits["train"], splits["val"], cfg)
        assert ha.to_dict() == hb.to_dict()
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_simplex_every_step(self):
        splits = small_splits(True)
        spec = ModelSpec("mix_lstm", 3, 4, 8, K=3, task="classification", seed=2)
        rows = []

        def cb(state, step):
            lam = softmax(state.params["logits"], axis=1)
            rows.append((np.max(np.abs(lam.sum(1) - 1)), lam.min()))

        train(spec, splits["train"], splits["val"], TrainConfig(lr=0.05, batch_size=10, max_epochs=2), callback=cb)
        assert len(rows) == 12
        assert max(r[0] for r in rows) <= 1e-12 and min(r[1] for r in rows) > 0

    def test_clip_norm(self):
        splits = small_splits()
        state, _ = train(ModelSpec("lstm", 3, 4, 8), splits["train"], splits["val"],
                         TrainConfig(max_epochs=1, clip_norm=1e-9, lr=1e-3))
        assert np.all(np.isfinite(forward(state, splits["val"].X)))

    def test_task_mismatch(self):
        splits = small_splits(True)
        with pytest.raises(ContractError):
            train(ModelSpec("lstm", 3, 4, 8), splits["train"], splits["val"])

    def test_non_finite_validation(self):
        splits = small_splits()
        with pytest.raises(NumericError):
            train(ModelSpec("nn", 3, 2, 8), splits["train"], splits["val"], evaluate_fn=lambda s: float("nan"))

    @pytest.mark.parametrize("kwargs", [dict(batch_size=0), dict(alpha=-1.0), dict(metric="val_loss")])
    def test_config_validation(self, kwargs):
        with pytest.raises(ContractError):
            TrainConfig(**kwargs)


class TestRandomSearch:
    def test_configs_deterministic(self):
        space = {"hidden": [2, 4, 8], "lr": [0.1, 0.01]}
        a = sample_configs(space, 5, Rng(3))
        assert a == sample_configs(space, 5, Rng(3)) and all(c["hidden"] in (2, 4, 8) for c in a)

    def test_leaderboard(self):
        splits = small_splits(True)
        spec = ModelSpec("lstm", 3, 4, 8, task="classification")
        champ, board = random_search(spec, {}, 3, TrainConfig(max_epochs=2), splits["train"], splits["val"], Rng(0),
                                     configs=[{"hidden": 2}, {"hidden": 3}, {"bogus": 1}])
        assert [e["status"] for e in board] == ["ok", "ok", "failed"]
        assert board[0]["val_metric"] >= board[1]["val_metric"] and board[0]["rank"] == 1
        assert champ.spec.hidden == board[0]["config"]["hidden"]

    def test_empty_space(self):
        with pytest.raises(ContractError):
            sample_configs({}, 3, Rng(0))
