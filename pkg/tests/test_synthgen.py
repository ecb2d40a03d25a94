import json

import numpy as np
import pytest

from relaxrnn.datapipe import load_dataset
from relaxrnn.errors import ContractError
from relaxrnn.numerics import Rng
from relaxrnn.synthgen import (
    WeightSchedule,
    generate_benchmark,
    generate_task,
    labelize,
    renormalize,
    sample_example,
    sample_schedule,
    sample_weights,
    targets,
    write_task,
)


def triple_loop_targets(X, ws):
    N = X.shape[0]
    y = np.zeros((N, ws.T - ws.l))
    for n in range(N):
        for s, t in enumerate(range(ws.l, ws.T)):
            acc = 0.0
            for i in range(ws.l):
                for j in range(ws.d):
                    acc += ws.w_l[s, i] * X[n, t - ws.l + i, j] * ws.w_d[s, j]
            y[n, s] = acc
    return y


def tiny_schedule():
    return WeightSchedule(np.array([[0.5, 0.5]]), np.array([[0.25, 0.75]]), 0.0, T=3, l=2, d=2)


class TestTargets:
    def test_tiny_case(self):
        X = np.array([[[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]]])
        assert targets(X, tiny_schedule())[0, 0] == 0.875

    def test_all_zero_inputs(self):
        ws = sample_schedule(30, 3, 10, 0.2, Rng(0))
        assert np.all(targets(np.zeros((2, 30, 3)), ws) == 0)

    @pytest.mark.parametrize("delta", [0.0, 0.4])
    def test_matches_triple_loop(self, delta):
        task = generate_task(delta, 0, 40, 10, 10, seed=3)
        for ds in task.splits.values():
            assert np.max(np.abs(ds.y - triple_loop_targets(ds.X, task.schedule))) <= 1e-12

    def test_sample_example_shapes(self):
        ws = sample_schedule(30, 3, 10, 0.1, Rng(1))
        x, y = sample_example(30, 3, 10, ws, Rng(2))
        assert x.shape == (30, 3) and y.shape == (20,)
        with pytest.raises(ContractError):
            sample_example(31, 3, 10, ws, Rng(2))


class TestWeights:
    def test_renormalize_floor(self):
        w = renormalize([0.0, -1.0, 2.0])
        assert w.sum() == pytest.approx(1.0, abs=1e-15) and np.all(w > 0)

    def test_zero_shift_is_constant(self):
        w = sample_weights(30, 10, 3, 0.0, Rng(0))
        assert np.all(w == w[0])

    @pytest.mark.parametrize("delta", [0.1, 0.4])
    def test_rows_on_simplex(self, delta):
        w = sample_weights(30, 10, 10, delta, Rng(5))
        assert w.shape == (20, 10)
        assert np.allclose(w.sum(1), 1.0, atol=1e-14) and np.all(w > 0)

    def test_bad_arguments(self):
        with pytest.raises(ContractError):
            sample_weights(10, 10, 3, 0.1, Rng(0))
        with pytest.raises(ContractError):
            sample_weights(30, 10, 3, -0.1, Rng(0))


class TestInputs:
    def test_sparsity_and_range(self):
        X = generate_task(0.0, 0, 500, 1, 1, seed=0).splits["train"].X
        frac = np.mean(X != 0)
        assert 0.08 < frac < 0.12
        assert X.min() >= 0 and X.max() <= 100


class TestDeterminism:
    def test_task_independent_of_sweep(self):
        alone = generate_task(0.3, 2, 20, 5, 5, seed=7)
        swept = [t for t in generate_benchmark((0.1, 0.3), 3, 20, 5, 5, rng=7) if t.name == alone.name][0]
        assert np.array_equal(alone.splits["test"].X, swept.splits["test"].X)
        assert np.array_equal(alone.splits["test"].y, swept.splits["test"].y)

    def test_seed_changes_data(self):
        a = generate_task(0.3, 0, 20, 5, 5, seed=1).splits["train"].X
        b = generate_task(0.3, 0, 20, 5, 5, seed=2).splits["train"].X
        assert not np.array_equal(a, b)

    def test_splits_share_schedule_not_data(self):
        s = generate_task(0.1, 0, 20, 20, 20, seed=0).splits
        assert not np.array_equal(s["train"].X, s["val"].X)


class TestStandardize:
    def test_train_statistics(self):
        raw = generate_task(0.2, 0, 200, 50, 50, seed=0)
        std = generate_task(0.2, 0, 200, 50, 50, seed=0, standardize=True)
        X = std.splits["train"].X
        assert np.allclose(X.mean(axis=(0, 1)), 0, atol=1e-12) and np.allclose(X.std(axis=(0, 1)), 1, atol=1e-12)
        mean, scale = (np.array(std.splits["val"].metadata[k]) for k in ("feature_mean", "feature_scale"))
        assert np.allclose(std.splits["val"].X * scale + mean, raw.splits["val"].X, atol=1e-12)
        assert np.array_equal(std.splits["test"].y, raw.splits["test"].y)


class TestLabelize:
    def test_median_threshold(self):
        splits = labelize(generate_task(0.3, 0, 101, 50, 50, seed=0).splits)
        train = splits["train"]
        assert train.task == "classification" and set(np.unique(train.y)) <= {0, 1}
        assert abs(train.y.mean() - 0.5) < 0.05
        assert train.metadata["threshold"] == splits["test"].metadata["threshold"]

    def test_empty_train(self):
        with pytest.raises(ContractError):
            labelize(generate_task(0.3, 0, 0, 5, 5, seed=0).splits)


def test_write_task(tmp_path):
    task = generate_task(0.1, 1, 10, 5, 5, seed=0)
    paths = write_task(task, tmp_path, classify=True)
    assert [p.name for p in paths] == ["train.jsonl", "val.jsonl", "test.jsonl"]
    meta = json.loads((tmp_path / task.name / "meta.json").read_text())
    assert meta["sizes"] == {"train": 10, "val": 5, "test": 5} and meta["task"] == "classification"
    assert load_dataset(paths[0]).task == "classification"


class TestWorkedValues:
    def test_renormalize_clamps_then_scales(self):
        w = renormalize([0.3, -0.1, 0.8])
        total = 0.3 + 1e-6 + 0.8
        assert np.allclose(w, [0.3 / total, 1e-6 / total, 0.8 / total], rtol=0, atol=1e-15)
        assert abs(w[0] - 0.2727270) < 1e-6 and abs(w[2] - 0.7272721) < 1e-6
        assert np.array_equal(renormalize([-1.0, -1.0]), [0.5, 0.5])

    def test_larger_shift_moves_further(self):
        def mean_step(delta):
            steps = [np.abs(np.diff(sample_weights(30, 10, 10, delta, Rng(s)), axis=0)).sum(1).mean()
                     for s in range(1000)]
            return np.mean(steps)

        assert mean_step(0.4) > mean_step(0.1)

    def test_full_benchmark_size(self):
        tasks = generate_benchmark(n_train=2, n_val=2, n_test=2, rng=0)
        assert len(tasks) == 25 and len({t.name for t in tasks}) == 25

    def test_empty_train_split(self):
        task = generate_task(0.2, 0, 0, 3, 3, seed=0)
        assert len(task.splits["train"]) == 0 and len(task.splits["val"]) == 3
