import numpy as np
import pytest
from scipy.integrate import trapezoid

from relaxrnn.errors import ContractError
from relaxrnn.evaluation import (
    EvalReport,
    aggregate_score,
    aupr,
    auroc,
    bootstrap_ci,
    curves_csv,
    evaluate,
    evaluate_regression,
    pr_curve,
    roc_curve,
    score_report,
)
from relaxrnn.models import ModelSpec, init_model
from relaxrnn.numerics import Rng
from relaxrnn.synthgen import generate_task, labelize


def brute_auroc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def brute_ap(s, y):
    # precision at each distinct threshold, weighted by the recall gained there
    P = y.sum()
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(s), reverse=True):
        sel = s >= t
        tp = float(np.sum(y[sel]))
        recall = tp / P
        ap += (recall - prev_recall) * tp / sel.sum()
        prev_recall = recall
    return ap


def random_instances(count, seed=0):
    r = Rng(seed)
    out = []
    while len(out) < count:
        n = int(r.integers(2, 51))
        s = np.round(r.uniform(size=n), int(r.integers(1, 3)))  # coarse rounding forces ties
        y = r.integers(0, 2, size=n)
        if 0 < y.sum() < n:
            out.append((s, y))
    return out


class TestAuroc:
    def test_worked_example(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_perfect_and_reversed(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_all_tied(self):
        assert auroc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_brute_force(self):
        for s, y in random_instances(200):
            assert abs(auroc(s, y) - brute_auroc(s, y)) <= 1e-12

    @pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0, 0], [0, 2, 1]])
    def test_degenerate(self, labels):
        with pytest.raises(ContractError):
            auroc([0.1, 0.2, 0.3], labels)


class TestAupr:
    def test_worked_example(self):
        assert abs(aupr([0.8, 0.4, 0.35, 0.1], [1, 0, 1, 0]) - 0.8333333333333333) <= 1e-15

    def test_perfect(self):
        assert aupr([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0

    def test_brute_force(self):
        for s, y in random_instances(200, seed=1):
            assert abs(aupr(s, y) - brute_ap(s, y)) <= 1e-12

    def test_no_positives(self):
        with pytest.raises(ContractError):
            aupr([0.1, 0.2], [0, 0])


class TestCurves:
    def test_roc_endpoints_and_area(self):
        s, y = random_instances(1, seed=3)[0]
        thr, fpr, tpr = roc_curve(s, y)
        assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0) and thr[0] == np.inf
        assert abs(trapezoid(tpr, fpr) - auroc(s, y)) <= 1e-12

    def test_pr_recall_reaches_one(self):
        _, recall, precision = pr_curve([0.3, 0.2, 0.1], [0, 1, 0])
        assert list(recall) == [0.0, 1.0, 1.0] and list(precision) == [0.0, 0.5, 1 / 3]

    def test_csv(self):
        rep = score_report([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1], B=0)
        roc, pr = curves_csv(rep)
        assert roc.splitlines()[0] == "threshold,fpr,tpr" and roc.splitlines()[1].startswith("inf,")
        assert len(pr.splitlines()) == 5


class TestAggregate:
    def test_max_over_time(self):
        assert aggregate_score([0.1, 0.9, 0.3]) == 0.9
        assert np.array_equal(aggregate_score([[0.1, 0.2], [0.5, 0.4]]), [0.2, 0.5])

    def test_threshold_equivalence(self):
        per_step = Rng(0).uniform(size=(20, 7))
        for thr in (0.3, 0.8, 0.95):
            assert np.array_equal(aggregate_score(per_step) > thr, np.any(per_step > thr, axis=1))

    def test_empty(self):
        with pytest.raises(ContractError):
            aggregate_score(np.zeros((3, 0)))


class TestBootstrap:
    def test_deterministic_and_brackets_estimate(self):
        s, y = random_instances(1, seed=5)[0]
        a = bootstrap_ci(s, y, "auroc", B=300, rng=Rng(1))
        assert a == bootstrap_ci(s, y, "auroc", B=300, rng=Rng(1))
        assert a[0] <= auroc(s, y) <= a[1]

    def test_bad_arguments(self):
        with pytest.raises(ContractError):
            bootstrap_ci([0.1, 0.2], [0, 1], B=0)
        with pytest.raises(ContractError):
            bootstrap_ci([0.1, 0.2], [0, 1], level=1.0)

    def test_single_class_resamples_skipped(self):
        lo, hi = bootstrap_ci([0.1, 0.9], [0, 1], B=50, rng=Rng(0))
        assert lo == hi == 1.0


class TestEvaluate:
    def _setup(self):
        splits = labelize(generate_task(0.1, 0, 50, 10, 40, seed=0, T=12, l=4).splits)
        state = init_model(ModelSpec("lstm", 3, 4, 12, task="classification", seed=1))
        return state, splits["test"]

    def test_report(self):
        state, test = self._setup()
        rep = evaluate(state, test, B=50)
        assert rep.n_test == 40 and rep.auroc_ci[0] <= rep.auroc <= rep.auroc_ci[1]
        assert EvalReport.from_json(rep.to_json()) == rep

    def test_rerun_identical(self):
        state, test = self._setup()
        assert evaluate(state, test, B=30, rng=4).to_json() == evaluate(state, test, B=30, rng=4).to_json()

    def test_regression_model_rejected(self):
        _, test = self._setup()
        with pytest.raises(ContractError):
            evaluate(init_model(ModelSpec("lstm", 3, 4, 12)), test)

    def test_regression_mse(self):
        task = generate_task(0.1, 0, 5, 5, 20, seed=0, T=12, l=4)
        state = init_model(ModelSpec("lstm", 3, 4, 12, seed=1))
        from relaxrnn.models import forward

        test = task.splits["test"]
        ref = float(np.mean((forward(state, test.X)[:, 4:] - test.y) ** 2))
        out = evaluate_regression(state, test, B=40)
        assert out["mse"] == ref and out["mse_ci"][0] <= ref <= out["mse_ci"][1]
