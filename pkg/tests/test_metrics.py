import math

import numpy as np
import pytest

from cl_consistency.data import CORRUPTIONS, Dataset, load_digits, make_blobs, split_class_il, train_test_split
from cl_consistency.metrics import (MetricsReport, accuracy_from_logits, compute_metrics, ece, forward_transfer,
                                    relative_gains, reliability, robust_accuracy, task_probabilities, top1_accuracy)
from cl_consistency.model import init_mlp
from cl_consistency.trainer import TrainConfig, train_continual


def brute_force_ece(conf, correct, m):
    """Bin each sample on its own, then apply the weighted-gap formula."""
    bins = {}
    for c, ok in zip(conf, correct):
        b = max(1, math.ceil(c * m))
        bins.setdefault(b, []).append((c, ok))
    total = 0.0
    for members in bins.values():
        acc = sum(ok for _, ok in members) / len(members)
        mean_conf = sum(c for c, _ in members) / len(members)
        total += len(members) / len(conf) * abs(acc - mean_conf)
    return 100 * total


class TestEce:
    def test_confident_and_correct(self):
        assert ece([1.0] * 5, [True] * 5) == 0.0

    def test_hand_example(self):
        assert ece([0.8] * 4, [True, True, False, False], 10) == pytest.approx(30.0, abs=1e-12)

    def test_random_sets_match_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 60))
            conf = rng.random(n)
            correct = rng.random(n) < 0.6
            m = int(rng.integers(1, 20))
            assert ece(conf, correct, m) == pytest.approx(brute_force_ece(conf.tolist(), correct.tolist(), m), abs=1e-12)

    def test_edge_bins(self):
        # 0.1 belongs to bin 1 under the ceiling convention, 0 joins it too
        rep = reliability([0.0, 0.1, 0.1000001, 1.0], [False, True, True, True], 10)
        assert rep.counts[0] == 2 and rep.counts[1] == 1 and rep.counts[9] == 1
        assert sum(rep.counts) == 4

    def test_single_bin_identity(self):
        rng = np.random.default_rng(1)
        conf = rng.random(100)
        correct = rng.random(100) < 0.3
        assert ece(conf, correct, 1) == pytest.approx(100 * abs(correct.mean() - conf.mean()), abs=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        conf, correct = rng.random(50), rng.random(50) < 0.5
        perm = rng.permutation(50)
        assert ece(conf[perm], correct[perm]) == pytest.approx(ece(conf, correct), abs=1e-12)

    def test_calibrated_synthetic_set(self):
        # each bin's accuracy equals its confidence exactly
        conf = [0.25] * 4 + [0.5] * 2 + [0.75] * 4
        correct = [1, 0, 0, 0, 1, 0, 1, 1, 1, 0]
        assert ece(conf, correct, 4) == pytest.approx(0.0, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            ece([1.2], [True])
        with pytest.raises(ValueError):
            ece([0.5, 0.5], [True])
        with pytest.raises(ValueError):
            ece([0.5], [True], 0)

    def test_csv_export(self, tmp_path):
        rep = reliability([0.95, 0.15], [True, False], 10)
        rep.to_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0].startswith("bin,lower,upper,count")
        assert len(lines) == 11 and lines[10].split(",")[3] == "1"


class _Fixed:
    """Stand-in model returning precomputed logits."""

    def __init__(self, fn):
        self.fn = fn

    def logits(self, x):
        return self.fn(np.asarray(x))


class TestTop1:
    def test_perfect(self):
        data = Dataset(np.eye(3), [0, 1, 2])
        assert top1_accuracy(_Fixed(lambda x: x), data) == 100.0

    def test_constant_on_balanced(self):
        data = Dataset(np.zeros((4, 2)), [0, 1, 0, 1])
        assert top1_accuracy(_Fixed(lambda x: np.tile([1.0, 0.0], (len(x), 1))), data) == 50.0

    def test_three_of_four(self):
        logits = np.array([[2, 1], [0, 3], [5, 1], [1, 2]], dtype=float)
        assert accuracy_from_logits(logits, [0, 1, 0, 0]) == 75.0

    def test_ties_go_to_lowest_index(self):
        assert accuracy_from_logits(np.zeros((2, 3)), [0, 1]) == 50.0

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(40, 5))
        labels = rng.integers(0, 5, 40)
        assert accuracy_from_logits(np.exp(logits) * 3 + 1, labels) == accuracy_from_logits(logits, labels)

    def test_empty(self):
        with pytest.raises(ValueError):
            top1_accuracy(_Fixed(lambda x: x), Dataset(np.zeros((0, 2)), []))


class TestForwardTransfer:
    def test_no_gain(self):
        assert forward_transfer([60, 60, 60], 60) == 0.0

    def test_hand_example(self):
        assert forward_transfer([70, 70], 60, include_first=True) == 10.0
        assert forward_transfer([10, 70, 70], [10, 60, 60]) == 10.0

    def test_first_task_excluded_by_default(self):
        assert forward_transfer([0, 80, 90], 50) == 35.0

    def test_errors(self):
        with pytest.raises(ValueError):
            forward_transfer([], 10)
        with pytest.raises(ValueError):
            forward_transfer([50], 10)


@pytest.fixture(scope="module")
def class_il():
    return split_class_il(*train_test_split(load_digits(8, 2), 0.2, 0), 5)


class TestTaskProbabilities:
    def test_zero_model_is_uniform(self, class_il):
        model = init_mlp([144, 10], 0)
        model.weights[0].data[:] = 0
        probs = task_probabilities(model, class_il)
        np.testing.assert_allclose(probs, [0.2] * 5, atol=1e-15)

    def test_sums_to_one(self, class_il):
        probs = task_probabilities(init_mlp([144, 20, 10], 3), class_il)
        assert abs(sum(probs) - 1) <= 1e-9

    def test_relabelling_permutes_tasks(self, class_il):
        model = init_mlp([144, 10], 1)
        base = task_probabilities(model, class_il)
        # swapping the output columns of task 0 and task 4 swaps their masses
        w, b = model.weights[0].data, model.biases[0].data
        cols = [8, 9, 2, 3, 4, 5, 6, 7, 0, 1]
        model.weights[0].data, model.biases[0].data = w[:, cols], b[cols]
        swapped = task_probabilities(model, class_il)
        assert swapped[0] == pytest.approx(base[4], abs=1e-12) and swapped[4] == pytest.approx(base[0], abs=1e-12)

    def test_needs_class_il(self):
        from cl_consistency.data import rotated_domain_il
        d = train_test_split(make_blobs(4, 16, 10), 0.5, 0)
        with pytest.raises(ValueError):
            task_probabilities(init_mlp([16, 4], 0), rotated_domain_il(*d, 2))

    def test_replay_is_biased_to_recent_task(self, class_il):
        model, _ = train_continual(class_il, init_mlp([144, 100, 100, 10], 0),
                                   TrainConfig(buffer_capacity=50, epochs_per_task=5, seed=0))
        probs = task_probabilities(model, class_il)
        assert probs[-1] > probs[0]


class TestRobustness:
    def test_clean_column_and_mra(self, class_il):
        model = init_mlp([144, 30, 10], 0)
        test = class_il.all_test()
        table = robust_accuracy(model, test, seed=0)
        assert table.clean == top1_accuracy(model, test)
        assert set(table.cells) == set(CORRUPTIONS)
        corrupted = [a for row in table.cells.values() for s, a in row.items() if s > 0]
        assert len(corrupted) == len(CORRUPTIONS) * 5
        assert table.mra == pytest.approx(np.mean(corrupted))
        assert all(row[0] == table.clean for row in table.cells.values())
        means = [m for _, m in table.ranking()]
        assert means == sorted(means)

    def test_noise_hurts_a_trained_model(self, class_il):
        from cl_consistency.trainer import train_joint
        accs = []
        for seed in range(3):
            model, _ = train_joint(class_il, init_mlp([144, 50, 10], seed), TrainConfig(epochs_per_task=3, seed=seed))
            table = robust_accuracy(model, class_il.all_test(), kinds=("gaussian_noise", "impulse_noise"), seed=seed)
            accs.append([[row[s] for s in range(6)] for row in table.cells.values()])
        mean = np.mean(accs, axis=0)
        # averaged over seeds, the heaviest severity is worse than clean and than the mildest one
        assert np.all(mean[:, 5] < mean[:, 0]) and np.all(mean[:, 5] < mean[:, 1])


class TestRelativeGains:
    ref = {"avg_top1": 50.0, "ece": 40.0, "task_probabilities": [0.1, 0.2, 0.7]}

    def test_identical_runs(self):
        assert relative_gains(self.ref, self.ref) == {"accuracy": 0.0, "recency": 0.0, "calibration": 0.0}

    def test_hand_examples(self):
        cr = {"avg_top1": 60.0, "ece": 20.0, "task_probabilities": [0.2, 0.3, 0.5]}
        g = relative_gains(cr, self.ref)
        assert g["accuracy"] == pytest.approx(20.0)
        assert g["calibration"] == pytest.approx(100 * 20 / 60)
        assert g["recency"] == pytest.approx(100 * ((1 - 0.3) - (1 - 0.6)) / (1 - 0.6))

    def test_accepts_report_objects(self):
        a = MetricsReport(avg_top1=60.0, per_task_top1=[60.0], ece=20.0)
        b = MetricsReport(avg_top1=50.0, per_task_top1=[50.0], ece=40.0)
        g = relative_gains(a, b)
        assert g["recency"] is None and g["accuracy"] == pytest.approx(20.0)

    def test_zero_denominators(self):
        with pytest.raises(ValueError, match="reference accuracy is 0"):
            relative_gains(self.ref, {**self.ref, "avg_top1": 0.0})
        with pytest.raises(ValueError, match="ECE is 100"):
            relative_gains(self.ref, {**self.ref, "ece": 100.0})
        with pytest.raises(ValueError, match="T_last"):
            relative_gains(self.ref, {**self.ref, "task_probabilities": [0.0, 1.0]})


def test_compute_metrics_report(class_il):
    model, log = train_continual(class_il, init_mlp([144, 20, 10], 0), TrainConfig(buffer_capacity=20, seed=0))
    rep = compute_metrics(model, class_il, log)
    assert rep.avg_top1 == pytest.approx(np.mean(log.accuracy_matrix[-1]))
    assert rep.forward_transfer == pytest.approx(forward_transfer(log.pre_task_accuracy, log.random_init_accuracy))
    assert 0 <= rep.ece <= 100 and len(rep.task_probabilities) == 5
    assert sum(rep.reliability["counts"]) == len(class_il.all_test())
    assert MetricsReport.from_dict(rep.to_dict()) == rep
