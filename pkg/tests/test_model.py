import math

import mpmath
import numpy as np
import pytest

from cl_consistency.autodiff import Tensor, check_gradients, softmax
from cl_consistency.model import (MlpClassifier, cross_entropy, forward, init_mlp, load_checkpoint,
                                  save_checkpoint, sgd_step)


def test_two_hidden_layer_shapes():
    model = init_mlp([784, 100, 100, 10], seed=0)
    assert [w.shape for w in model.weights] == [(784, 100), (100, 100), (100, 10)]
    assert [b.shape for b in model.biases] == [(100,), (100,), (10,)]
    assert len(model.parameters()) == 6


def test_single_layer_zero_bias():
    model = init_mlp([2, 1], seed=5)
    assert len(model.weights) == 1
    np.testing.assert_array_equal(model.biases[0].data, [0.0])


def test_init_is_seed_deterministic():
    a, b = init_mlp([5, 7, 3], 11), init_mlp([5, 7, 3], 11)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    c = init_mlp([5, 7, 3], 12)
    assert a.weights[0].data.tobytes() != c.weights[0].data.tobytes()


def test_init_bound_scales_with_fan_in():
    model = init_mlp([400, 50], 0)
    w = model.weights[0].data
    assert np.abs(w).max() <= 1 / math.sqrt(400)
    assert abs(w.mean()) < 0.003


@pytest.mark.parametrize("sizes", [[], [3], [3, 0]])
def test_init_rejects_bad_sizes(sizes):
    with pytest.raises(ValueError):
        init_mlp(sizes, 0)


def test_zero_network_gives_zero_logits():
    model = init_mlp([4, 6, 3], 0)
    for p in model.parameters():
        p.data = np.zeros_like(p.data)
    out = forward(model, np.random.default_rng(0).normal(size=(5, 4)))
    np.testing.assert_array_equal(out.data, np.zeros((5, 3)))


def test_identity_layer_passes_input_through():
    model = init_mlp([3, 3], 0)
    model.weights[0].data = np.eye(3)
    x = np.random.default_rng(1).normal(size=(4, 3))
    np.testing.assert_array_equal(forward(model, x).data, x)


def _plain_forward(layers, x):
    h = x.tolist()
    for k, (w, b) in enumerate(layers):
        out = []
        for row in h:
            vals = [sum(row[i] * w[i][j] for i in range(len(row))) + b[j] for j in range(len(b))]
            if k < len(layers) - 1:
                vals = [max(v, 0.0) for v in vals]
            out.append(vals)
        h = out
    return np.array(h)


def test_forward_matches_independent_evaluation():
    model = init_mlp([5, 4, 3], 7)
    for b in model.biases:
        b.data = np.random.default_rng(2).normal(size=b.shape)
    x = np.random.default_rng(3).normal(size=(6, 5))
    layers = [(w.data.tolist(), b.data.tolist()) for w, b in zip(model.weights, model.biases)]
    np.testing.assert_allclose(forward(model, x).data, _plain_forward(layers, x), atol=1e-12)
    np.testing.assert_array_equal(model.logits(x), forward(model, x).data)


def test_forward_rejects_wrong_width():
    model = init_mlp([4, 2], 0)
    with pytest.raises(ValueError):
        forward(model, np.zeros((3, 5)))


def test_forward_is_deterministic():
    model = init_mlp([6, 8, 4], 1)
    x = np.random.default_rng(0).normal(size=(3, 6))
    assert forward(model, x).data.tobytes() == forward(model, x).data.tobytes()


class TestCrossEntropy:
    def test_symmetric_two_class(self):
        assert cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_saturated_logits_are_stable(self):
        val = cross_entropy(Tensor([[1000.0, 0.0]]), [0]).item()
        assert np.isfinite(val) and 0 <= val < 1e-12

    def test_against_log_sum_exp_in_extended_precision(self):
        with mpmath.workdps(50):
            expected = float(mpmath.log(sum(mpmath.exp(v) for v in (1, 2, 3))) - 3)
        assert cross_entropy(Tensor([[1.0, 2.0, 3.0]]), [2]).item() == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("c", [2, 5, 10])
    def test_uniform_logits_give_log_c(self, c):
        assert cross_entropy(Tensor(np.full((4, c), 2.5)), [0, 1, 0, 1]).item() == pytest.approx(math.log(c), abs=1e-14)

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((2, 3))), [-1, 0])

    def test_closed_form_gradient(self):
        rng = np.random.default_rng(9)
        logits = rng.normal(size=(5, 4))
        labels = np.array([0, 3, 1, 1, 2])
        t = Tensor(logits, requires_grad=True)
        cross_entropy(t, labels).backward()
        expected = (softmax(Tensor(logits)).data - np.eye(4)[labels]) / 5
        np.testing.assert_allclose(t.grad, expected, atol=1e-14)

    def test_nonnegative_and_finite_difference(self):
        rng = np.random.default_rng(10)
        for _ in range(5):
            logits = 3 * rng.normal(size=(6, 5))
            labels = rng.integers(0, 5, size=6)
            assert cross_entropy(Tensor(logits), labels).item() >= 0
            assert check_gradients(lambda t: cross_entropy(t, labels), logits) < 1e-3


def test_sgd_step_moves_against_gradient_and_clears():
    model = init_mlp([3, 2], 0)
    before = model.weights[0].data.copy()
    x = np.ones((1, 3))
    cross_entropy(forward(model, x), [1]).backward()
    grad = model.weights[0].grad.copy()
    sgd_step(model, 0.1)
    np.testing.assert_allclose(model.weights[0].data, before - 0.1 * grad)
    assert all(p.grad is None for p in model.parameters())


def test_checkpoint_roundtrip_is_bitwise(tmp_path):
    model = init_mlp([7, 5, 3], 4)
    model.biases[0].data = np.random.default_rng(0).normal(size=5)
    path = tmp_path / "m.bin"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert isinstance(loaded, MlpClassifier)
    assert loaded.layer_sizes == [7, 5, 3]
    for p, q in zip(model.parameters(), loaded.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    save_checkpoint(loaded, tmp_path / "again.bin")
    assert path.read_bytes() == (tmp_path / "again.bin").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nonsense")
    with pytest.raises(ValueError):
        load_checkpoint(bad)
