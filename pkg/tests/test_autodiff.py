import math
import zlib

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cl_consistency.autodiff import Tensor, check_gradients, l2_normalize, log_softmax, softmax


def mp_softmax(row):
    with mpmath.workdps(50):
        exps = [mpmath.exp(mpmath.mpf(v)) for v in row]
        total = mpmath.fsum(exps)
        return [float(e / total) for e in exps]


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_array_equal(softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_equal_triple(self):
        out = softmax(Tensor([[7.0, 7.0, 7.0]])).data
        np.testing.assert_allclose(out, [[1 / 3] * 3], rtol=0, atol=1e-15)

    def test_against_extended_precision(self):
        out = softmax(Tensor([[1.0, 2.0, 3.0]])).data[0]
        np.testing.assert_allclose(out, mp_softmax([1, 2, 3]), rtol=1e-14)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite logits"):
            softmax(Tensor([[1.0, np.nan]]))
        with pytest.raises(ValueError, match="non-finite logits"):
            softmax(Tensor([[np.inf, 0.0]]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)))
    def test_rows_sum_to_one_for_large_inputs(self, x):
        out = softmax(Tensor(x)).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_log_softmax_matches_log_of_softmax(self):
        x = np.random.default_rng(3).normal(size=(5, 4))
        np.testing.assert_allclose(log_softmax(Tensor(x)).data, np.log(softmax(Tensor(x)).data), atol=1e-14)


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-15)

    def test_unit_vector_unchanged(self):
        np.testing.assert_array_equal(l2_normalize(Tensor([[1.0, 0.0, 0.0]])).data, [[1.0, 0.0, 0.0]])

    def test_zero_row_rejected(self):
        with pytest.raises(ValueError, match="degenerate prediction vector"):
            l2_normalize(Tensor([[0.0, 0.0]]))

    def test_unit_norm_and_direction(self):
        x = np.random.default_rng(0).normal(size=(10, 5))
        out = l2_normalize(Tensor(x)).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-10)
        cos = (out * x).sum(axis=1) / np.linalg.norm(x, axis=1)
        np.testing.assert_allclose(cos, 1.0, atol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        w.sum().backward()
        np.testing.assert_array_equal(w.grad, np.ones((3, 4)))

    def test_half_square_norm_gives_identity(self):
        data = np.random.default_rng(1).normal(size=(2, 5))
        w = Tensor(data, requires_grad=True)
        (0.5 * (w ** 2).sum()).backward()
        np.testing.assert_allclose(w.grad, data, atol=1e-15)

    def test_non_scalar_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (w * 2).backward()

    def test_repeated_calls_accumulate(self):
        w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        loss = (w * w).sum()
        loss.backward()
        loss.backward()
        np.testing.assert_allclose(w.grad, 4 * w.data)

    def test_fan_out_sums_contributions(self):
        data = np.random.default_rng(2).normal(size=(3, 3))

        def fn(w):
            h = w.exp()
            return (h * h.T).sum() + (h @ h).mean() + h.sum()

        w = Tensor(data, requires_grad=True)
        fn(w).backward()
        assert check_gradients(fn, data) < 1e-6
        assert w.grad is not None

    def test_constants_collect_no_gradient(self):
        w = Tensor(np.ones(3), requires_grad=True)
        c = Tensor(np.arange(3.0))
        ((w * c).sum()).backward()
        assert c.grad is None

    def test_every_reachable_parameter_gets_grad(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 4)))
        ((x @ a + b).relu().sum()).backward()
        assert a.grad.shape == a.shape and b.grad.shape == b.shape


# composite functions over every supported primitive
COMPOSITES = {
    "matmul-add-relu": lambda w: ((w @ w.T + 0.3).relu()).sum(),
    "exp-log": lambda w: (w.exp() + 1.0).log().mean(),
    "abs-max": lambda w: w.abs().max(axis=1).sum() + w.max(axis=0).mean(),
    "power-div": lambda w: ((w ** 2 + 1.0) ** 1.5 / (w.abs() + 2.0)).sum(),
    "softmax": lambda w: (softmax(w) * np.arange(w.shape[1])).sum(),
    "log_softmax": lambda w: log_softmax(w)[:, 0].mean(),
    "normalize": lambda w: (l2_normalize(w) * np.linspace(-1, 1, w.shape[1])).sum(),
    "sqrt-mean": lambda w: ((w ** 2).mean(axis=0, keepdims=True) + 0.1).sqrt().sum(),
}


@pytest.mark.parametrize("name", sorted(COMPOSITES))
def test_composites_match_finite_differences(name):
    fn = COMPOSITES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        point = rng.normal(size=(4, 3))
        assert check_gradients(fn, point) < 1e-3


class TestCheckGradients:
    def test_constant_function_has_zero_error(self):
        assert check_gradients(lambda w: Tensor(3.0), np.ones((2, 2))) == 0.0

    def test_detects_wrong_gradient(self):
        def broken(w):
            out = (w * w).sum()
            # claim derivative 0 by cutting the graph
            return Tensor(out.data) + 0.0 * w.sum()

        assert check_gradients(broken, np.ones(3)) == pytest.approx(1.0)

    def test_relative_error_definition(self):
        err = check_gradients(lambda w: (w ** 3).sum(), np.array([10.0]))
        numeric = ((10 + 1e-4) ** 3 - (10 - 1e-4) ** 3) / 2e-4
        assert err == pytest.approx(abs(300.0 - numeric) / numeric, rel=1e-3, abs=1e-12)


def test_subgradient_conventions():
    x = Tensor(np.array([0.0, 0.0, -1.0]), requires_grad=True)
    (x.abs().sum() + x.relu().sum()).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, -1.0])

    y = Tensor(np.array([[2.0, 2.0, 1.0]]), requires_grad=True)
    y.max(axis=1).sum().backward()
    np.testing.assert_array_equal(y.grad, [[1.0, 0.0, 0.0]])


def test_float64_everywhere():
    t = Tensor([1, 2, 3])
    assert t.data.dtype == np.float64
    assert math.isclose(t.sum().item(), 6.0)
