import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msic.layers import BN_EPS, BatchNorm
from msic.quantizer import (
    QuantizerConfig,
    preprocess,
    quantize,
    quantize_levels,
    round_hard,
    round_soft,
    round_soft_grad,
    soft_surrogate,
)
from msic.tensor import Parameter, Tensor, grad_check, sum_


def identity_bn(channels=1):
    bn = BatchNorm(channels, dtype=np.float64)
    bn.running_var[:] = 1.0 - BN_EPS
    return bn


@pytest.mark.parametrize("post_bn,expected", [(2.0, 3.0), (5.0, 6.0), (-1.0, 0.0), (4.0, 6.0), (0.0, 0.0)])
def test_preprocess_examples(post_bn, expected):
    x = Tensor(np.full((1, 1, 1, 1), post_bn))
    out = preprocess(x, identity_bn(), QuantizerConfig(N=7, u=4.0), train=False)
    assert out.data.item() == pytest.approx(expected, abs=1e-12)


def test_preprocess_range():
    x = Tensor(np.random.default_rng(0).normal(0, 5, size=(4, 3, 6, 6)))
    out = preprocess(x, BatchNorm(3, dtype=np.float64), QuantizerConfig(), train=True).data
    assert out.min() >= 0.0 and out.max() <= 6.0


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(N=1), dict(u=0.0), dict(alpha=1.0), dict(alpha=-0.1)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            QuantizerConfig(**kwargs)

    def test_defaults(self):
        cfg = QuantizerConfig()
        assert (cfg.N, cfg.u, cfg.alpha) == (7, 4.0, 0.5)


class TestRoundHard:
    @pytest.mark.parametrize("x,expected", [(2.5, 2), (2.0, 2), (1.2, 1), (0.49, 0), (0.51, 1), (-0.5, -1)])
    def test_examples(self, x, expected):
        assert round_hard(x) == expected

    def test_sweep(self):
        x = np.random.default_rng(1).uniform(-10, 10, 10**6)
        np.testing.assert_array_equal(round_hard(x), np.ceil(x - 0.5))

    @given(st.floats(0, 6, allow_nan=False))
    def test_bounds(self, x):
        q = round_hard(x)
        assert 0 <= q <= 6 and abs(q - x) <= 0.5

    def test_idempotent(self):
        x = np.random.default_rng(2).uniform(0, 6, 1000)
        q = round_hard(x)
        np.testing.assert_array_equal(round_hard(q), q)


class TestRoundSoft:
    def test_fixed_points(self):
        grid = np.arange(-20, 21) / 2
        assert np.max(np.abs(round_soft(grid) - grid)) < 1e-15

    def test_quarter(self):
        assert round_soft(0.25, 0.5) == pytest.approx(0.25 - 0.5 / (2 * math.pi), abs=1e-15)
        assert round_soft(0.25, 0.5) == pytest.approx(0.170423, abs=1e-6)

    def test_strictly_increasing(self):
        x = np.linspace(-3, 9, 2_000_001)
        assert np.all(np.diff(round_soft(x, 0.5)) > 0)

    @given(st.floats(-50, 50, allow_nan=False))
    def test_bounded_deviation(self, x):
        assert abs(round_soft(x, 0.5) - x) <= 0.5 / (2 * math.pi) + 1e-12

    def test_derivative_values(self):
        assert round_soft_grad(3.0) == pytest.approx(0.5)
        assert round_soft_grad(0.25) == pytest.approx(1.0)


class TestQuantizeOp:
    def test_integer_inputs(self):
        x = Parameter(np.array([0.0, 1.0, 2.0, 6.0]))
        out = quantize(x)
        np.testing.assert_array_equal(out.data, x.data)
        sum_(out).backward()
        np.testing.assert_allclose(x.grad, 0.5)

    def test_backward_factor(self):
        x = Parameter(np.array([0.25, 1.75, 2.4]))
        sum_(quantize(x)).backward()
        np.testing.assert_allclose(x.grad, 1 - 0.5 * np.cos(2 * np.pi * x.data))

    def test_surrogate_finite_differences(self):
        x = Parameter(np.random.default_rng(3).uniform(0, 6, 50))
        assert grad_check(lambda: sum_(soft_surrogate(x)), [x], step=1e-6) < 1e-6

    def test_surrogate_matches_hard_at_anchor(self):
        x0 = np.random.default_rng(4).uniform(0, 6, 20)
        offset = round_hard(x0) - round_soft(x0)
        np.testing.assert_allclose(soft_surrogate(Tensor(x0), offset=offset).data, round_hard(x0), atol=1e-12)

    def test_levels(self):
        cfg = QuantizerConfig(N=7)
        levels = quantize_levels(np.array([-0.2, 0.5, 2.5, 5.6, 6.3]), cfg)
        np.testing.assert_array_equal(levels, [0, 0, 2, 6, 6])
        assert levels.dtype == np.int64


def test_clip_gradient_rule():
    """Pass-through inside (0, u), zero when saturated."""
    cfg = QuantizerConfig()
    bn = identity_bn(1)
    z = Parameter(np.array([-1.0, 0.5, 2.0, 3.9, 5.0]).reshape(5, 1, 1, 1))
    sum_(preprocess(z, bn, cfg, train=False)).backward()
    scale = (cfg.N - 1) / cfg.u / math.sqrt(1.0)
    np.testing.assert_allclose(z.grad.reshape(-1), [0.0, scale, scale, scale, 0.0], rtol=1e-6)
    inside = Parameter(np.array([0.5, 2.0, 3.9]).reshape(3, 1, 1, 1))
    assert grad_check(lambda: sum_(preprocess(inside, bn, cfg, False) ** 2), [inside]) < 1e-6
