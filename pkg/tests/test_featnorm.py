import numpy as np
import pytest

import oracles
from afd import tensor as T
from afd.errors import DegenerateBatch
from afd.featnorm import normalize_features
from afd.gradcheck import relative_error


def test_constant_channel_is_zero():
    x = np.ones((2, 3, 4, 4))
    x[:, 1] = 7.0
    assert np.all(normalize_features(x).data == 0)


def test_plus_minus_one():
    x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(1, 1, 2, 2)
    out = normalize_features(x).data
    assert np.allclose(out, x / np.sqrt(1 + 1e-5), atol=1e-15, rtol=0)


def test_random_batch_statistics_and_gradient():
    rng = np.random.default_rng(0)
    x = rng.normal(2.0, 3.0, size=(2, 3, 4, 4))
    out, stats = normalize_features(x, return_stats=True)
    assert stats.m == 32
    mean = out.data.mean(axis=(0, 2, 3))
    var = out.data.var(axis=(0, 2, 3))
    assert np.all(np.abs(mean) < 1e-12)
    assert np.allclose(var, stats.var / (stats.var + 1e-5), atol=1e-12, rtol=0)
    assert np.all(np.abs(var - 1) < 1e-4)
    w = rng.normal(size=x.shape)

    def f(t):
        return T.sum(T.mul(normalize_features(t), w))

    leaf = T.Tensor(x, requires_grad=True)
    T.backward(f(leaf))
    assert relative_error(leaf.grad, T.finite_diff_grad(f, x)) < 1e-6


def test_matches_loop_oracle():
    x = np.random.default_rng(1).normal(size=(2, 4, 3, 3))
    assert np.max(np.abs(normalize_features(x).data - oracles.normalize(x))) < 1e-12


def test_degenerate_batch():
    with pytest.raises(DegenerateBatch):
        normalize_features(np.ones((1, 3, 1, 1)))


def test_shift_invariance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4, 4))
    b = rng.normal(size=3).reshape(1, 3, 1, 1) * 10
    assert np.max(np.abs(normalize_features(x + b).data - normalize_features(x).data)) < 1e-9


def test_scale_invariance_with_matching_eps():
    # (a x - a mu) / sqrt(a^2 var + a^2 eps) is the same map for every a > 0
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 4, 4))
    a = 7.5
    got = normalize_features(a * x, eps=a * a * 1e-5).data
    assert np.max(np.abs(got - normalize_features(x).data)) < 1e-9


def test_scale_residual_with_fixed_eps_is_bounded():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4, 4))
    for a in (0.5, 2.0, 10.0):
        diff = np.abs(normalize_features(a * x).data - normalize_features(x).data)
        var = x.var(axis=(0, 2, 3)).min()
        bound = 1e-5 * abs(1 - 1 / a**2) / var * np.abs(normalize_features(x).data).max()
        assert diff.max() <= bound


def test_idempotent_up_to_eps():
    x = np.random.default_rng(5).normal(size=(2, 3, 4, 4)) * 4
    once = normalize_features(x)
    assert np.max(np.abs(normalize_features(once).data - once.data)) < 1e-4
