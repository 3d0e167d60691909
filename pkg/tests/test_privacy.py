import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fedgnn.privacy import (
    LdpConfig, add_laplace, anonymity_degree, clip_linf, privacy_budget, protect,
    pseudo_gradients, sample_pseudo_items,
)

floats = st.floats(-1e3, 1e3, allow_nan=False)


def test_clip_examples():
    assert clip_linf([0.05, -0.3, 0.2], 0.1).tolist() == [0.05, -0.1, 0.1]
    x = np.array([0.01, -0.09])
    assert np.array_equal(clip_linf(x, 0.1), x)
    assert np.array_equal(clip_linf(x, math.inf), x)
    with pytest.raises(ValueError):
        clip_linf(x, 0.0)


def test_clip_bound_on_many_inputs():
    x = np.random.default_rng(0).normal(0, 1, 100_000)
    assert np.abs(clip_linf(x, 0.1)).max() <= 0.1


@settings(max_examples=100, deadline=None)
@given(x=arrays(np.float64, 8, elements=floats), y=arrays(np.float64, 8, elements=floats),
       delta=st.floats(1e-3, 10))
def test_clip_idempotent_and_nonexpansive(x, y, delta):
    cx, cy = clip_linf(x, delta), clip_linf(y, delta)
    assert np.array_equal(clip_linf(cx, delta), cx)
    assert np.abs(cx - cy).max() <= np.abs(x - y).max()


def test_laplace_examples():
    x = np.array([0.1, -0.2])
    assert np.array_equal(add_laplace(x, 0.0, None), x)
    a = add_laplace(x, 0.2, np.random.default_rng(5))
    b = add_laplace(x, 0.2, np.random.default_rng(5))
    assert np.array_equal(a, b) and not np.array_equal(a, x)
    with pytest.raises(ValueError):
        add_laplace(x, -1.0, None)


def test_laplace_moments():
    noise = add_laplace(np.zeros(100_000), 0.2, np.random.default_rng(0))
    assert abs(noise.mean()) < 0.005
    assert abs(np.abs(noise).mean() - 0.2) < 0.05 * 0.2


def test_protect_clips_before_noise():
    x = np.array([5.0, -5.0, 0.01])
    out = protect(x, LdpConfig(0.1, 0.0), None)
    assert out.tolist() == [0.1, -0.1, 0.01]
    # noise added after clipping can push values beyond delta; clipping after would not
    out = protect(np.full(10_000, 5.0), LdpConfig(0.1, 0.2), np.random.default_rng(0))
    assert out.max() > 0.1 and abs(out.mean() - 0.1) < 0.01


def test_ldp_config_validation():
    with pytest.raises(ValueError):
        LdpConfig(0.0, 0.2)
    with pytest.raises(ValueError):
        LdpConfig(0.1, -0.1)
    assert LdpConfig(math.inf, 0.0).delta == math.inf


def test_pseudo_items_examples():
    rng = np.random.default_rng(0)
    assert sample_pseudo_items({0, 1}, 5, 3, rng).tolist() == [2, 3, 4]
    assert sample_pseudo_items({0, 1}, 5, 0, rng).tolist() == []
    with pytest.raises(ValueError, match="3 = Q - |real items|"):
        sample_pseudo_items({0, 1}, 5, 4, rng)


def test_pseudo_items_disjoint_trials():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        real = rng.choice(50, size=rng.integers(1, 20), replace=False)
        m = int(rng.integers(0, 50 - len(real) + 1))
        fake = sample_pseudo_items(real, 50, m, rng)
        assert len(fake) == m == len(set(fake.tolist()))
        assert not set(fake.tolist()) & set(real.tolist())


def test_pseudo_gradients_examples():
    rng = np.random.default_rng(0)
    g = np.array([[0.1, -0.2, 0.3]])
    out = pseudo_gradients(g, [7, 8, 9], rng)
    assert out.shape == (3, 3) and np.all(out == g)
    assert pseudo_gradients(g, [], rng).shape == (0, 3)
    with pytest.raises(ValueError):
        pseudo_gradients(np.zeros((0, 3)), [1], rng)


def moment_z_scores(real, fake):
    """Worst per-dimension z-scores of the mean and std differences."""
    n, m = len(real), len(fake)
    mu_r, mu_f = real.mean(0), fake.mean(0)
    sd_r, sd_f = real.std(0, ddof=1), fake.std(0, ddof=1)
    z_mean = np.abs(mu_f - mu_r) / np.sqrt(sd_r ** 2 / n + sd_f ** 2 / m)
    z_std = np.abs(sd_f - sd_r) / np.sqrt(sd_r ** 2 / (2 * (n - 1)) + sd_f ** 2 / (2 * (m - 1)))
    return z_mean.max(), z_std.max()


def test_pseudo_gradient_moments():
    rng = np.random.default_rng(0)
    real = rng.normal(rng.normal(0, 1, 16), rng.uniform(0.1, 2, 16), size=(50, 16))
    fake = pseudo_gradients(real, np.arange(10_000), np.random.default_rng(1))
    z_mean, z_std = moment_z_scores(real, fake)
    assert z_mean < 3 and z_std < 3


def test_privacy_budget():
    assert privacy_budget(0.1, 0.2) == 1.0
    assert privacy_budget(0.05, 0.2) == 0.5
    assert privacy_budget(0.2, 0.1) == 4.0
    with pytest.raises(ValueError, match="unbounded budget"):
        privacy_budget(0.1, 0.0)


@given(d1=st.floats(1e-3, 1), d2=st.floats(1e-3, 1), lam=st.floats(1e-3, 1))
def test_budget_monotone(d1, d2, lam):
    lo, hi = sorted((d1, d2))
    assert privacy_budget(lo, lam) <= privacy_budget(hi, lam)
    assert privacy_budget(lo, lam) >= privacy_budget(lo, lam * 2)


def test_anonymity_degree():
    assert anonymity_degree(0, 943, 100_000) == 1.0
    assert abs(anonymity_degree(1000, 943, 100_000) - 10.43) < 1e-9
    assert anonymity_degree(2000, 943, 100_000) - 1 == pytest.approx(2 * 9.43)
    with pytest.raises(ValueError):
        anonymity_degree(1, 1, 0)
