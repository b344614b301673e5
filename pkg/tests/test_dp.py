import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cryptdp.dp import NoiseSpec, isotonic_cdf, pava, sample_discrete_laplace, signed_decode, signed_encode
from cryptdp.errors import DomainError

N = 2**61 - 1


def brute_force_isotonic(y, upper=None):
    """Exhaustive search over contiguous block partitions (the optimum is piecewise constant)."""
    n = len(y)
    best, best_cost = None, math.inf
    for cuts in itertools.product([0, 1], repeat=max(n - 1, 0)):
        blocks, start = [], 0
        for i, c in enumerate(cuts, start=1):
            if c:
                blocks.append((start, i))
                start = i
        blocks.append((start, n))
        fit = []
        for s, e in blocks:
            v = sum(y[s:e]) / (e - s)
            if upper is not None:
                v = min(max(v, 0.0), upper)
            fit.extend([v] * (e - s))
        if any(fit[i] > fit[i + 1] + 1e-12 for i in range(n - 1)):
            continue
        cost = sum((a - b) ** 2 for a, b in zip(fit, y))
        if cost < best_cost - 1e-12:
            best, best_cost = fit, cost
    return np.asarray(best)


def test_signed_roundtrip_examples():
    assert signed_encode(-3, N) == N - 3
    assert signed_decode(N - 3, N) == -3
    assert signed_encode(0, N) == 0 and signed_decode(0, N) == 0
    assert signed_encode(-7, N) == N - signed_encode(7, N)


def test_signed_overflow():
    with pytest.raises(DomainError):
        signed_encode(N // 2 + 1, N)


@settings(max_examples=1000, deadline=None)
@given(st.integers(-(10**6), 10**6))
def test_signed_roundtrip_property(v):
    assert signed_decode(signed_encode(v, N), N) == v


def test_discrete_laplace_degenerate_scale():
    rng = np.random.default_rng(0)
    assert not sample_discrete_laplace(1e-6, rng, size=1000).any()


def test_discrete_laplace_moments():
    rng = np.random.default_rng(1)
    draws = sample_discrete_laplace(20, rng, size=100_000)
    alpha = math.exp(-1 / 20)
    assert abs(draws.mean()) < 1.0
    expected = 2 * alpha / (1 - alpha) ** 2
    assert abs(draws.var() / expected - 1) < 0.10
    assert NoiseSpec(20).variance == pytest.approx(expected)


def test_discrete_laplace_neighbour_ratio():
    rng = np.random.default_rng(2)
    draws = sample_discrete_laplace(2, rng, size=1_000_000)
    values, counts = np.unique(draws, return_counts=True)
    freq = dict(zip(values.tolist(), counts.tolist()))
    target = math.exp(-1 / 2)
    for x in range(0, 4):
        assert 0.9 * target <= freq[x + 1] / freq[x] <= 1.1 * target
        assert 0.9 * target <= freq[-x - 1] / freq[-x] <= 1.1 * target


def test_noise_spec_scale():
    assert NoiseSpec.for_query(0.5, 1).scale == 4
    assert NoiseSpec.for_query(1.0, 2, k=5).scale == 20
    with pytest.raises(ValueError):
        NoiseSpec.for_query(0, 1)


def test_isotonic_examples():
    assert isotonic_cdf([1, 2, 3], 10).tolist() == [1, 2, 3]
    assert isotonic_cdf([3, 1], 10).tolist() == [2, 2]
    out = isotonic_cdf([-5, 2, 50], 10)
    assert out.tolist() == [0, 2, 10]
    grid = min(
        (v for v in itertools.product(range(11), repeat=3) if v[0] <= v[1] <= v[2]),
        key=lambda v: sum((a - b) ** 2 for a, b in zip(v, [-5, 2, 50])),
    )
    assert tuple(out) == grid


def test_pava_matches_brute_force_exhaustively():
    for n in range(1, 6):
        for y in itertools.product(range(-3, 4), repeat=n):
            np.testing.assert_allclose(pava(y), brute_force_isotonic(list(y)), atol=1e-9)
            clamped = isotonic_cdf(y, 2)
            np.testing.assert_allclose(clamped, brute_force_isotonic(list(y), 2), atol=1e-9)
            assert np.all(np.diff(clamped) >= 0)
            assert clamped.min() >= 0 and clamped.max() <= 2


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=0, max_size=40), st.integers(0, 500))
def test_isotonic_is_monotone_and_clamped(y, n):
    out = isotonic_cdf(y, n)
    assert len(out) == len(y)
    assert np.all(np.diff(out) >= -1e-9)
    assert np.all(out >= 0) and np.all(out <= n)
