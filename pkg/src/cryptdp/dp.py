"""Noise sampling, signed encodings for Z_N, and isotonic post-processing."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class NoiseSpec:
    """Discrete Laplace noise at scale ``b = 2 * sensitivity / epsilon``."""

    scale: Fraction
    mechanism: str = "discrete-laplace"

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("noise scale must be positive")

    @classmethod
    def for_query(cls, epsilon, sensitivity, k=1):
        """Scale used by the measurement operators (``k`` > 1 for top-k selection)."""
        eps = Fraction(epsilon).limit_denominator(10**12)
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        if sensitivity < 1 or int(sensitivity) != sensitivity:
            raise ValueError("sensitivity must be a positive integer")
        return cls(Fraction(2 * k * int(sensitivity)) / eps)

    @property
    def alpha(self):
        return math.exp(-1.0 / float(self.scale))

    @property
    def variance(self):
        a = self.alpha
        return 2.0 * a / (1.0 - a) ** 2


def sample_discrete_laplace(b, rng, size=None):
    """Draw from the two-sided geometric law P(X = x) proportional to exp(-|x|/b).

    The difference of two i.i.d. geometric variables on {0, 1, ...} with
    success probability ``1 - alpha`` has exactly this law.

    Args:
        b: Positive scale.
        rng: A ``numpy.random.Generator``.
        size: ``None`` for a single int, otherwise the number of draws.
    """
    b = float(b)
    if not b > 0:
        raise ValueError("scale must be positive")
    p = -math.expm1(-1.0 / b)  # 1 - alpha, accurate for large b
    n = 1 if size is None else int(size)
    if p >= 1.0:
        draws = np.zeros(n, dtype=np.int64)
    else:
        draws = rng.geometric(p, n).astype(np.int64) - rng.geometric(p, n).astype(np.int64)
    return int(draws[0]) if size is None else draws


def signed_encode(v, n):
    """Map a signed integer with |v| < n/2 into Z_n."""
    v = int(v)
    n = int(n)
    if 2 * abs(v) >= n:
        raise DomainError(f"|{v}| does not fit below N/2")
    return v % n


def signed_decode(x, n):
    """Inverse of :func:`signed_encode`: values above n/2 are read as negative."""
    x = int(x) % int(n)
    return x if 2 * x <= int(n) else x - int(n)


def pava(values):
    """L2 projection onto nondecreasing sequences (pool adjacent violators)."""
    blocks = []  # (sum, count) per pooled block
    for v in np.asarray(values, dtype=float):
        total, count = v, 1
        while blocks and blocks[-1][0] / blocks[-1][1] > total / count:
            prev_total, prev_count = blocks.pop()
            total += prev_total
            count += prev_count
        blocks.append((total, count))
    out = []
    for total, count in blocks:
        out.extend([total / count] * count)
    return np.asarray(out, dtype=float)


def isotonic_cdf(noisy, upper_bound):
    """Least-squares nondecreasing fit of a noisy prefix-count vector, clamped to [0, n].

    Clamping after pooling gives the box-constrained optimum: pooled blocks
    are flat, and clipping a monotone sequence keeps it monotone while each
    clipped block is pushed to the nearest feasible value.
    """
    if upper_bound < 0:
        raise ValueError("upper bound must be non-negative")
    if len(noisy) == 0:
        return np.zeros(0)
    return np.clip(pava(noisy), 0.0, float(upper_bound))
