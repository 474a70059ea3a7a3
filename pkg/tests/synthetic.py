"""Seeded three-segment sweep curves: flat, linear rise, flat, plus Gaussian noise."""

import numpy as np


def three_segment_curve(seed: int, n: int = 13, sigma: float = 0.01):
    """Returns ``(scores, true_k_star)`` where ``scores[i]`` belongs to ``k = i + 1``."""
    r = np.random.default_rng(seed)
    e = int(r.integers(1, 5))
    c = int(r.integers(e + 3, n - 2))
    lo, rise = r.uniform(0.1, 0.4), r.uniform(0.3, 0.6)
    x = np.arange(n)
    y = np.where(x <= e, lo, np.where(x >= c, lo + rise, lo + rise * (x - e) / (c - e)))
    return y + r.normal(0.0, sigma, n), c + 1
