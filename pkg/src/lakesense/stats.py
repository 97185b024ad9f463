"""Two-sample permutation test on the difference of means."""
from __future__ import annotations

import numpy as np


def permutation_test(sample_a, sample_b, resamples: int = 10_000, seed: int = 0,
                     chunk: int = 1000) -> float:
    """Two-sided p-value, (1 + #{|perm diff| >= |observed diff|}) / (resamples + 1)."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("both samples need at least two values")
    if resamples < 1000:
        raise ValueError("use at least 1000 resamples")
    pooled = np.concatenate([a, b])
    if np.all(pooled == pooled[0]):
        return 1.0
    observed = abs(a.mean() - b.mean())
    # exact ties (e.g. identical samples) should count as "at least as extreme"
    tol = 1e-12 * max(1.0, np.abs(pooled).max())
    rng = np.random.default_rng(seed)
    na = len(a)
    hits = 0
    done = 0
    while done < resamples:
        m = min(chunk, resamples - done)
        perm = rng.permuted(np.tile(pooled, (m, 1)), axis=1)
        diff = np.abs(perm[:, :na].mean(axis=1) - perm[:, na:].mean(axis=1))
        hits += int(np.count_nonzero(diff >= observed - tol))
        done += m
    return (1 + hits) / (resamples + 1)
