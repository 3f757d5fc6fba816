"""Reference implementations used to cross-check the vectorised code paths."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .attention import cycle_consistency_bias
from .sampling import make_rng

ORACLE_STREAM = 11


def brute_force_cycle_bias(A: Sequence[Sequence[float]], labels: Sequence[int]) -> List[float]:
    """Double argmax with plain loops; the first index wins every tie."""
    m, n = len(A), len(A[0])
    out = []
    for j in range(n):
        best_i = 0
        for i in range(1, m):
            if A[i][j] > A[best_i][j]:
                best_i = i
        best_j = 0
        for jj in range(1, n):
            if A[best_i][jj] > A[best_i][best_j]:
                best_j = jj
        out.append(0.0 if labels[best_j] == labels[j] else float("-inf"))
    return out


def random_instance(rng: np.random.Generator, max_m: int = 50, max_n: int = 80):
    """Affinity matrix and binary labels; a quarter of instances are rounded to plant ties."""
    m = int(rng.integers(1, max_m + 1))
    n = int(rng.integers(1, max_n + 1))
    A = rng.normal(size=(m, n))
    if rng.random() < 0.25:
        A = np.round(A, 1)
    kind = rng.random()
    if kind < 0.1:
        labels = np.full(n, int(rng.integers(0, 2)))
    else:
        labels = (rng.random(n) < rng.random()).astype(np.int64)
    return A, labels


def cycle_oracle_suite(trials: int = 1000, seed: int = 0, max_m: int = 50, max_n: int = 80) -> dict:
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = make_rng(seed, ORACLE_STREAM)
    matches = 0
    mismatches = []
    for t in range(trials):
        A, labels = random_instance(rng, max_m, max_n)
        got = cycle_consistency_bias(A, labels).bias
        want = np.array(brute_force_cycle_bias(A.tolist(), labels.tolist()))
        if np.array_equal(got, want):
            matches += 1
        elif len(mismatches) < 5:
            mismatches.append({"trial": t, "shape": list(A.shape)})
    return {
        "trials": trials,
        "seed": seed,
        "exact_matches": matches,
        "match_rate": matches / trials,
        "mismatches": mismatches,
    }
