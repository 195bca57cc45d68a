"""Seeded fold assignment, identical to the caller's documented scheme.

Both sides of the protocol derive folds from the request seed alone so a
value computed here is comparable with one computed by the caller's
built-in models: ``numpy.random.default_rng(seed).permutation(n)`` fixes
a row order, then

* regression: the row at permutation position ``i`` joins fold ``i % folds``;
* classification: classes are visited in ascending value order and their
  rows, taken in permutation order, share one running counter whose value
  modulo ``folds`` is the fold — a deterministic stratification.
"""

from __future__ import annotations

import numpy as np


def fold_assignment(y: np.ndarray, task: str, folds: int, seed: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    n = len(y)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if n < folds:
        raise ValueError(f"cannot make {folds} folds from {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    fold = np.empty(n, dtype=int)
    if task == "classification":
        counter = 0
        for cls in np.unique(y):
            for i in perm:
                if y[i] == cls:
                    fold[i] = counter % folds
                    counter += 1
    else:
        for pos, i in enumerate(perm):
            fold[i] = pos % folds
    return fold


def effective_folds(y: np.ndarray, task: str, folds: int) -> int:
    """Shrink the fold count when the rarest class cannot reach every fold."""
    limit = max(2, min(folds, len(y)))
    if task == "classification":
        _, counts = np.unique(np.asarray(y, dtype=float), return_counts=True)
        smallest = int(counts.min())
        if smallest >= 2:
            limit = min(limit, max(2, smallest))
    return limit
