"""One-sided Mann-Whitney U test with an exact small-sample mode."""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

from .errors import ConfigError

EXACT_LIMIT = 12


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _u_from_ranks(ranks_a: np.ndarray, n: int) -> float:
    return float(ranks_a.sum() - n * (n + 1) / 2.0)


def mann_whitney_u(
    a: Sequence[float],
    b: Sequence[float],
    alternative: str = "greater",
    method: str = "auto",
) -> tuple[float, float]:
    """Return ``(U_a, p)`` for H1: ``a`` tends to exceed ``b`` (or the reverse/two-sided).

    ``method="auto"`` enumerates every assignment of the pooled midranks when
    ``len(a) + len(b) <= 12`` and otherwise uses the tie-corrected normal
    approximation with continuity correction.  When every pooled value is
    equal the test carries no information and ``p = 0.5`` by convention.
    """
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    n, m = len(x), len(y)
    if n == 0 or m == 0:
        raise ConfigError("both samples must be non-empty")
    if alternative not in ("greater", "less", "two-sided"):
        raise ConfigError(f"unknown alternative {alternative!r}")
    if method not in ("auto", "exact", "normal"):
        raise ConfigError(f"unknown method {method!r}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ConfigError("samples must be finite")

    pooled = np.concatenate([x, y])
    ranks = _midranks(pooled)
    u = _u_from_ranks(ranks[:n], n)
    if np.all(pooled == pooled[0]):
        return u, 0.5

    exact = method == "exact" or (method == "auto" and n + m <= EXACT_LIMIT)
    if exact:
        p = _exact_p(ranks, n, u, alternative)
    else:
        p = _normal_p(ranks, n, m, u, alternative)
    return u, float(min(1.0, max(0.0, p)))


def _exact_p(ranks: np.ndarray, n: int, u: float, alternative: str) -> float:
    total = len(ranks)
    count = math.comb(total, n)
    offset = n * (n + 1) / 2.0
    # Compare with a small tolerance; midrank sums are multiples of 0.5.
    eps = 1e-9
    ge = le = 0
    for idx in itertools.combinations(range(total), n):
        us = ranks[list(idx)].sum() - offset
        ge += us >= u - eps
        le += us <= u + eps
    if alternative == "greater":
        return ge / count
    if alternative == "less":
        return le / count
    return min(1.0, 2.0 * min(ge, le) / count)


def _normal_p(ranks: np.ndarray, n: int, m: int, u: float, alternative: str) -> float:
    total = n + m
    mean = n * m / 2.0
    _, counts = np.unique(ranks, return_counts=True)
    tie = float(np.sum(counts**3 - counts))
    var = n * m / 12.0 * ((total + 1) - tie / (total * (total - 1)))
    if var <= 0:
        return 0.5
    sd = math.sqrt(var)

    def upper(stat: float) -> float:
        z = (stat - mean - 0.5) / sd
        return 0.5 * math.erfc(z / math.sqrt(2.0))

    if alternative == "greater":
        return upper(u)
    if alternative == "less":
        return upper(n * m - u)
    return min(1.0, 2.0 * min(upper(u), upper(n * m - u)))


__all__ = ["mann_whitney_u", "EXACT_LIMIT"]
