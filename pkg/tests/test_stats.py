import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from splitmark.errors import ConfigError
from splitmark.stats import mann_whitney_u


def pairwise_u(a, b):
    """U from pairwise comparisons: wins plus half-ties (independent of ranks)."""
    return sum(Fraction(1) if x > y else Fraction(1, 2) if x == y else Fraction(0) for x in a for y in b)


def brute_force_p(a, b):
    """Enumerate every way to relabel the pooled values into groups of |a| and |b|."""
    pooled = list(a) + list(b)
    n = len(a)
    observed = pairwise_u(a, b)
    hits = total = 0
    for idx in itertools.combinations(range(len(pooled)), n):
        xs = [pooled[i] for i in idx]
        ys = [pooled[i] for i in range(len(pooled)) if i not in idx]
        total += 1
        hits += pairwise_u(xs, ys) >= observed
    return float(observed), hits / total


def test_complete_separation_three_vs_three():
    u, p = mann_whitney_u([4, 5, 6], [1, 2, 3])
    assert u == 9.0
    assert p == pytest.approx(1 / 20, abs=1e-15)


def test_identical_constant_samples_give_one_half():
    assert mann_whitney_u([1.0] * 5, [1.0] * 5)[1] == 0.5
    assert mann_whitney_u([1.0] * 20, [1.0] * 20)[1] == 0.5


def test_matches_brute_force_enumeration_on_random_corpus():
    rng = np.random.default_rng(2024)
    for _ in range(150):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(1, 5))
        # small integer support forces plenty of ties
        a = rng.integers(0, 4, size=n).tolist()
        b = rng.integers(0, 4, size=m).tolist()
        if len(set(a + b)) == 1:
            continue
        u, p = mann_whitney_u(a, b, method="exact")
        bu, bp = brute_force_p(a, b)
        assert u == bu
        assert p == pytest.approx(bp, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(0, 6), min_size=1, max_size=6),
    st.lists(st.integers(0, 6), min_size=1, max_size=6),
)
def test_u_identity(a, b):
    ua, _ = mann_whitney_u(a, b)
    ub, _ = mann_whitney_u(b, a)
    assert ua + ub == pytest.approx(len(a) * len(b))
    assert ua == float(pairwise_u(a, b))


def test_exact_agrees_with_scipy_without_ties():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a, b = rng.normal(size=5), rng.normal(0.5, size=6)
        for alt in ("greater", "less", "two-sided"):
            ours = mann_whitney_u(a, b, alt)[1]
            ref = sps.mannwhitneyu(a, b, alternative=alt, method="exact").pvalue
            assert ours == pytest.approx(ref, rel=1e-12)


def test_normal_approximation_agrees_with_scipy():
    rng = np.random.default_rng(8)
    for _ in range(20):
        a = rng.integers(0, 10, size=9)
        b = rng.integers(0, 10, size=11)
        for alt in ("greater", "less", "two-sided"):
            u, p = mann_whitney_u(a, b, alt)
            ref = sps.mannwhitneyu(a, b, alternative=alt, method="asymptotic", use_continuity=True)
            assert u == ref.statistic
            assert p == pytest.approx(ref.pvalue, rel=1e-10)


def test_auto_switches_at_twelve():
    a, b = [1, 2, 3, 4, 5, 6], [7, 8, 9, 10, 11, 12]
    assert mann_whitney_u(a, b, "less")[1] == pytest.approx(1 / 924)
    a2 = a + [0]
    exact = mann_whitney_u(a2, b, "less", method="exact")[1]
    auto = mann_whitney_u(a2, b, "less")[1]
    assert auto != exact


def test_errors():
    with pytest.raises(ConfigError):
        mann_whitney_u([], [1.0])
    with pytest.raises(ConfigError):
        mann_whitney_u([1.0], [2.0], alternative="bigger")
    with pytest.raises(ConfigError):
        mann_whitney_u([np.nan], [2.0])
