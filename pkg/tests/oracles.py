"""Brute-force reference computations used as test oracles.

Everything here is written directly from the definitions with itertools
and plain loops, without touching the package's enumeration code.
"""

from __future__ import annotations

from fractions import Fraction
from itertools import combinations, product
from math import comb, prod


def cps_support(working, n):
    """Conditional Poisson: p(s) proportional to prod_{i in s} w_i/(1-w_i), |s| = n.

    Units with w_i = 1 are take-alls: samples without them get weight 0.
    """
    N = len(working)
    sure = {i for i in range(N) if working[i] >= 1.0}
    weights = {}
    for s in combinations(range(N), n):
        if not sure <= set(s):
            weights[s] = 0.0
            continue
        weights[s] = prod(working[i] / (1.0 - working[i]) for i in s if i not in sure)
    total = sum(weights.values())
    return {s: w / total for s, w in weights.items()}


def sampford_support(pi, n):
    """Sampford: p(s) proportional to sum_{i in s}(1-pi_i) prod_{i in s} pi_i/(1-pi_i)."""
    N = len(pi)
    weights = {}
    for s in combinations(range(N), n):
        weights[s] = sum(1.0 - pi[i] for i in s) * prod(pi[i] / (1.0 - pi[i]) for i in s)
    total = sum(weights.values())
    return {s: w / total for s, w in weights.items()}


def srswor_support(N, n):
    return {s: 1.0 / comb(N, n) for s in combinations(range(N), n)}


def poisson_support(p):
    N = len(p)
    out = {}
    for bits in product((0, 1), repeat=N):
        s = tuple(i for i in range(N) if bits[i])
        out[s] = prod(p[i] if bits[i] else 1.0 - p[i] for i in range(N))
    return out


def inclusion(support, N):
    first = [0.0] * N
    second = [[0.0] * N for _ in range(N)]
    for s, ps in support.items():
        for i in s:
            first[i] += ps
            for j in s:
                second[i][j] += ps
    return first, second


def two_stage_outcomes(values, first_support, second_n):
    """Every (probability, psus, ssu-lists) outcome of a design with SRSWOR
    second stages of size ``second_n[i]`` in PSU ``i``."""
    for s1, p1 in first_support.items():
        choices = [list(combinations(range(len(values[i])), second_n[i])) for i in s1]
        for combo in product(*choices):
            p = p1
            for i, c in zip(s1, combo):
                p /= comb(len(values[i]), second_n[i])
            yield p, s1, combo


def ht_total(values, pi_first, second_n, psus, ssus):
    total = 0.0
    for i, s in zip(psus, ssus):
        f = second_n[i] / len(values[i])
        total += sum(values[i][k] for k in s) / f / pi_first[i]
    return total


def exact_mean_var(values, first_support, second_n):
    """Exact mean and variance of the HT estimator, with exact rationals
    for the probabilities when the design probabilities are rational."""
    N = len(values)
    pi, _ = inclusion(first_support, N)
    m1 = m2 = 0.0
    for p, s1, ssus in two_stage_outcomes(values, first_support, second_n):
        y = ht_total(values, pi, second_n, s1, ssus)
        m1 += p * y
        m2 += p * y * y
    return m1, m2 - m1 * m1


def srswor_within_variance(vals, n):
    N = len(vals)
    if N == 1:
        return 0.0
    mean = sum(vals) / N
    s2 = sum((v - mean) ** 2 for v in vals) / (N - 1)
    return N * N * (1.0 / n - 1.0 / N) * s2


def fraction_srswor_pij(N, n):
    return Fraction(n * (n - 1), N * (N - 1))
