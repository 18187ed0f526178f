import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

import oracles
from twostage_inference import designs as D


def _support_dict(enum):
    return {tuple(int(i) for i in s): float(p) for s, p in enum.as_dict().items() if p > 0}


def _rand_targets(draw_list, n):
    sizes = np.asarray(draw_list, dtype=float)
    return D.pps_probabilities(sizes, n)


size_lists = st.lists(st.floats(min_value=0.5, max_value=20.0), min_size=3, max_size=9)


# ---------------------------------------------------------------------------
# DesignSpec invariants


def test_fixed_size_sums():
    pi = D.pps_probabilities([1, 2, 3, 4, 5], 2)
    for d in (D.srswor(5, 2), D.rejective(target_pi=pi), D.sampford(pi)):
        assert d.probs.sum() == pytest.approx(2, abs=1e-9)
        assert np.all((d.probs > 0) & (d.probs <= 1))


@pytest.mark.parametrize(
    "make",
    [
        lambda: D.srswor(3, 4),
        lambda: D.poisson([0.2, 1.2]),
        lambda: D.DesignSpec("systematic", np.array([0.5, 0.5]), 1),
        lambda: D.rejective(target_pi=[0.2, 0.3], working=[0.5, 0.5], n=1),
        lambda: D.pps_probabilities([1, -1], 1),
    ],
)
def test_invalid_designs(make):
    with pytest.raises(D.DesignError):
        make()


def test_pps_capping():
    pi = D.pps_probabilities([1, 1, 1, 30], 2)
    assert pi[3] == 1.0
    np.testing.assert_allclose(pi[:3], 1 / 3)
    assert pi.sum() == pytest.approx(2)


@given(size_lists, st.integers(1, 3))
def test_pps_properties(sizes, n):
    n = min(n, len(sizes))
    pi = D.pps_probabilities(sizes, n)
    assert pi.sum() == pytest.approx(n, abs=1e-9)
    assert np.all(pi <= 1) and np.all(pi > 0)
    # below the cap, probabilities stay proportional to size
    free = pi < 1
    if free.sum() > 1:
        ratio = pi[free] / np.asarray(sizes)[free]
        np.testing.assert_allclose(ratio, ratio[0], rtol=1e-9)


# ---------------------------------------------------------------------------
# enumeration against brute force


def test_enumerate_poisson_half():
    e = D.enumerate_design(D.poisson([0.5, 0.5]))
    assert len(e) == 4
    np.testing.assert_allclose(e.probs, 0.25)


def test_enumerate_symmetric_rejective():
    e = D.enumerate_design(D.rejective(working=[0.5, 0.5, 0.5], n=2))
    assert len(e) == 3
    np.testing.assert_allclose(e.probs, 1 / 3)


def test_enumerate_sampford_support():
    pi = [0.2, 0.4, 0.6, 0.8]
    e = D.enumerate_design(D.sampford(pi, 2))
    assert len(e) == math.comb(4, 2)
    assert e.probs.sum() == pytest.approx(1, abs=1e-12)
    ref = oracles.sampford_support(pi, 2)
    got = _support_dict(e)
    for s, p in ref.items():
        assert got[s] == pytest.approx(p, abs=1e-12)


@given(size_lists, st.integers(1, 4))
def test_rejective_enumeration_matches_definition(sizes, n):
    n = min(n, len(sizes) - 1)
    pi = _rand_targets(sizes, n)
    if np.any(pi >= 1):
        return
    d = D.rejective(target_pi=pi)
    ref = oracles.cps_support(list(d.working), n)
    got = _support_dict(D.enumerate_design(d))
    assert set(got) == set(ref)
    for s, p in ref.items():
        assert got[s] == pytest.approx(p, rel=1e-9, abs=1e-15)


@given(st.lists(st.floats(0.05, 0.95), min_size=1, max_size=7))
def test_poisson_enumeration(p):
    got = _support_dict(D.enumerate_design(D.poisson(p)))
    ref = oracles.poisson_support(p)
    for s, q in ref.items():
        assert got.get(s, 0.0) == pytest.approx(q, abs=1e-12)


def test_enumeration_limit():
    with pytest.raises(D.EnumerationLimitError):
        D.enumerate_design(D.srswor(30, 3))


def test_bitmask_keys_unique():
    e = D.enumerate_design(D.srswor(6, 3))
    assert len(set(e.keys.tolist())) == len(e)


# ---------------------------------------------------------------------------
# inclusion tables


def test_srswor_table():
    t = D.exact_inclusion(D.srswor(4, 2))
    np.testing.assert_allclose(t.first, 0.5)
    assert t.second[0, 1] == pytest.approx(float(oracles.fraction_srswor_pij(4, 2)))
    assert t.second[0, 1] == pytest.approx(1 / 6)


def test_equal_rejective_is_srswor():
    t_r = D.exact_inclusion(D.rejective(working=[0.3] * 4, n=2))
    t_s = D.exact_inclusion(D.srswor(4, 2))
    np.testing.assert_allclose(t_r.second, t_s.second, atol=1e-14)


def test_sampford_yates_grundy_identity():
    pi = [0.2, 0.4, 0.6, 0.8]
    t = D.exact_inclusion(D.sampford(pi, 2))
    np.testing.assert_allclose(t.first, pi, atol=1e-12)
    off = t.second.sum(axis=1) - np.diag(t.second)
    np.testing.assert_allclose(off, (2 - 1) * np.asarray(pi), atol=1e-12)


@given(size_lists, st.integers(1, 4))
def test_table_invariants(sizes, n):
    n = min(n, len(sizes) - 1)
    pi = _rand_targets(sizes, n)
    for d in (D.rejective(target_pi=pi), D.sampford(pi, n)) if np.all(pi < 1) else (D.rejective(target_pi=pi),):
        t = D.exact_inclusion(d, max_order=3)
        s = t.second
        np.testing.assert_allclose(s, s.T, atol=1e-15)
        assert np.all(s >= -1e-15)
        assert np.all(s <= np.minimum.outer(t.first, t.first) + 1e-12)
        off = s.sum(axis=1) - np.diag(s)
        np.testing.assert_allclose(off, (n - 1) * t.first, atol=1e-10)
        # Sigma_{s contains i} p(s) = pi_i via brute force
        first_ref, second_ref = oracles.inclusion(_support_dict(D.enumerate_design(d)), len(pi))
        np.testing.assert_allclose(t.first, first_ref, atol=1e-12)
        np.testing.assert_allclose(s, second_ref, atol=1e-12)


def test_higher_order_srswor_closed_form():
    t = D.exact_inclusion(D.srswor(7, 3), 4)
    assert t.joint((0, 1, 2)) == pytest.approx(3 * 2 * 1 / (7 * 6 * 5))
    assert t.joint((0, 1, 2, 3)) == 0.0
    e = D.inclusion_from_enumeration(D.enumerate_design(D.srswor(7, 3)), 4)
    assert e.joint((1, 4, 6)) == pytest.approx(t.joint((1, 4, 6)), abs=1e-14)


def test_joint_needs_distinct():
    with pytest.raises(D.DesignError):
        D.exact_inclusion(D.srswor(4, 2)).joint((1, 1))


@given(st.integers(4, 9), st.integers(2, 3), st.integers(0, 10**6))
def test_rejective_negative_association_exchangeable(N, n, seed):
    p = np.random.default_rng(seed).uniform(0.1, 0.9)
    t = D.exact_inclusion(D.rejective(working=[p] * N, n=n))
    d = t.delta[~np.eye(N, dtype=bool)]
    assert np.all(d <= 1e-15)


# ---------------------------------------------------------------------------
# calibration


def test_calibration_equal_targets():
    w = D.calibrate_rejective([0.4] * 5, 2)
    np.testing.assert_allclose(w, 0.4, atol=1e-12)


def test_calibration_small_case():
    target = [0.2, 0.4, 0.6, 0.8]
    w = D.calibrate_rejective(target, 2)
    first, _ = oracles.inclusion(oracles.cps_support(list(w), 2), 4)
    np.testing.assert_allclose(first, target, atol=1e-8)


def test_calibration_large():
    rng = np.random.default_rng(0)
    sizes = np.maximum(np.rint(rng.gamma(1 / 0.06**2, 40 * 0.06**2, 2000)), 2)
    target = D.pps_probabilities(sizes, 100)
    w = D.calibrate_rejective(target, 100)
    assert np.max(np.abs(D.cps_first_order(w, 100) - target)) < 1e-8


def test_cps_second_order_matches_enumeration():
    w = np.array([0.1, 0.3, 0.5, 0.7, 0.2, 0.9])
    _, second = oracles.inclusion(oracles.cps_support(list(w), 3), 6)
    np.testing.assert_allclose(D.cps_second_order(w, 3), second, atol=1e-12)


@pytest.mark.parametrize(
    "sizes,n", [([11.0, 1.625, 9.5], 2), ([1, 1, 1, 1, 60], 2), ([50, 1, 49, 2, 48], 3)]
)
def test_calibration_extreme_targets(sizes, n):
    target = D.pps_probabilities(sizes, n)
    w = D.calibrate_rejective(target, n)
    first, _ = oracles.inclusion(oracles.cps_support(list(w), n), len(sizes))
    np.testing.assert_allclose(first, target, atol=1e-9)


def test_calibration_take_all():
    target = D.pps_probabilities([1, 1, 1, 40, 2], 3)
    d = D.rejective(target_pi=target)
    first, _ = oracles.inclusion(_support_dict(D.enumerate_design(d)), 5)
    np.testing.assert_allclose(first, target, atol=1e-9)


@given(size_lists, st.integers(1, 4))
def test_cps_first_order_matches_bruteforce(sizes, n):
    n = min(n, len(sizes) - 1)
    w = np.clip(np.asarray(sizes) / (max(sizes) * 1.2), 0.01, 0.99)
    first, _ = oracles.inclusion(oracles.cps_support(list(w), n), len(w))
    np.testing.assert_allclose(D.cps_first_order(w, n), first, atol=1e-12)


# ---------------------------------------------------------------------------
# drawing


def test_srswor_draw_contract():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = D.draw(D.srswor(4, 2), rng)
        assert len(s) == 2 and len(set(s.tolist())) == 2
        assert set(s.tolist()) <= {0, 1, 2, 3}


def _subset_counts(design, rng, R, method="sequential"):
    counts = {}
    for _ in range(R):
        s = tuple(int(i) for i in D.draw(design, rng, method=method)) if design.kind == "rejective" else tuple(
            int(i) for i in D.draw(design, rng)
        )
        counts[s] = counts.get(s, 0) + 1
    return counts


@pytest.mark.parametrize("method", ["sequential", "rejection"])
def test_equal_rejective_uniform_subsets(method):
    rng = np.random.default_rng(2)
    d = D.rejective(working=[0.5] * 4, n=2)
    R = 60_000
    if method == "sequential":
        u = rng.random((R, 4))
        rows = D.cps_sequential(u, d)
        keys = rows[:, 0] * 4 + rows[:, 1]
        obs = np.array([np.sum(keys == a * 4 + b) for a, b in combinations(range(4), 2)])
    else:
        c = _subset_counts(d, rng, R, method)
        obs = np.array([c.get(s, 0) for s in combinations(range(4), 2)])
    sigma = math.sqrt(R * (1 / 6) * (5 / 6))
    assert np.all(np.abs(obs - R / 6) <= 3 * sigma)


def test_sequential_sampler_law():
    # chi-square goodness of fit of the one-pass sampler against the definition
    target = D.pps_probabilities([1, 2, 3, 5, 8, 13], 3)
    d = D.rejective(target_pi=target)
    u = np.random.default_rng(3).random((100_000, 6))
    rows = D.cps_sequential(u, d)
    ref = oracles.cps_support(list(d.working), 3)
    keys = {s: k for k, s in enumerate(ref)}
    idx = np.array([keys[tuple(r)] for r in rows.tolist()])
    obs = np.bincount(idx, minlength=len(ref))
    exp = np.array(list(ref.values())) * len(rows)
    # samples without the take-all unit have probability 0
    assert np.all(obs[exp == 0] == 0)
    pos = exp > 0
    assert stats.chisquare(obs[pos], exp[pos]).pvalue > 1e-3


def test_sampford_frequencies():
    pi = np.array([0.2, 0.4, 0.6, 0.8])
    d = D.sampford(pi, 2)
    rng = np.random.default_rng(4)
    R = 60_000
    hits = np.zeros(4)
    for _ in range(R):
        hits[D.draw(d, rng)] += 1
    sigma = np.sqrt(R * pi * (1 - pi))
    assert np.all(np.abs(hits - R * pi) <= 3 * sigma)


def test_poisson_draw_frequencies():
    p = np.array([0.1, 0.5, 0.9])
    rng = np.random.default_rng(5)
    R = 60_000
    hits = np.zeros(3)
    for _ in range(R):
        hits[D.draw(D.poisson(p), rng)] += 1
    assert np.all(np.abs(hits - R * p) <= 3 * np.sqrt(R * p * (1 - p)))


def test_floyd_uniform_draws():
    u = np.random.default_rng(6).random((60_000, 2))
    rows = np.sort(D.floyd_srswor(u, 5), axis=1)
    assert np.all(rows[:, 0] < rows[:, 1])
    keys = rows[:, 0] * 5 + rows[:, 1]
    obs = np.array([np.sum(keys == a * 5 + b) for a, b in combinations(range(5), 2)])
    assert stats.chisquare(obs).pvalue > 1e-3


def test_draw_frequencies_match_table():
    target = D.pps_probabilities([2, 3, 4, 6, 9], 2)
    d = D.rejective(target_pi=target)
    u = np.random.default_rng(7).random((60_000, 5))
    rows = D.cps_sequential(u, d)
    freq = np.bincount(rows.ravel(), minlength=5) / len(rows)
    sigma = np.sqrt(target * (1 - target) / len(rows))
    assert np.all(np.abs(freq - target) <= 3 * sigma)


def test_design_from_dict():
    d = D.design_from_dict({"kind": "rejective", "n": 2, "probs": "proportional_to_size"}, sizes=[1, 2, 3, 4])
    np.testing.assert_allclose(d.probs, D.pps_probabilities([1, 2, 3, 4], 2), atol=1e-9)
    e = D.design_from_dict({"kind": "srswor", "n": 2}, N=5)
    np.testing.assert_allclose(e.probs, 0.4)
    with pytest.raises(D.DesignError):
        D.design_from_dict({"kind": "srswor"}, N=5)
